//! Versioned binary containers for learned models.
//!
//! All numeric payloads are little-endian `f64`, so a save/load round trip
//! is bit-exact. Every file starts with a four-byte magic and a `u32`
//! version; unknown magics and versions are rejected with the offending
//! path in the error.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lowrank::LowRankTransform;
use crate::pca::PcaModel;

const MATRIX_MAGIC: &[u8; 4] = b"NVMX";
const TRANSFORM_MAGIC: &[u8; 4] = b"NVLT";
const PCA_MAGIC: &[u8; 4] = b"NVPC";
const VERSION: u32 = 1;

fn write_matrix(out: &mut impl std::io::Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    // column-major entries, matching the in-memory layout
    for v in m.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or(path: &Path, r: &mut impl std::io::Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, "truncated file"))
}

fn read_u64(path: &Path, r: &mut impl std::io::Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(path, r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix(path: &Path, r: &mut impl std::io::Read) -> Result<DMatrix<f64>> {
    let rows = read_u64(path, r)? as usize;
    let cols = read_u64(path, r)? as usize;
    let Some(len) = rows.checked_mul(cols) else {
        return Err(Error::format(path, "matrix dimensions overflow"));
    };
    if len > 1 << 28 {
        return Err(Error::format(path, "matrix implausibly large"));
    }
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        read_exact_or(path, r, &mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(DMatrix::from_column_slice(rows, cols, &data))
}

fn check_header(path: &Path, r: &mut impl std::io::Read, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    read_exact_or(path, r, &mut got)?;
    if &got != magic {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", got, magic),
        ));
    }
    let mut vb = [0u8; 4];
    read_exact_or(path, r, &mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    Ok(())
}

/// Saves a bare matrix.
pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_matrix(&mut out, m)?;
    out.flush()?;
    Ok(())
}

/// Loads a bare matrix saved by [`save_matrix`], bit-exact.
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    check_header(path, &mut r, MATRIX_MAGIC)?;
    read_matrix(path, &mut r)
}

/// Saves a learned low-rank transform.
pub fn save_transform(path: &Path, t: &LowRankTransform) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(TRANSFORM_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_matrix(&mut out, t.matrix())?;
    out.flush()?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<LowRankTransform> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    check_header(path, &mut r, TRANSFORM_MAGIC)?;
    let m = read_matrix(path, &mut r)?;
    LowRankTransform::from_matrix(m)
}

/// Saves a PCA model (mean, projection, eigenvalues).
pub fn save_pca(path: &Path, model: &PcaModel) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(PCA_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let mean = DMatrix::from_column_slice(model.mean().len(), 1, model.mean().as_slice());
    write_matrix(&mut out, &mean)?;
    write_matrix(&mut out, model.projection())?;
    let eig = DMatrix::from_column_slice(model.eigenvalues().len(), 1, model.eigenvalues());
    write_matrix(&mut out, &eig)?;
    out.flush()?;
    Ok(())
}

pub fn load_pca(path: &Path) -> Result<PcaModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    check_header(path, &mut r, PCA_MAGIC)?;
    let mean = read_matrix(path, &mut r)?;
    let projection = read_matrix(path, &mut r)?;
    let eig = read_matrix(path, &mut r)?;
    if mean.ncols() != 1 || eig.ncols() != 1 {
        return Err(Error::format(path, "mean/eigenvalue blocks must be vectors"));
    }
    if projection.ncols() != mean.nrows() {
        return Err(Error::format(
            path,
            format!(
                "projection is {}x{} but the mean has {} entries",
                projection.nrows(),
                projection.ncols(),
                mean.nrows()
            ),
        ));
    }
    if eig.nrows() != projection.nrows() {
        return Err(Error::format(path, "one eigenvalue per projection row required"));
    }
    PcaModel::from_parts(
        nalgebra::DVector::from_column_slice(mean.as_slice()),
        projection,
        eig.as_slice().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-10.0..10.0))
    }

    #[test]
    fn matrix_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nvmx");
        let m = random_matrix(1, 17, 9);
        save_matrix(&path, &m).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(m.nrows(), back.nrows());
        assert_eq!(m.ncols(), back.ncols());
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_magic_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nvmx");
        let m = random_matrix(2, 3, 3);
        save_transform(&path, &LowRankTransform::from_matrix(m).unwrap()).unwrap();
        let err = load_matrix(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("magic"), "{msg}");
        assert!(msg.contains("m.nvmx"), "{msg}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nvmx");
        let m = random_matrix(3, 8, 8);
        save_matrix(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_matrix(&path).is_err());
    }

    #[test]
    fn transform_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nvlt");
        let t = LowRankTransform::from_matrix(random_matrix(4, 12, 12)).unwrap();
        save_transform(&path, &t).unwrap();
        let back = load_transform(&path).unwrap();
        for (a, b) in t.matrix().as_slice().iter().zip(back.matrix().as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pca_roundtrip() {
        use crate::pca::fit_pca;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nvpc");
        let data = random_matrix(5, 10, 30);
        let model = fit_pca(&data, 4).unwrap();
        save_pca(&path, &model).unwrap();
        let back = load_pca(&path).unwrap();
        assert_eq!(model.output_dim(), back.output_dim());
        for (a, b) in model
            .projection()
            .as_slice()
            .iter()
            .zip(back.projection().as_slice())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in model.mean().iter().zip(back.mean().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(model.eigenvalues(), back.eigenvalues());
    }
}
