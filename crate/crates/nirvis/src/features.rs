//! Feature-vector exchange format, subject-disjoint folds, and a built-in
//! pooled-intensity feature provider.
//!
//! Deep features normally come from an external recognition network; the
//! file format here lets any provider hand vectors to the embedding and
//! matching stages. Records carry the subject, the source image, the
//! spectrum, how the input was produced (raw NIR, hallucinated, or real
//! VIS) and whether the vector is a replicated stand-in written by a
//! degraded pipeline stage.
//!
//! Vectors round-trip exactly: floats are written with Rust's shortest
//! round-trip formatting.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lowrank::Spectrum;
use crate::raster::Raster;

/// How a feature's source image was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InputKind {
    RawNir,
    Hallucinated,
    Vis,
}

impl InputKind {
    fn tag(self) -> &'static str {
        match self {
            InputKind::RawNir => "raw-nir",
            InputKind::Hallucinated => "hallucinated",
            InputKind::Vis => "vis",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "raw-nir" => Some(InputKind::RawNir),
            "hallucinated" => Some(InputKind::Hallucinated),
            "vis" => Some(InputKind::Vis),
            _ => None,
        }
    }
}

fn spectrum_tag(s: Spectrum) -> &'static str {
    match s {
        Spectrum::Nir => "nir",
        Spectrum::Vis => "vis",
    }
}

fn parse_spectrum(s: &str) -> Option<Spectrum> {
    match s {
        "nir" => Some(Spectrum::Nir),
        "vis" => Some(Spectrum::Vis),
        _ => None,
    }
}

/// One feature vector with its identity and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub subject: u32,
    pub image: u32,
    pub spectrum: Spectrum,
    pub kind: InputKind,
    /// True when this vector was copied from another record because the
    /// producing stage was skipped or degraded.
    pub replicated: bool,
    pub vector: Vec<f64>,
}

/// A set of equal-dimension feature records from one provider.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub provider: String,
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(provider: impl Into<String>, dim: usize) -> Self {
        Self {
            provider: provider.into(),
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: FeatureRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "record for subject {} image {} has {} values, set dimension is {}",
                record.subject,
                record.image,
                record.vector.len(),
                self.dim
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Columns-as-vectors matrix plus aligned subject labels.
    pub fn to_matrix(&self) -> (nalgebra::DMatrix<f64>, Vec<u32>) {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.records.len());
        let mut labels = Vec::with_capacity(self.records.len());
        for (j, r) in self.records.iter().enumerate() {
            for (i, &v) in r.vector.iter().enumerate() {
                m[(i, j)] = v;
            }
            labels.push(r.subject);
        }
        (m, labels)
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.records.iter().map(|r| r.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Records filtered by spectrum.
    pub fn filter_spectrum(&self, spectrum: Spectrum) -> FeatureSet {
        FeatureSet {
            provider: self.provider.clone(),
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| r.spectrum == spectrum)
                .cloned()
                .collect(),
        }
    }

    /// Records whose subject is in `subjects`.
    pub fn filter_subjects(&self, subjects: &[u32]) -> FeatureSet {
        FeatureSet {
            provider: self.provider.clone(),
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| subjects.contains(&r.subject))
                .cloned()
                .collect(),
        }
    }
}

const HEADER: &str = "nirvis-features v1";

/// Writes a feature set as a line-oriented text file.
pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "provider {}", set.provider).unwrap();
    writeln!(out, "dim {}", set.dim).unwrap();
    writeln!(out, "count {}", set.records.len()).unwrap();
    for r in &set.records {
        if r.vector.len() != set.dim {
            return Err(Error::DimensionMismatch(format!(
                "record for subject {} image {} has {} values, header says {}",
                r.subject,
                r.image,
                r.vector.len(),
                set.dim
            )));
        }
        write!(
            out,
            "{} {} {} {} {}",
            r.subject,
            r.image,
            spectrum_tag(r.spectrum),
            r.kind.tag(),
            u8::from(r.replicated)
        )
        .unwrap();
        for v in &r.vector {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a feature set, failing on the first malformed record with its
/// position in the file.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let mut expect = |prefix: &str| -> Result<String> {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing header"))?;
        if prefix.is_empty() {
            return Ok(line.to_string());
        }
        line.strip_prefix(prefix)
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::format(path, format!("line {}: expected `{prefix}...`", n + 1)))
    };

    let head = expect("")?;
    if head != HEADER {
        return Err(Error::format(path, format!("unrecognized header `{head}`")));
    }
    let provider = expect("provider ")?;
    let dim: usize = expect("dim ")?
        .parse()
        .map_err(|_| Error::format(path, "dim is not an integer"))?;
    let count: usize = expect("count ")?
        .parse()
        .map_err(|_| Error::format(path, "count is not an integer"))?;

    let mut set = FeatureSet::new(provider, dim);
    for (idx, (line_no, line)) in lines.enumerate() {
        if idx >= count {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::format(
                path,
                format!("line {}: more records than the declared count {count}", line_no + 1),
            ));
        }
        let bad = |what: &str| Error::format(path, format!("record {} (line {}): {what}", idx + 1, line_no + 1));
        let mut parts = line.split_whitespace();
        let subject: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad subject id"))?;
        let image: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad image id"))?;
        let spectrum = parts
            .next()
            .and_then(parse_spectrum)
            .ok_or_else(|| bad("bad spectrum (want nir|vis)"))?;
        let kind = parts
            .next()
            .and_then(InputKind::parse)
            .ok_or_else(|| bad("bad input kind (want raw-nir|hallucinated|vis)"))?;
        let replicated = match parts.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("bad replicated flag (want 0|1)")),
        };
        let vector: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric feature value"))?;
        if vector.len() != dim {
            return Err(bad(&format!("{} values, header says {dim}", vector.len())));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature value"));
        }
        set.records.push(FeatureRecord {
            subject,
            image,
            spectrum,
            kind,
            replicated,
            vector,
        });
    }
    if set.records.len() != count {
        return Err(Error::format(
            path,
            format!("{} records, header says {count}", set.records.len()),
        ));
    }
    Ok(set)
}

/// Subject-disjoint fold partition: subjects in ascending order, split into
/// contiguous blocks as even as possible (earlier folds take the remainder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<u32>>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&subject))
    }
}

/// Assigns unique subjects to `folds` contiguous blocks.
pub fn assign_folds(subjects: &[u32], folds: usize) -> Result<FoldAssignment> {
    let mut unique: Vec<u32> = subjects.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if folds == 0 {
        return Err(Error::Contract("fold count must be positive".into()));
    }
    if unique.len() < folds {
        return Err(Error::Contract(format!(
            "{} subjects cannot fill {} folds",
            unique.len(),
            folds
        )));
    }
    let base = unique.len() / folds;
    let extra = unique.len() % folds;
    let mut out = Vec::with_capacity(folds);
    let mut at = 0;
    for i in 0..folds {
        let take = base + usize::from(i < extra);
        out.push(unique[at..at + take].to_vec());
        at += take;
    }
    Ok(FoldAssignment { folds: out })
}

/// Splits a feature set into (train, test) by subject: the selected fold is
/// the test partition, all other folds train.
pub fn split_folds(
    set: &FeatureSet,
    assignment: &FoldAssignment,
    test_fold: usize,
) -> Result<(FeatureSet, FeatureSet)> {
    if test_fold >= assignment.folds.len() {
        return Err(Error::Contract(format!(
            "fold {test_fold} out of range ({} folds)",
            assignment.folds.len()
        )));
    }
    let test_subjects = &assignment.folds[test_fold];
    let train_subjects: Vec<u32> = assignment
        .folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != test_fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    Ok((
        set.filter_subjects(&train_subjects),
        set.filter_subjects(test_subjects),
    ))
}

/// Grid size of the built-in pooled feature provider.
pub const POOL_GRID: usize = 8;

/// Name recorded in feature files written by the built-in provider.
pub const POOL_PROVIDER: &str = "pooled-mean-8x8";

fn pool_channel(r: &Raster, out: &mut Vec<f64>) {
    let (w, h) = (r.width(), r.height());
    for by in 0..POOL_GRID {
        let y0 = by * h / POOL_GRID;
        let y1 = (by + 1) * h / POOL_GRID;
        for bx in 0..POOL_GRID {
            let x0 = bx * w / POOL_GRID;
            let x1 = (bx + 1) * w / POOL_GRID;
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += r.get(x, y);
                }
            }
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
}

/// Built-in stand-in for an external deep feature network: mean intensity
/// over an 8x8 block grid per channel (192 values for RGB).
pub fn pooled_features_rgb(r: &Raster, g: &Raster, b: &Raster) -> Result<Vec<f64>> {
    for c in [r, g, b] {
        if c.width() < POOL_GRID || c.height() < POOL_GRID {
            return Err(Error::InvalidInput(format!(
                "image {}x{} smaller than the {POOL_GRID}x{POOL_GRID} pooling grid",
                c.width(),
                c.height()
            )));
        }
    }
    if r.width() != g.width()
        || r.width() != b.width()
        || r.height() != g.height()
        || r.height() != b.height()
    {
        return Err(Error::DimensionMismatch("channel sizes differ".into()));
    }
    let mut out = Vec::with_capacity(3 * POOL_GRID * POOL_GRID);
    pool_channel(r, &mut out);
    pool_channel(g, &mut out);
    pool_channel(b, &mut out);
    Ok(out)
}

/// Grayscale variant (64 values): the image is used for all three planes'
/// worth of information collapsed to one.
pub fn pooled_features_gray(img: &Raster) -> Result<Vec<f64>> {
    if img.width() < POOL_GRID || img.height() < POOL_GRID {
        return Err(Error::InvalidInput(format!(
            "image {}x{} smaller than the {POOL_GRID}x{POOL_GRID} pooling grid",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::with_capacity(POOL_GRID * POOL_GRID);
    pool_channel(img, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn record(subject: u32, image: u32, dim: usize, seed: u64) -> FeatureRecord {
        let mut rng = StdRng::seed_from_u64(seed);
        FeatureRecord {
            subject,
            image,
            spectrum: if image % 2 == 0 { Spectrum::Nir } else { Spectrum::Vis },
            kind: InputKind::Vis,
            replicated: false,
            vector: (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        let mut set = FeatureSet::new("test-provider", 6);
        for i in 0..5 {
            set.push(record(i / 2, i, 6, i as u64)).unwrap();
        }
        // awkward values that expose sloppy float formatting
        set.records[0].vector[0] = 0.1 + 0.2;
        set.records[1].vector[3] = f64::MIN_POSITIVE;
        set.records[2].replicated = true;
        set.records[2].kind = InputKind::Hallucinated;
        save_features(&path, &set).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(set, back);
        for (a, b) in set.records.iter().zip(&back.records) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn mixed_dimension_record_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        let mut set = FeatureSet::new("p", 4);
        set.push(record(1, 0, 4, 1)).unwrap();
        set.push(record(1, 1, 4, 2)).unwrap();
        save_features(&path, &set).unwrap();
        // corrupt the second record by dropping a value
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let trimmed = lines[5].rsplit_once(' ').unwrap().0.to_string();
        lines[5] = &trimmed;
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = load_features(&path).unwrap_err().to_string();
        assert!(err.contains("record 2"), "{err}");
        assert!(err.contains("3 values"), "{err}");
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        let mut set = FeatureSet::new("p", 2);
        set.push(record(1, 0, 2, 1)).unwrap();
        save_features(&path, &set).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("count 1", "count 2")).unwrap();
        assert!(load_features(&path).is_err());
    }

    #[test]
    fn push_rejects_wrong_dimension() {
        let mut set = FeatureSet::new("p", 3);
        assert!(set.push(record(1, 0, 4, 1)).is_err());
    }

    #[test]
    fn folds_are_disjoint_and_cover() {
        let subjects: Vec<u32> = (1..=20).collect();
        for folds in [6usize, 10] {
            let a = assign_folds(&subjects, folds).unwrap();
            assert_eq!(a.folds.len(), folds);
            let mut all: Vec<u32> = a.folds.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, subjects);
            let sizes: Vec<usize> = a.folds.iter().map(|f| f.len()).collect();
            let (min, max) = (
                *sizes.iter().min().unwrap(),
                *sizes.iter().max().unwrap(),
            );
            assert!(max - min <= 1, "uneven folds: {sizes:?}");
        }
    }

    #[test]
    fn folds_are_contiguous_in_subject_order() {
        let subjects = vec![7u32, 3, 9, 1, 5, 11, 2, 8];
        let a = assign_folds(&subjects, 4).unwrap();
        let flat: Vec<u32> = a.folds.iter().flatten().copied().collect();
        let mut sorted = subjects.clone();
        sorted.sort_unstable();
        assert_eq!(flat, sorted);
    }

    #[test]
    fn split_is_subject_disjoint() {
        let mut set = FeatureSet::new("p", 2);
        for s in 0..9u32 {
            for img in 0..2 {
                set.push(record(s, img, 2, (s * 10 + img) as u64)).unwrap();
            }
        }
        let a = assign_folds(&set.subjects(), 3).unwrap();
        for fold in 0..3 {
            let (train, test) = split_folds(&set, &a, fold).unwrap();
            let train_subjects = train.subjects();
            for s in test.subjects() {
                assert!(!train_subjects.contains(&s));
            }
            assert_eq!(train.records.len() + test.records.len(), set.records.len());
        }
    }

    #[test]
    fn too_many_folds_rejected() {
        assert!(assign_folds(&[1, 2, 3], 4).is_err());
        assert!(assign_folds(&[1, 2, 3], 0).is_err());
    }

    #[test]
    fn pooled_constant_image_gives_constant_vector() {
        let img = Raster::from_fn(32, 32, |_, _| 0.25);
        let v = pooled_features_gray(&img).unwrap();
        assert_eq!(v.len(), POOL_GRID * POOL_GRID);
        assert!(v.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn pooled_rgb_dimension_and_block_means() {
        let r = Raster::from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 1.0 });
        let g = Raster::from_fn(16, 16, |_, _| 0.5);
        let b = Raster::from_fn(16, 16, |_, y| y as f64 / 16.0);
        let v = pooled_features_rgb(&r, &g, &b).unwrap();
        assert_eq!(v.len(), 192);
        // red: left half blocks 0, right half 1 (2x2-pixel blocks)
        assert_eq!(v[0], 0.0);
        assert_eq!(v[7], 1.0);
        // green: uniformly 0.5
        assert!((v[64] - 0.5).abs() < 1e-12);
        // blue first row block: mean of y in {0, 1} -> 0.5/16
        assert!((v[128] - 0.5 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_handles_non_divisible_sizes() {
        let img = Raster::from_fn(13, 11, |x, y| (x + y) as f64);
        let v = pooled_features_gray(&img).unwrap();
        assert_eq!(v.len(), 64);
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
