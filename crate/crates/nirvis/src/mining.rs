//! Mining aligned NIR-VIS patch pairs from loosely aligned face images.
//!
//! Faces are landmark-aligned to a canonical 224x224 frame and normalized to
//! reference statistics. For every NIR/VIS image pair of the same subject a
//! 60x60 window slides over both frames; the VIS window is affine-registered
//! to the NIR window, the center 40x40 is cropped, and a correlation gate
//! keeps only consistent pairs. Survivors are pruned to a roughly uniform
//! spatial distribution and doubled by horizontal flipping.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lowrank::Spectrum;
use crate::raster::{warp_affine, Affine2, Raster};
use crate::register::{affine_register, RegisterConfig};

/// Side length of the canonical face frame.
pub const FACE_SIZE: usize = 224;

/// Canonical landmark positions in the 224x224 frame:
/// left eye, right eye, mouth center.
pub const CANONICAL_LANDMARKS: [(f64, f64); 3] = [(78.0, 90.0), (146.0, 90.0), (112.0, 168.0)];

/// A landmark-aligned 224x224 face raster.
#[derive(Debug, Clone)]
pub struct AlignedFace {
    pub image: Raster,
    pub subject: u32,
    pub spectrum: Spectrum,
    pub source_id: u32,
}

impl AlignedFace {
    pub fn new(image: Raster, subject: u32, spectrum: Spectrum, source_id: u32) -> Result<Self> {
        if image.width() != FACE_SIZE || image.height() != FACE_SIZE {
            return Err(Error::Contract(format!(
                "aligned face must be {FACE_SIZE}x{FACE_SIZE}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if !image.is_finite() {
            return Err(Error::InvalidInput("face has non-finite pixels".into()));
        }
        Ok(Self {
            image,
            subject,
            spectrum,
            source_id,
        })
    }
}

/// Sliding-window and gating parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MiningConfig {
    pub window: usize,
    pub stride: usize,
    pub crop: usize,
    pub sum_threshold: f64,
    pub min_threshold: f64,
    /// Target size of the pruned dataset (before flip augmentation).
    pub target_total: usize,
    /// Spatial pruning grid is `prune_grid` x `prune_grid` regions.
    pub prune_grid: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            window: 60,
            stride: 12,
            crop: 40,
            sum_threshold: 1.0,
            min_threshold: 0.4,
            target_total: 600_000,
            prune_grid: 6,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop >= self.window {
            return Err(Error::Contract("crop must be smaller than window".into()));
        }
        if self.stride == 0 || self.prune_grid == 0 || self.target_total == 0 {
            return Err(Error::Contract(
                "stride, prune_grid and target_total must be positive".into(),
            ));
        }
        for t in [self.sum_threshold, self.min_threshold] {
            if !(-2.0..=2.0).contains(&t) {
                return Err(Error::Contract(format!("threshold {t} outside [-2, 2]")));
            }
        }
        Ok(())
    }
}

/// A registered, gated NIR/VIS patch correspondence.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub nir_patch: Raster,
    pub vis_patch: Raster,
    pub subject: u32,
    /// Top-left corner of the originating sliding window in the face frame.
    pub grid_x: u16,
    pub grid_y: u16,
    pub flipped: bool,
}

/// Result of the correlation gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateResult {
    pub corr: f64,
    pub grad_corr: f64,
    pub accept: bool,
}

/// Warps `image` so that the given landmarks (left eye, right eye, mouth
/// center) land on [`CANONICAL_LANDMARKS`], resampling to 224x224.
pub fn landmark_align(
    image: &Raster,
    landmarks: &[(f64, f64); 3],
    subject: u32,
    spectrum: Spectrum,
    source_id: u32,
) -> Result<AlignedFace> {
    for &(x, y) in landmarks {
        if x < 0.0 || y < 0.0 || x >= image.width() as f64 || y >= image.height() as f64 {
            return Err(Error::InvalidInput(format!(
                "landmark ({x}, {y}) outside {}x{} image",
                image.width(),
                image.height()
            )));
        }
    }
    // out(p) = in(map(p)) with map sending canonical positions to the
    // source landmarks.
    let map = Affine2::from_three_points(&CANONICAL_LANDMARKS, landmarks)?;
    let warped = warp_affine(image, &map, FACE_SIZE, FACE_SIZE);
    AlignedFace::new(warped, subject, spectrum, source_id)
}

/// Rescales a face to the reference mean and standard deviation.
pub fn normalize_stats(face: &AlignedFace, ref_mean: f64, ref_std: f64) -> Result<AlignedFace> {
    let std = face.image.std();
    if std == 0.0 {
        return Err(Error::InvalidInput("constant image has no statistics".into()));
    }
    let mean = face.image.mean();
    let scale = ref_std / std;
    let data = face
        .image
        .data()
        .iter()
        .map(|v| (v - mean) * scale + ref_mean)
        .collect();
    let image = Raster::from_vec(FACE_SIZE, FACE_SIZE, data)?;
    AlignedFace::new(image, face.subject, face.spectrum, face.source_id)
}

/// The gate decision at given correlation values: the sum must reach
/// `sum_threshold` and neither component may fall below `min_threshold`.
/// Both boundaries are inclusive, so (0.5, 0.5) passes the default gate
/// while (0.45, 0.50) does not.
pub fn gate_accepts(corr: f64, grad_corr: f64, config: &MiningConfig) -> bool {
    corr + grad_corr >= config.sum_threshold && corr.min(grad_corr) >= config.min_threshold
}

/// Correlation gate of the patch miner: Pearson correlation of the patches
/// plus Pearson correlation of their gradient magnitudes, decided by
/// [`gate_accepts`].
pub fn similarity_gate(p: &Raster, q: &Raster, config: &MiningConfig) -> Result<GateResult> {
    let corr = crate::raster::pearson_correlation(p, q)?;
    let grad_corr = crate::raster::pearson_correlation(
        &crate::raster::gradient_magnitude(p),
        &crate::raster::gradient_magnitude(q),
    )?;
    Ok(GateResult {
        corr,
        grad_corr,
        accept: gate_accepts(corr, grad_corr, config),
    })
}

/// A [`PatchPair`] extended with VIS chroma targets resampled by the same
/// registered warp as the luminance patch, for training the chroma nets.
#[derive(Debug, Clone)]
pub struct ColorPatchPair {
    pub pair: PatchPair,
    pub cb_patch: Raster,
    pub cr_patch: Raster,
}

/// Mines registered, gated patch pairs from per-subject NIR and VIS faces.
///
/// Output ordering is deterministic: (subject, NIR source id, VIS source id,
/// window y, window x), with each surviving pair followed by its horizontal
/// flip.
pub fn mine_pairs(
    nir_faces: &[AlignedFace],
    vis_faces: &[AlignedFace],
    config: &MiningConfig,
) -> Result<Vec<PatchPair>> {
    Ok(mine_core(nir_faces, vis_faces, None, config)?
        .into_iter()
        .map(|c| c.pair)
        .collect())
}

/// Color-aware mining: `vis_cb`/`vis_cr` are 224x224 chroma planes parallel
/// to `vis_faces`. Registration and gating run on luminance only; the
/// resulting warp resamples the chroma planes so every accepted pair carries
/// chroma targets.
pub fn mine_pairs_color(
    nir_faces: &[AlignedFace],
    vis_faces: &[AlignedFace],
    vis_cb: &[Raster],
    vis_cr: &[Raster],
    config: &MiningConfig,
) -> Result<Vec<ColorPatchPair>> {
    if vis_cb.len() != vis_faces.len() || vis_cr.len() != vis_faces.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} VIS faces but {} Cb / {} Cr planes",
            vis_faces.len(),
            vis_cb.len(),
            vis_cr.len()
        )));
    }
    for plane in vis_cb.iter().chain(vis_cr) {
        if plane.width() != FACE_SIZE || plane.height() != FACE_SIZE {
            return Err(Error::Contract(format!(
                "chroma planes must be {FACE_SIZE}x{FACE_SIZE}, got {}x{}",
                plane.width(),
                plane.height()
            )));
        }
    }
    mine_core(nir_faces, vis_faces, Some((vis_cb, vis_cr)), config)
}

fn mine_core(
    nir_faces: &[AlignedFace],
    vis_faces: &[AlignedFace],
    chroma: Option<(&[Raster], &[Raster])>,
    config: &MiningConfig,
) -> Result<Vec<ColorPatchPair>> {
    config.validate()?;
    let reg_config = RegisterConfig::default();

    // Chroma planes are matched to VIS faces by position in the input slice.
    let mut by_subject: BTreeMap<u32, (Vec<&AlignedFace>, Vec<(usize, &AlignedFace)>)> =
        BTreeMap::new();
    for f in nir_faces {
        by_subject.entry(f.subject).or_default().0.push(f);
    }
    for (i, f) in vis_faces.iter().enumerate() {
        by_subject.entry(f.subject).or_default().1.push((i, f));
    }

    let margin = (config.window - config.crop) / 2;
    let neutral = Raster::from_fn(config.crop, config.crop, |_, _| 0.5);
    let mut accepted: Vec<ColorPatchPair> = Vec::new();

    for (subject, (mut nirs, mut viss)) in by_subject {
        nirs.sort_by_key(|f| f.source_id);
        viss.sort_by_key(|(_, f)| f.source_id);
        for nir in &nirs {
            for (vis_idx, vis) in &viss {
                let mut wy = 0;
                while wy + config.window <= FACE_SIZE {
                    let mut wx = 0;
                    while wx + config.window <= FACE_SIZE {
                        let nir_win = nir.image.crop(wx, wy, config.window, config.window)?;
                        let vis_win = vis.image.crop(wx, wy, config.window, config.window)?;
                        if !nir_win.is_constant() && !vis_win.is_constant() {
                            let reg = affine_register(&vis_win, &nir_win, &reg_config)?;
                            let nir_crop =
                                nir_win.crop(margin, margin, config.crop, config.crop)?;
                            let vis_crop =
                                reg.warped.crop(margin, margin, config.crop, config.crop)?;
                            let gate = similarity_gate(&nir_crop, &vis_crop, config)?;
                            if gate.accept {
                                let (cb_patch, cr_patch) = match chroma {
                                    Some((cbs, crs)) => {
                                        let resample = |plane: &Raster| -> Result<Raster> {
                                            let win = plane.crop(
                                                wx,
                                                wy,
                                                config.window,
                                                config.window,
                                            )?;
                                            warp_affine(
                                                &win,
                                                &reg.transform,
                                                config.window,
                                                config.window,
                                            )
                                            .crop(margin, margin, config.crop, config.crop)
                                        };
                                        (resample(&cbs[*vis_idx])?, resample(&crs[*vis_idx])?)
                                    }
                                    None => (neutral.clone(), neutral.clone()),
                                };
                                accepted.push(ColorPatchPair {
                                    pair: PatchPair {
                                        nir_patch: nir_crop,
                                        vis_patch: vis_crop,
                                        subject,
                                        grid_x: wx as u16,
                                        grid_y: wy as u16,
                                        flipped: false,
                                    },
                                    cb_patch,
                                    cr_patch,
                                });
                            }
                        }
                        wx += config.stride;
                    }
                    wy += config.stride;
                }
            }
        }
    }

    // Spatial pruning: cap each region of a prune_grid x prune_grid partition
    // of the face frame so patches end up roughly uniform over the face.
    let quota = config.target_total.div_ceil(config.prune_grid * config.prune_grid);
    let region_size = FACE_SIZE as f64 / config.prune_grid as f64;
    let mut counts = vec![0usize; config.prune_grid * config.prune_grid];
    let mut pruned = Vec::with_capacity(accepted.len().min(config.target_total));
    for pair in accepted {
        let cx = pair.pair.grid_x as f64 + config.window as f64 / 2.0;
        let cy = pair.pair.grid_y as f64 + config.window as f64 / 2.0;
        let rx = ((cx / region_size) as usize).min(config.prune_grid - 1);
        let ry = ((cy / region_size) as usize).min(config.prune_grid - 1);
        let region = ry * config.prune_grid + rx;
        if counts[region] < quota {
            counts[region] += 1;
            pruned.push(pair);
        }
    }

    // Flip augmentation: keep each survivor and its horizontal mirror.
    let mut out = Vec::with_capacity(pruned.len() * 2);
    for p in pruned {
        let flipped = ColorPatchPair {
            pair: PatchPair {
                nir_patch: p.pair.nir_patch.flip_horizontal(),
                vis_patch: p.pair.vis_patch.flip_horizontal(),
                flipped: true,
                ..p.pair.clone()
            },
            cb_patch: p.cb_patch.flip_horizontal(),
            cr_patch: p.cr_patch.flip_horizontal(),
        };
        out.push(p);
        out.push(flipped);
    }
    Ok(out)
}

/// One line of the image manifest shared by the miner and the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub subject: u32,
    pub spectrum: Spectrum,
    pub landmarks: [(f64, f64); 3],
}

/// Parses a manifest: one CSV record per image with columns
/// `path,subject,spectrum,x1,y1,x2,y2,x3,y3`. Blank lines and `#` comments
/// are skipped.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(Error::format(
                &name,
                format!("line {}: expected 9 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let subject: u32 = fields[1]
            .parse()
            .map_err(|_| Error::format(&name, format!("line {}: bad subject id", lineno + 1)))?;
        let spectrum = match fields[2].to_ascii_uppercase().as_str() {
            "NIR" => Spectrum::Nir,
            "VIS" => Spectrum::Vis,
            other => {
                return Err(Error::format(
                    &name,
                    format!("line {}: unknown spectrum '{other}'", lineno + 1),
                ))
            }
        };
        let mut coords = [0.0f64; 6];
        for (i, c) in coords.iter_mut().enumerate() {
            *c = fields[3 + i].parse().map_err(|_| {
                Error::format(&name, format!("line {}: bad landmark coordinate", lineno + 1))
            })?;
        }
        out.push(ManifestEntry {
            path: fields[0].to_string(),
            subject,
            spectrum,
            landmarks: [
                (coords[0], coords[1]),
                (coords[2], coords[3]),
                (coords[4], coords[5]),
            ],
        });
    }
    Ok(out)
}

const PATCH_MAGIC: &[u8; 4] = b"NVPD";
const PATCH_VERSION: u32 = 1;

/// Writes a patch dataset as a versioned binary file plus a text index
/// (`<path>.idx`) with one `index,subject,x,y,flip` line per record.
pub fn save_patch_dataset(path: &Path, pairs: &[PatchPair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let crop = pairs.first().map_or(40, |p| p.nir_patch.width());
    w.write_all(PATCH_MAGIC)?;
    w.write_all(&PATCH_VERSION.to_le_bytes())?;
    w.write_all(&(crop as u32).to_le_bytes())?;
    w.write_all(&(pairs.len() as u64).to_le_bytes())?;
    let mut index = String::new();
    for (i, p) in pairs.iter().enumerate() {
        w.write_all(&p.subject.to_le_bytes())?;
        w.write_all(&p.grid_x.to_le_bytes())?;
        w.write_all(&p.grid_y.to_le_bytes())?;
        w.write_all(&[p.flipped as u8])?;
        for v in p.nir_patch.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in p.vis_patch.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        index.push_str(&format!(
            "{},{},{},{},{}\n",
            i, p.subject, p.grid_x, p.grid_y, p.flipped as u8
        ));
    }
    w.flush()?;
    std::fs::write(path.with_extension("idx"), index)?;
    Ok(())
}

pub fn load_patch_dataset(path: &Path) -> Result<Vec<PatchPair>> {
    let name = path.display().to_string();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PATCH_MAGIC {
        return Err(Error::format(&name, "not a patch dataset file"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != PATCH_VERSION {
        return Err(Error::format(&name, format!("unknown version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let crop = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;

    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut head = [0u8; 9];
        r.read_exact(&mut head)
            .map_err(|_| Error::format(&name, format!("truncated record {i}")))?;
        let subject = u32::from_le_bytes(head[0..4].try_into().unwrap());
        let grid_x = u16::from_le_bytes(head[4..6].try_into().unwrap());
        let grid_y = u16::from_le_bytes(head[6..8].try_into().unwrap());
        let flipped = head[8] != 0;
        let mut read_patch = || -> Result<Raster> {
            let mut data = vec![0.0f64; crop * crop];
            let mut fbuf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut fbuf)
                    .map_err(|_| Error::format(&name, format!("truncated record {i}")))?;
                *v = f32::from_le_bytes(fbuf) as f64;
            }
            Raster::from_vec(crop, crop, data)
        };
        let nir_patch = read_patch()?;
        let vis_patch = read_patch()?;
        pairs.push(PatchPair {
            nir_patch,
            vis_patch,
            subject,
            grid_x,
            grid_y,
            flipped,
        });
    }
    Ok(pairs)
}

const COLOR_PATCH_MAGIC: &[u8; 4] = b"NVCD";

/// Writes a color patch dataset (NIR luminance, VIS Y/Cb/Cr per record).
pub fn save_color_patch_dataset(path: &Path, pairs: &[ColorPatchPair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let crop = pairs.first().map_or(40, |p| p.pair.nir_patch.width());
    w.write_all(COLOR_PATCH_MAGIC)?;
    w.write_all(&PATCH_VERSION.to_le_bytes())?;
    w.write_all(&(crop as u32).to_le_bytes())?;
    w.write_all(&(pairs.len() as u64).to_le_bytes())?;
    let mut index = String::new();
    for (i, p) in pairs.iter().enumerate() {
        w.write_all(&p.pair.subject.to_le_bytes())?;
        w.write_all(&p.pair.grid_x.to_le_bytes())?;
        w.write_all(&p.pair.grid_y.to_le_bytes())?;
        w.write_all(&[p.pair.flipped as u8])?;
        for plane in [&p.pair.nir_patch, &p.pair.vis_patch, &p.cb_patch, &p.cr_patch] {
            for v in plane.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        index.push_str(&format!(
            "{},{},{},{},{}\n",
            i, p.pair.subject, p.pair.grid_x, p.pair.grid_y, p.pair.flipped as u8
        ));
    }
    w.flush()?;
    std::fs::write(path.with_extension("idx"), index)?;
    Ok(())
}

pub fn load_color_patch_dataset(path: &Path) -> Result<Vec<ColorPatchPair>> {
    let name = path.display().to_string();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != COLOR_PATCH_MAGIC {
        return Err(Error::format(&name, "not a color patch dataset file"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != PATCH_VERSION {
        return Err(Error::format(&name, format!("unknown version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let crop = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;

    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut head = [0u8; 9];
        r.read_exact(&mut head)
            .map_err(|_| Error::format(&name, format!("truncated record {i}")))?;
        let subject = u32::from_le_bytes(head[0..4].try_into().unwrap());
        let grid_x = u16::from_le_bytes(head[4..6].try_into().unwrap());
        let grid_y = u16::from_le_bytes(head[6..8].try_into().unwrap());
        let flipped = head[8] != 0;
        let mut read_patch = || -> Result<Raster> {
            let mut data = vec![0.0f64; crop * crop];
            let mut fbuf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut fbuf)
                    .map_err(|_| Error::format(&name, format!("truncated record {i}")))?;
                *v = f32::from_le_bytes(fbuf) as f64;
            }
            Raster::from_vec(crop, crop, data)
        };
        let nir_patch = read_patch()?;
        let vis_patch = read_patch()?;
        let cb_patch = read_patch()?;
        let cr_patch = read_patch()?;
        pairs.push(ColorPatchPair {
            pair: PatchPair {
                nir_patch,
                vis_patch,
                subject,
                grid_x,
                grid_y,
                flipped,
            },
            cb_patch,
            cr_patch,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::gaussian_filter;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn textured_face(seed: u64) -> Raster {
        let mut r = StdRng::seed_from_u64(seed);
        let noise = Raster::from_fn(FACE_SIZE, FACE_SIZE, |_, _| r.gen_range(0.0..1.0));
        gaussian_filter(&noise, 2.0)
    }

    fn face(img: Raster, subject: u32, spectrum: Spectrum, id: u32) -> AlignedFace {
        AlignedFace::new(img, subject, spectrum, id).unwrap()
    }

    #[test]
    fn align_at_canonical_landmarks_is_identity() {
        let img = textured_face(1);
        let aligned =
            landmark_align(&img, &CANONICAL_LANDMARKS, 1, Spectrum::Nir, 0).unwrap();
        let mut max_diff: f64 = 0.0;
        for (a, b) in aligned.image.data().iter().zip(img.data()) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-9, "identity warp changed pixels by {max_diff}");
    }

    #[test]
    fn align_translation_equivariance() {
        // Shift the whole scene and the landmarks by the same amount; the
        // aligned output should match the unshifted case up to interpolation.
        let mut r = StdRng::seed_from_u64(2);
        let big = gaussian_filter(
            &Raster::from_fn(280, 280, |_, _| r.gen_range(0.0..1.0)),
            2.0,
        );
        let base = big.crop(20, 20, FACE_SIZE, FACE_SIZE).unwrap();
        let lm_base = CANONICAL_LANDMARKS;
        let aligned_base = landmark_align(&base, &lm_base, 1, Spectrum::Nir, 0).unwrap();

        let shifted = big.crop(10, 27, FACE_SIZE, FACE_SIZE).unwrap();
        let lm_shifted = [
            (lm_base[0].0 + 10.0, lm_base[0].1 - 7.0),
            (lm_base[1].0 + 10.0, lm_base[1].1 - 7.0),
            (lm_base[2].0 + 10.0, lm_base[2].1 - 7.0),
        ];
        let aligned_shift = landmark_align(&shifted, &lm_shifted, 1, Spectrum::Nir, 1).unwrap();

        let mean_abs: f64 = aligned_base
            .image
            .data()
            .iter()
            .zip(aligned_shift.image.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (FACE_SIZE * FACE_SIZE) as f64;
        // pixels live in [0,1]; one 8-bit intensity level is ~1/255
        assert!(mean_abs <= 1.0 / 255.0, "mean abs diff {mean_abs}");
    }

    #[test]
    fn align_rejects_collinear_landmarks() {
        let img = textured_face(3);
        let lm = [(10.0, 10.0), (20.0, 20.0), (30.0, 30.0)];
        assert!(landmark_align(&img, &lm, 1, Spectrum::Nir, 0).is_err());
    }

    #[test]
    fn normalize_hits_reference_stats() {
        let f = face(textured_face(4), 1, Spectrum::Vis, 0);
        let n = normalize_stats(&f, 0.45, 0.21).unwrap();
        assert!((n.image.mean() - 0.45).abs() < 1e-6 * 0.45);
        assert!((n.image.std() - 0.21).abs() < 1e-6 * 0.21);
    }

    #[test]
    fn normalize_undoes_affine_intensity_change() {
        let reference = face(textured_face(5), 1, Spectrum::Vis, 0);
        let (m, s) = (reference.image.mean(), reference.image.std());
        let warped_data: Vec<f64> = reference.image.data().iter().map(|v| 2.0 * v + 5.0).collect();
        let warped = face(
            Raster::from_vec(FACE_SIZE, FACE_SIZE, warped_data).unwrap(),
            1,
            Spectrum::Vis,
            1,
        );
        let n = normalize_stats(&warped, m, s).unwrap();
        let max_diff = n
            .image
            .data()
            .iter()
            .zip(reference.image.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9);
    }

    #[test]
    fn normalize_rejects_constant_image() {
        let f = AlignedFace {
            image: Raster::new(FACE_SIZE, FACE_SIZE),
            subject: 1,
            spectrum: Spectrum::Nir,
            source_id: 0,
        };
        assert!(normalize_stats(&f, 0.5, 0.2).is_err());
    }

    #[test]
    fn gate_identical_patches_accepts() {
        let p = textured_face(6).crop(0, 0, 40, 40).unwrap();
        let g = similarity_gate(&p, &p.clone(), &MiningConfig::default()).unwrap();
        assert!((g.corr - 1.0).abs() < 1e-12);
        assert!((g.grad_corr - 1.0).abs() < 1e-12);
        assert!(g.accept);
    }

    #[test]
    fn gate_negated_patch_rejects() {
        let p = textured_face(7).crop(0, 0, 40, 40).unwrap();
        let neg = Raster::from_vec(40, 40, p.data().iter().map(|v| -v).collect()).unwrap();
        let g = similarity_gate(&p, &neg, &MiningConfig::default()).unwrap();
        assert!((g.corr + 1.0).abs() < 1e-12);
        assert!(!g.accept);
    }

    fn mining_test_config() -> MiningConfig {
        MiningConfig {
            target_total: 10_000,
            ..MiningConfig::default()
        }
    }

    #[test]
    fn self_pair_accepts_everywhere_and_flip_doubles() {
        let img = textured_face(8);
        let nir = vec![face(img.clone(), 1, Spectrum::Nir, 0)];
        let vis = vec![face(img, 1, Spectrum::Vis, 0)];
        let config = mining_test_config();
        let pairs = mine_pairs(&nir, &vis, &config).unwrap();
        assert!(!pairs.is_empty());
        // every window position accepted before pruning; windows per axis:
        let per_axis = (FACE_SIZE - config.window) / config.stride + 1;
        let expected_prepruning = per_axis * per_axis;
        assert_eq!(pairs.len() % 2, 0);
        let unflipped = pairs.iter().filter(|p| !p.flipped).count();
        assert!(unflipped <= expected_prepruning);
        assert_eq!(pairs.len(), unflipped * 2);
        for p in &pairs {
            assert_eq!(p.nir_patch.width(), config.crop);
            assert_eq!(p.vis_patch.height(), config.crop);
            assert_eq!(p.grid_x as usize % config.stride, 0);
            assert_eq!(p.grid_y as usize % config.stride, 0);
        }
    }

    #[test]
    fn cross_wired_subjects_accept_far_less() {
        let a = textured_face(9);
        let b = textured_face(10);
        let config = mining_test_config();
        let self_pairs = mine_pairs(
            &[face(a.clone(), 1, Spectrum::Nir, 0)],
            &[face(a.clone(), 1, Spectrum::Vis, 0)],
            &config,
        )
        .unwrap();
        // cross-wire: NIR of one texture against VIS of an unrelated one
        let cross_pairs = mine_pairs(
            &[face(a, 1, Spectrum::Nir, 0)],
            &[face(b, 1, Spectrum::Vis, 1)],
            &config,
        )
        .unwrap();
        assert!(
            (cross_pairs.len() as f64) < 0.1 * self_pairs.len() as f64,
            "cross {} vs self {}",
            cross_pairs.len(),
            self_pairs.len()
        );
    }

    #[test]
    fn empty_input_empty_output() {
        let pairs = mine_pairs(&[], &[], &mining_test_config()).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn pruning_respects_region_quota() {
        let img = textured_face(11);
        let config = MiningConfig {
            target_total: 36, // quota of 1 per region
            ..MiningConfig::default()
        };
        let pairs = mine_pairs(
            &[face(img.clone(), 1, Spectrum::Nir, 0)],
            &[face(img, 1, Spectrum::Vis, 0)],
            &config,
        )
        .unwrap();
        let unflipped = pairs.iter().filter(|p| !p.flipped).count();
        assert!(unflipped <= 36);
    }

    #[test]
    fn patch_dataset_roundtrip() {
        let img = textured_face(12);
        let config = MiningConfig {
            target_total: 72,
            ..MiningConfig::default()
        };
        let pairs = mine_pairs(
            &[face(img.clone(), 3, Spectrum::Nir, 0)],
            &[face(img, 3, Spectrum::Vis, 0)],
            &config,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patches.nvpd");
        save_patch_dataset(&path, &pairs).unwrap();
        let loaded = load_patch_dataset(&path).unwrap();
        assert_eq!(loaded.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&loaded) {
            assert_eq!(a.subject, b.subject);
            assert_eq!((a.grid_x, a.grid_y, a.flipped), (b.grid_x, b.grid_y, b.flipped));
            // stored as f32
            for (x, y) in a.nir_patch.data().iter().zip(b.nir_patch.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(path.with_extension("idx").exists());
    }

    #[test]
    fn color_mining_matches_luma_and_roundtrips() {
        let img = textured_face(14);
        let cb = textured_face(15);
        let cr = textured_face(16);
        let config = MiningConfig {
            target_total: 200,
            ..MiningConfig::default()
        };
        let nir = vec![face(img.clone(), 2, Spectrum::Nir, 0)];
        let vis = vec![face(img, 2, Spectrum::Vis, 0)];
        let color = mine_pairs_color(&nir, &vis, &[cb.clone()], &[cr.clone()], &config).unwrap();
        let plain = mine_pairs(&nir, &vis, &config).unwrap();
        assert_eq!(color.len(), plain.len());
        for (c, p) in color.iter().zip(&plain) {
            assert_eq!(c.pair.grid_x, p.grid_x);
            assert_eq!(c.pair.nir_patch.data(), p.nir_patch.data());
            assert_eq!(c.cb_patch.width(), config.crop);
            // identical luma faces register to ~identity, so the chroma
            // patch is essentially the window crop of the chroma plane
            if !c.pair.flipped {
                let (wx, wy) = (c.pair.grid_x as usize, c.pair.grid_y as usize);
                let margin = (config.window - config.crop) / 2;
                let expect = cb
                    .crop(wx + margin, wy + margin, config.crop, config.crop)
                    .unwrap();
                let mean_abs: f64 = c
                    .cb_patch
                    .data()
                    .iter()
                    .zip(expect.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / (config.crop * config.crop) as f64;
                assert!(mean_abs < 0.02, "chroma drifted: {mean_abs}");
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patches.nvcd");
        save_color_patch_dataset(&path, &color).unwrap();
        let loaded = load_color_patch_dataset(&path).unwrap();
        assert_eq!(loaded.len(), color.len());
        for (a, b) in color.iter().zip(&loaded) {
            for (x, y) in a.cr_patch.data().iter().zip(b.cr_patch.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn color_mining_rejects_mismatched_planes() {
        let img = textured_face(17);
        let nir = vec![face(img.clone(), 1, Spectrum::Nir, 0)];
        let vis = vec![face(img, 1, Spectrum::Vis, 0)];
        assert!(mine_pairs_color(&nir, &vis, &[], &[], &MiningConfig::default()).is_err());
    }

    #[test]
    fn manifest_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "# test manifest\nimg/a.png, 5, NIR, 70,90, 140,92, 110,170\nimg/b.png,5,VIS,71,91,141,93,111,171\n",
        )
        .unwrap();
        let entries = parse_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].subject, 5);
        assert_eq!(entries[0].spectrum, Spectrum::Nir);
        assert_eq!(entries[1].landmarks[2], (111.0, 171.0));

        std::fs::write(&path, "img/a.png,5,XRAY,1,2,3,4,5,6\n").unwrap();
        assert!(parse_manifest(&path).is_err());
    }
}
