//! Experiment orchestration: mine, train, hallucinate, extract features,
//! reduce, embed, match and report from one configuration.
//!
//! An experiment evaluates the 2x2 ablation over (hallucination on/off,
//! low-rank embedding on/off) on a subject-disjoint fold split. Inputs come
//! either from a feature file produced by an external network or from an
//! image manifest, in which case the built-in pooled provider stands in for
//! a deep feature extractor. Expensive intermediates (trained networks,
//! hallucinated channel planes) are cached under the output directory keyed
//! by a content hash of everything that influences them, so an alpha sweep
//! re-blends and re-matches without retraining.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::blend::{blend, GaussianPasses};
use crate::color::{clamp_unit, rgb_to_ycbcr, ycbcr_to_rgb};
use crate::container;
use crate::error::{Error, Result};
use crate::features::{
    assign_folds, load_features, pooled_features_rgb, split_folds, FeatureRecord,
    FeatureSet, InputKind, POOL_PROVIDER,
};
use crate::lowrank::{
    learn_lowrank_transform, CcpConfig, LabeledFeatureMatrix, LowRankTransform, Spectrum,
};
use crate::matcher::{identify, GallerySet, MatchReport, ProbeSet};
use crate::mining::{
    landmark_align, mine_pairs_color, parse_manifest, AlignedFace, ManifestEntry, MiningConfig,
};
use crate::net::{
    load_weights, save_weights, train, Channel, HallucinationNet, PreluMode, TrainConfig,
};
use crate::pca::{apply_merged, fit_pca, l2_normalize_columns, merge_pca_lowrank};
use crate::raster::Raster;

/// Everything a full experiment needs, loadable from a TOML file with flat
/// dotted keys; CLI flags override individual fields.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub weights_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub mining: MiningConfig,
    pub train: TrainConfig,
    pub shared_prelu: bool,
    pub pca_dim: usize,
    pub l2_normalize: bool,
    pub ccp: CcpConfig,
    pub alpha: f64,
    pub sigma: f64,
    pub single_pass_blend: bool,
    pub folds: usize,
    pub test_fold: usize,
    pub use_hallucination: bool,
    pub use_lowrank: bool,
    pub max_rank: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            features: None,
            weights_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            mining: MiningConfig::default(),
            train: TrainConfig::default(),
            shared_prelu: false,
            pca_dim: 64,
            l2_normalize: true,
            ccp: CcpConfig::default(),
            alpha: 0.6,
            sigma: 1.0,
            single_pass_blend: false,
            folds: 6,
            test_fold: 0,
            use_hallucination: false,
            use_lowrank: true,
            max_rank: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn passes(&self) -> GaussianPasses {
        if self.single_pass_blend {
            GaussianPasses::Single
        } else {
            GaussianPasses::Double
        }
    }

    pub fn prelu_mode(&self) -> PreluMode {
        if self.shared_prelu {
            PreluMode::Shared
        } else {
            PreluMode::PerChannel
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses the flat dotted-key configuration format. Unknown keys are
    /// rejected so typos fail loudly.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
        let mut keys = BTreeMap::new();
        flatten("", &value, &mut keys);
        let mut config = Self::default();

        let mut take = |key: &str| keys.remove(key);
        macro_rules! set {
            ($key:expr, $field:expr, $conv:ident) => {
                if let Some(v) = take($key) {
                    $field = $conv($key, &v)?;
                }
            };
        }
        set!("seed", config.seed, as_u64);
        if let Some(v) = take("paths.manifest") {
            config.manifest = Some(PathBuf::from(as_str("paths.manifest", &v)?));
        }
        if let Some(v) = take("paths.features") {
            config.features = Some(PathBuf::from(as_str("paths.features", &v)?));
        }
        if let Some(v) = take("paths.weights_dir") {
            config.weights_dir = Some(PathBuf::from(as_str("paths.weights_dir", &v)?));
        }
        if let Some(v) = take("paths.out_dir") {
            config.out_dir = PathBuf::from(as_str("paths.out_dir", &v)?);
        }
        set!("mining.window", config.mining.window, as_usize);
        set!("mining.stride", config.mining.stride, as_usize);
        set!("mining.crop", config.mining.crop, as_usize);
        set!("mining.sum_threshold", config.mining.sum_threshold, as_f64);
        set!("mining.min_threshold", config.mining.min_threshold, as_f64);
        set!("mining.target_total", config.mining.target_total, as_usize);
        set!("mining.prune_grid", config.mining.prune_grid, as_usize);
        set!("hallucinator.epochs", config.train.epochs, as_usize);
        set!("hallucinator.batch", config.train.batch_size, as_usize);
        set!("hallucinator.lr", config.train.hyper.lr, as_f64);
        set!("hallucinator.shared_prelu", config.shared_prelu, as_bool);
        if let Some(v) = take("hallucinator.max_iterations") {
            config.train.max_iterations = Some(as_usize("hallucinator.max_iterations", &v)?);
        }
        set!("embedding.pca_dim", config.pca_dim, as_usize);
        set!("embedding.l2_normalize", config.l2_normalize, as_bool);
        set!("embedding.max_outer_iters", config.ccp.max_outer_iters, as_usize);
        set!("embedding.outer_tolerance", config.ccp.outer_tolerance, as_f64);
        set!("embedding.inner_max_iters", config.ccp.inner_max_iters, as_usize);
        set!("embedding.inner_step", config.ccp.inner_step, as_f64);
        set!("embedding.inner_tolerance", config.ccp.inner_tolerance, as_f64);
        set!("blend.alpha", config.alpha, as_f64);
        set!("blend.sigma", config.sigma, as_f64);
        set!("blend.single_pass", config.single_pass_blend, as_bool);
        set!("protocol.folds", config.folds, as_usize);
        set!("protocol.test_fold", config.test_fold, as_usize);
        set!("ablation.hallucination", config.use_hallucination, as_bool);
        set!("ablation.lowrank", config.use_lowrank, as_bool);
        set!("report.max_rank", config.max_rank, as_usize);

        if let Some((key, _)) = keys.into_iter().next() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.manifest.is_none() && self.features.is_none() {
            return Err(Error::Config(
                "either paths.manifest or paths.features is required".into(),
            ));
        }
        if let Some(p) = &self.manifest {
            if !p.exists() {
                return Err(Error::Config(format!("manifest {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.features {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "feature file {} does not exist",
                    p.display()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("blend.alpha {} outside [0, 1]", self.alpha)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("blend.sigma must be positive".into()));
        }
        if self.folds == 0 || self.test_fold >= self.folds {
            return Err(Error::Config(format!(
                "test_fold {} out of range for {} folds",
                self.test_fold, self.folds
            )));
        }
        if self.pca_dim == 0 || self.max_rank == 0 {
            return Err(Error::Config("pca_dim and max_rank must be positive".into()));
        }
        self.mining.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .filter(|&i| i >= 0)
        .map(|i| i as u64)
        .ok_or_else(|| Error::Config(format!("`{key}` must be a nonnegative integer")))
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    Ok(as_u64(key, v)? as usize)
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| Error::Config(format!("`{key}` must be a number")))
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("`{key}` must be a boolean")))
}

fn as_str(key: &str, v: &toml::Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("`{key}` must be a string")))
}

/// One ablation cell's outcome.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub name: String,
    pub hallucination: bool,
    pub lowrank: bool,
    pub report: MatchReport,
}

/// All cells plus the written summary.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellReport>,
    pub summary_csv: String,
}

fn hash_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn stage<T, E: std::fmt::Display>(
    name: &str,
    r: std::result::Result<T, E>,
) -> Result<T> {
    r.map_err(|e| Error::stage(name, e.to_string()))
}

/// Loads an image file into [0, 1] RGB rasters.
pub fn load_rgb(path: &Path) -> Result<(Raster, Raster, Raster)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut r = Raster::new(w, h);
    let mut g = Raster::new(w, h);
    let mut b = Raster::new(w, h);
    for (x, y, p) in img.enumerate_pixels() {
        r.set(x as usize, y as usize, p[0] as f64 / 255.0);
        g.set(x as usize, y as usize, p[1] as f64 / 255.0);
        b.set(x as usize, y as usize, p[2] as f64 / 255.0);
    }
    Ok((r, g, b))
}

/// Saves [0, 1] RGB rasters as an 8-bit PNG.
pub fn save_rgb(path: &Path, r: &Raster, g: &Raster, b: &Raster) -> Result<()> {
    let (w, h) = (r.width(), r.height());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: &Raster| (c.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(r), px(g), px(b)]));
        }
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// The three per-channel networks as one unit.
pub struct ChannelNets {
    pub y: HallucinationNet,
    pub cb: HallucinationNet,
    pub cr: HallucinationNet,
}

/// Runs all three networks on a NIR luminance raster and blends the Y
/// channel with the input, returning clamped RGB planes.
pub fn hallucinate_rgb(
    nets: &ChannelNets,
    nir: &Raster,
    alpha: f64,
    sigma: f64,
    passes: GaussianPasses,
) -> Result<(Raster, Raster, Raster)> {
    let y_hat = nets.y.forward(nir)?;
    let y = blend(&y_hat, nir, alpha, sigma, passes)?;
    let cb = nets.cb.forward(nir)?;
    let cr = nets.cr.forward(nir)?;
    let (mut r, mut g, mut b) = ycbcr_to_rgb(&y, &cb, &cr)?;
    clamp_unit(&mut r);
    clamp_unit(&mut g);
    clamp_unit(&mut b);
    Ok((r, g, b))
}

/// An aligned entry of the manifest with all channel planes.
struct AlignedEntry {
    subject: u32,
    image_id: u32,
    spectrum: Spectrum,
    /// Luminance (NIR intensity for NIR entries).
    luma: AlignedFace,
    /// VIS only: aligned RGB planes.
    rgb: Option<(Raster, Raster, Raster)>,
    /// VIS only: aligned chroma planes.
    chroma: Option<(Raster, Raster)>,
}

fn align_manifest(manifest_path: &Path, entries: &[ManifestEntry]) -> Result<Vec<AlignedEntry>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let image_id = i as u32;
        let path = base.join(&e.path);
        let (r, g, b) = load_rgb(&path)?;
        let (y, cb, cr) = rgb_to_ycbcr(&r, &g, &b)?;
        let luma = landmark_align(&y, &e.landmarks, e.subject, e.spectrum, image_id)?;
        let (rgb, chroma) = if e.spectrum == Spectrum::Vis {
            let warp_plane = |p: &Raster| -> Result<Raster> {
                Ok(landmark_align(p, &e.landmarks, e.subject, e.spectrum, image_id)?.image)
            };
            (
                Some((warp_plane(&r)?, warp_plane(&g)?, warp_plane(&b)?)),
                Some((warp_plane(&cb)?, warp_plane(&cr)?)),
            )
        } else {
            (None, None)
        };
        out.push(AlignedEntry {
            subject: e.subject,
            image_id,
            spectrum: e.spectrum,
            luma,
            rgb,
            chroma,
        });
    }
    Ok(out)
}

/// Obtains trained channel networks: from `weights_dir` when provided, from
/// the cache when the training inputs are unchanged, otherwise by mining the
/// training-fold faces and training all three networks.
fn ensure_nets(
    config: &ExperimentConfig,
    aligned: &[AlignedEntry],
    train_subjects: &[u32],
    net_key: &str,
) -> Result<ChannelNets> {
    if let Some(dir) = &config.weights_dir {
        return Ok(ChannelNets {
            y: load_weights(&dir.join("y.nvnw"))?,
            cb: load_weights(&dir.join("cb.nvnw"))?,
            cr: load_weights(&dir.join("cr.nvnw"))?,
        });
    }
    let cache = config.out_dir.join("cache");
    std::fs::create_dir_all(&cache)?;
    let paths = [
        cache.join(format!("net-{net_key}-y.nvnw")),
        cache.join(format!("net-{net_key}-cb.nvnw")),
        cache.join(format!("net-{net_key}-cr.nvnw")),
    ];
    if paths.iter().all(|p| p.exists()) {
        return Ok(ChannelNets {
            y: load_weights(&paths[0])?,
            cb: load_weights(&paths[1])?,
            cr: load_weights(&paths[2])?,
        });
    }

    let nir: Vec<AlignedFace> = aligned
        .iter()
        .filter(|e| e.spectrum == Spectrum::Nir && train_subjects.contains(&e.subject))
        .map(|e| e.luma.clone())
        .collect();
    let mut vis = Vec::new();
    let mut cbs = Vec::new();
    let mut crs = Vec::new();
    for e in aligned {
        if e.spectrum == Spectrum::Vis && train_subjects.contains(&e.subject) {
            let (cb, cr) = e
                .chroma
                .clone()
                .ok_or_else(|| Error::stage("mine", "VIS entry without chroma planes"))?;
            vis.push(e.luma.clone());
            cbs.push(cb);
            crs.push(cr);
        }
    }
    let pairs = stage("mine", mine_pairs_color(&nir, &vis, &cbs, &crs, &config.mining))?;
    if pairs.is_empty() {
        return Err(Error::stage("mine", "no patch pairs survived the gate"));
    }

    let mut nets = ChannelNets {
        y: HallucinationNet::new(Channel::Y, config.prelu_mode(), config.seed),
        cb: HallucinationNet::new(Channel::Cb, config.prelu_mode(), config.seed + 1),
        cr: HallucinationNet::new(Channel::Cr, config.prelu_mode(), config.seed + 2),
    };
    let train_channel = |net: &mut HallucinationNet, target: fn(&crate::mining::ColorPatchPair) -> &Raster| -> Result<()> {
        let data: Vec<(Raster, Raster)> = pairs
            .iter()
            .map(|p| (p.pair.nir_patch.clone(), target(p).clone()))
            .collect();
        stage("train-hallucinator", train(net, &data, &config.train))?;
        Ok(())
    };
    train_channel(&mut nets.y, |p| &p.pair.vis_patch)?;
    train_channel(&mut nets.cb, |p| &p.cb_patch)?;
    train_channel(&mut nets.cr, |p| &p.cr_patch)?;

    save_weights(&paths[0], &nets.y)?;
    save_weights(&paths[1], &nets.cb)?;
    save_weights(&paths[2], &nets.cr)?;
    Ok(nets)
}

/// Builds the full feature set (VIS gallery, raw-NIR probes and, when
/// hallucination is enabled, hallucinated probes) from an image manifest.
fn build_from_manifest(config: &ExperimentConfig) -> Result<FeatureSet> {
    let manifest_path = config.manifest.as_ref().expect("manifest mode");
    let entries = stage("ingest", parse_manifest(manifest_path))?;
    let aligned = stage("ingest", align_manifest(manifest_path, &entries))?;

    let mut set = FeatureSet::new(POOL_PROVIDER, 192);
    for e in &aligned {
        match e.spectrum {
            Spectrum::Vis => {
                let (r, g, b) = e.rgb.as_ref().expect("aligned VIS has rgb");
                set.push(FeatureRecord {
                    subject: e.subject,
                    image: e.image_id,
                    spectrum: Spectrum::Vis,
                    kind: InputKind::Vis,
                    replicated: false,
                    vector: pooled_features_rgb(r, g, b)?,
                })?;
            }
            Spectrum::Nir => {
                // single-channel input replicated across the provider's
                // three expected planes
                let n = &e.luma.image;
                set.push(FeatureRecord {
                    subject: e.subject,
                    image: e.image_id,
                    spectrum: Spectrum::Nir,
                    kind: InputKind::RawNir,
                    replicated: true,
                    vector: pooled_features_rgb(n, n, n)?,
                })?;
            }
        }
    }

    if config.use_hallucination {
        let subjects: Vec<u32> = set.subjects();
        let assignment = stage("folds", assign_folds(&subjects, config.folds))?;
        let train_subjects: Vec<u32> = assignment
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != config.test_fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();

        let manifest_bytes = std::fs::read(manifest_path)?;
        let mining_desc = toml::to_string(&config.mining).unwrap_or_default();
        let train_desc = toml::to_string(&config.train).unwrap_or_default();
        let net_key = hash_hex(&[
            &manifest_bytes,
            mining_desc.as_bytes(),
            train_desc.as_bytes(),
            &config.seed.to_le_bytes(),
            &[config.shared_prelu as u8],
            &config.folds.to_le_bytes(),
            &config.test_fold.to_le_bytes(),
        ]);
        let nets = ensure_nets(config, &aligned, &train_subjects, &net_key)?;
        if !(nets.y.is_trained() && nets.cb.is_trained() && nets.cr.is_trained()) {
            eprintln!("warning: hallucinating with untrained networks");
        }

        let cache = config.out_dir.join("cache");
        std::fs::create_dir_all(&cache)?;
        for e in aligned.iter().filter(|e| e.spectrum == Spectrum::Nir) {
            // The expensive network forward is cached per image, before
            // blending, so alpha sweeps only repeat the cheap blend.
            let plane_path = cache.join(format!("hal-{net_key}-{}.nvmx", e.image_id));
            let n = &e.luma.image;
            let npix = n.width() * n.height();
            let (y_hat, cb, cr) = if plane_path.exists() {
                let m = container::load_matrix(&plane_path)?;
                if m.nrows() != 3 || m.ncols() != npix {
                    return Err(Error::format(&plane_path, "cached plane shape mismatch"));
                }
                let plane = |row: usize| -> Result<Raster> {
                    Raster::from_vec(
                        n.width(),
                        n.height(),
                        m.row(row).iter().copied().collect(),
                    )
                };
                (plane(0)?, plane(1)?, plane(2)?)
            } else {
                let y_hat = stage("hallucinate", nets.y.forward(n))?;
                let cb = stage("hallucinate", nets.cb.forward(n))?;
                let cr = stage("hallucinate", nets.cr.forward(n))?;
                let mut m = nalgebra::DMatrix::zeros(3, npix);
                for (row, plane) in [&y_hat, &cb, &cr].into_iter().enumerate() {
                    for (j, v) in plane.data().iter().enumerate() {
                        m[(row, j)] = *v;
                    }
                }
                container::save_matrix(&plane_path, &m)?;
                (y_hat, cb, cr)
            };
            let y = stage(
                "hallucinate",
                blend(&y_hat, n, config.alpha, config.sigma, config.passes()),
            )?;
            let (mut r, mut g, mut b) = ycbcr_to_rgb(&y, &cb, &cr)?;
            clamp_unit(&mut r);
            clamp_unit(&mut g);
            clamp_unit(&mut b);
            set.push(FeatureRecord {
                subject: e.subject,
                image: e.image_id,
                spectrum: Spectrum::Nir,
                kind: InputKind::Hallucinated,
                replicated: false,
                vector: pooled_features_rgb(&r, &g, &b)?,
            })?;
        }
    }
    Ok(set)
}

fn ingest(config: &ExperimentConfig) -> Result<FeatureSet> {
    match (&config.features, &config.manifest) {
        (Some(path), _) => stage("ingest", load_features(path)),
        (None, Some(_)) => build_from_manifest(config),
        (None, None) => Err(Error::Config("no input configured".into())),
    }
}

fn subset_matrix(set: &FeatureSet, kinds: &[InputKind]) -> (nalgebra::DMatrix<f64>, Vec<u32>, Vec<Spectrum>) {
    let records: Vec<&FeatureRecord> = set
        .records
        .iter()
        .filter(|r| kinds.contains(&r.kind))
        .collect();
    let mut m = nalgebra::DMatrix::zeros(set.dim, records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut spectra = Vec::with_capacity(records.len());
    for (j, r) in records.iter().enumerate() {
        for (i, &v) in r.vector.iter().enumerate() {
            m[(i, j)] = v;
        }
        labels.push(r.subject);
        spectra.push(r.spectrum);
    }
    (m, labels, spectra)
}

/// Runs the configured ablation cells, writes per-cell and summary CSVs to
/// the output directory, and returns the reports.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let set = ingest(config)?;
    if set.records.is_empty() {
        return Err(Error::stage("ingest", "no feature records"));
    }

    let subjects = set.subjects();
    let assignment = stage("folds", assign_folds(&subjects, config.folds))?;
    let (train_set, test_set) = stage(
        "folds",
        split_folds(&set, &assignment, config.test_fold),
    )?;

    let hall_options: &[bool] = if config.use_hallucination {
        &[false, true]
    } else {
        &[false]
    };
    let lowrank_options: &[bool] = if config.use_lowrank {
        &[false, true]
    } else {
        &[false]
    };

    let mut cells = Vec::new();
    for &h in hall_options {
        for &l in lowrank_options {
            let name = match (h, l) {
                (false, false) => "baseline",
                (false, true) => "lowrank",
                (true, false) => "hallucination",
                (true, true) => "hallucination_lowrank",
            };
            let probe_kind = if h { InputKind::Hallucinated } else { InputKind::RawNir };
            let (gal_m, gal_labels, _) = subset_matrix(&test_set, &[InputKind::Vis]);
            let (probe_m, probe_labels, _) = subset_matrix(&test_set, &[probe_kind]);
            if gal_m.ncols() == 0 || probe_m.ncols() == 0 {
                return Err(Error::stage(
                    "match",
                    format!(
                        "cell {name}: missing {} records in the test fold",
                        if probe_m.ncols() == 0 { "probe" } else { "gallery" }
                    ),
                ));
            }

            let (mut gal_m, mut probe_m) = (gal_m, probe_m);
            if l {
                let (train_m, train_labels, train_spectra) =
                    subset_matrix(&train_set, &[InputKind::Vis, probe_kind]);
                let train_classes = {
                    let mut c = train_labels.clone();
                    c.sort_unstable();
                    c.dedup();
                    c.len()
                };
                if train_classes < 2 {
                    // Degenerate training (one class) learns the identity,
                    // so the whole embedding stage reduces to a no-op.
                    let _ = LowRankTransform::identity(1);
                } else {
                    let mut train_m = train_m;
                    if config.l2_normalize {
                        l2_normalize_columns(&mut train_m);
                        l2_normalize_columns(&mut gal_m);
                        l2_normalize_columns(&mut probe_m);
                    }
                    let k = config
                        .pca_dim
                        .min(train_m.nrows())
                        .min(train_m.ncols());
                    let pca = stage("learn-embedding", fit_pca(&train_m, k))?;
                    let projected = stage("learn-embedding", crate::pca::apply_pca(&pca, &train_m))?;
                    let labeled = stage(
                        "learn-embedding",
                        LabeledFeatureMatrix::new(projected, train_labels, train_spectra),
                    )?;
                    let outcome = stage(
                        "learn-embedding",
                        learn_lowrank_transform(&labeled, &config.ccp),
                    )?;
                    let (merged, mean) = stage(
                        "learn-embedding",
                        merge_pca_lowrank(&pca, &outcome.transform),
                    )?;
                    gal_m = stage("learn-embedding", apply_merged(&merged, &mean, &gal_m))?;
                    probe_m = stage("learn-embedding", apply_merged(&merged, &mean, &probe_m))?;
                }
            }

            let gallery = stage(
                "match",
                GallerySet::new(gal_m, gal_labels, Spectrum::Vis),
            )?;
            let probes = stage(
                "match",
                ProbeSet::new(probe_m, probe_labels, Spectrum::Nir),
            )?;
            let max_rank = config.max_rank.min(gallery.len());
            let report = stage("match", identify(&gallery, &probes, max_rank))?;

            let cell_dir = config.out_dir.join(name);
            std::fs::create_dir_all(&cell_dir)?;
            std::fs::write(cell_dir.join("ranks.csv"), report.ranks_csv())?;
            std::fs::write(cell_dir.join("decisions.csv"), report.decisions_csv())?;

            cells.push(CellReport {
                name: name.to_string(),
                hallucination: h,
                lowrank: l,
                report,
            });
        }
    }

    let mut summary = String::from("cell,hallucination,lowrank,rank1\n");
    for c in &cells {
        summary.push_str(&format!(
            "{},{},{},{}\n",
            c.name,
            u8::from(c.hallucination),
            u8::from(c.lowrank),
            c.report.rank1()
        ));
    }
    std::fs::write(config.out_dir.join("summary.csv"), &summary)?;
    Ok(ExperimentOutcome {
        cells,
        summary_csv: summary,
    })
}

/// Evaluates the hallucination cell at each alpha, reusing cached networks
/// and forward passes; returns `alpha,rank1` CSV rows.
pub fn alpha_sweep(config: &ExperimentConfig, alphas: &[f64]) -> Result<String> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one alpha".into()));
    }
    if !config.use_hallucination {
        return Err(Error::Config(
            "alpha sweep requires ablation.hallucination = true".into(),
        ));
    }
    let mut out = String::from("alpha,rank1\n");
    for &alpha in alphas {
        let mut c = config.clone();
        c.alpha = alpha;
        c.out_dir = config.out_dir.join(format!("alpha-{alpha}"));
        // The network cache lives under the sweep root so every alpha
        // reuses the same trained networks and forward passes.
        let outcome = run_experiment(&c)?;
        let cell = outcome
            .cells
            .iter()
            .filter(|c| c.hallucination)
            .last()
            .ok_or_else(|| Error::stage("alpha-sweep", "no hallucination cell produced"))?;
        out.push_str(&format!("{alpha},{}\n", cell.report.rank1()));
    }
    std::fs::write(config.out_dir.join("alpha_sweep.csv"), &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::save_features;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Synthetic cross-spectral features. Subjects are unit vectors in a
    /// shared low-dimensional subspace; the NIR spectrum sees them through a
    /// fixed global rotation that moves most of that subspace toward
    /// directions the VIS spectrum never uses. A single linear map can undo
    /// the damage by suppressing the rotated directions, so the low-rank
    /// embedding has something real to find.
    fn synthetic_features(
        dim: usize,
        subjects: usize,
        per_spectrum: usize,
        noise: f64,
        with_hallucinated: bool,
        seed: u64,
    ) -> FeatureSet {
        let sub_dim = (dim / 2).min(16).max(2);
        let rot_dims = (sub_dim * 7) / 8;
        let mut rng = StdRng::seed_from_u64(seed);
        let a = nalgebra::DMatrix::<f64>::from_fn(dim, sub_dim + rot_dims, |_, _| {
            rng.gen_range(-1.0..1.0)
        });
        let basis = a.qr().q();
        // 90-degree plane rotations: each of the last rot_dims subspace
        // directions swaps with an external direction
        let rotate = |v: &nalgebra::DVector<f64>| -> nalgebra::DVector<f64> {
            let mut out = v.clone();
            for i in 0..rot_dims {
                let u = basis.column(sub_dim - rot_dims + i);
                let e = basis.column(sub_dim + i);
                let cu = u.dot(v);
                let ce = e.dot(v);
                out += &u * (-cu - ce);
                out += &e * (cu - ce);
            }
            out
        };
        let mut set = FeatureSet::new("synthetic", dim);
        let mut image = 0u32;
        // Antipodal prototype pairs on adjacent subjects keep the mean of any
        // contiguous even-sized subject block at zero, so the PCA centering
        // inside the experiment does not shift the test-fold geometry.
        let mut pending: Option<nalgebra::DVector<f64>> = None;
        for s in 0..subjects {
            let proto = match pending.take() {
                Some(p) => -p,
                None => {
                    let coeff =
                        nalgebra::DVector::<f64>::from_fn(sub_dim, |_, _| rng.gen_range(-1.0..1.0))
                            .normalize();
                    let p = basis.columns(0, sub_dim) * coeff;
                    pending = Some(p.clone());
                    p
                }
            };
            let rotated = rotate(&proto);
            for _ in 0..per_spectrum {
                let vis: Vec<f64> = proto
                    .iter()
                    .map(|v| v + rng.gen_range(-noise..noise))
                    .collect();
                set.push(FeatureRecord {
                    subject: s as u32 + 1,
                    image,
                    spectrum: Spectrum::Vis,
                    kind: InputKind::Vis,
                    replicated: false,
                    vector: vis,
                })
                .unwrap();
                image += 1;
                let nir: Vec<f64> = rotated
                    .iter()
                    .map(|v| v + rng.gen_range(-noise..noise))
                    .collect();
                set.push(FeatureRecord {
                    subject: s as u32 + 1,
                    image,
                    spectrum: Spectrum::Nir,
                    kind: InputKind::RawNir,
                    replicated: true,
                    vector: nir.clone(),
                })
                .unwrap();
                image += 1;
                if with_hallucinated {
                    // hallucination partially undoes the rotation
                    let undone: Vec<f64> = proto
                        .iter()
                        .zip(&nir)
                        .map(|(p, n)| 0.5 * p + 0.5 * n)
                        .collect();
                    set.push(FeatureRecord {
                        subject: s as u32 + 1,
                        image,
                        spectrum: Spectrum::Nir,
                        kind: InputKind::Hallucinated,
                        replicated: false,
                        vector: undone,
                    })
                    .unwrap();
                    image += 1;
                }
            }
        }
        set
    }

    fn base_config(dir: &Path, features: &Path) -> ExperimentConfig {
        let mut ccp = CcpConfig::default();
        // early stopping keeps the transform close to the identity, which
        // generalizes to the held-out fold far better than a full minimization
        ccp.max_outer_iters = 30;
        ExperimentConfig {
            features: Some(features.to_path_buf()),
            out_dir: dir.to_path_buf(),
            folds: 2,
            test_fold: 0,
            pca_dim: 64,
            ccp,
            use_lowrank: true,
            use_hallucination: false,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_roundtrip_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let feat = dir.path().join("f.txt");
        save_features(&feat, &synthetic_features(8, 4, 2, 0.05, false, 1)).unwrap();
        let text = format!(
            "seed = 7\npaths.features = {:?}\npaths.out_dir = {:?}\nmining.window = 50\nblend.alpha = 0.5\nprotocol.folds = 2\n",
            feat.to_str().unwrap(),
            dir.path().join("out").to_str().unwrap()
        );
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.mining.window, 50);
        assert_eq!(config.alpha, 0.5);
        assert_eq!(config.folds, 2);

        let bad = format!("{text}bogus.key = 1\n");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus.key"), "{err}");
    }

    #[test]
    fn baseline_cell_equals_direct_identify() {
        let dir = tempfile::tempdir().unwrap();
        let feat = dir.path().join("f.txt");
        let set = synthetic_features(16, 6, 3, 0.1, false, 3);
        save_features(&feat, &set).unwrap();
        let mut config = base_config(&dir.path().join("out"), &feat);
        config.use_lowrank = false;
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.cells.len(), 1);
        assert_eq!(outcome.cells[0].name, "baseline");

        // direct oracle: identify() on the raw test-fold features
        let assignment = assign_folds(&set.subjects(), 2).unwrap();
        let (_, test) = split_folds(&set, &assignment, 0).unwrap();
        let (gal_m, gal_l, _) = subset_matrix(&test, &[InputKind::Vis]);
        let (pr_m, pr_l, _) = subset_matrix(&test, &[InputKind::RawNir]);
        let gallery = GallerySet::new(gal_m, gal_l, Spectrum::Vis).unwrap();
        let probes = ProbeSet::new(pr_m, pr_l, Spectrum::Nir).unwrap();
        let direct = identify(&gallery, &probes, 10.min(gallery.len())).unwrap();
        assert_eq!(outcome.cells[0].report.rank1(), direct.rank1());
        assert_eq!(
            outcome.cells[0].report.cmc(),
            direct.cmc()
        );
    }

    #[test]
    fn lowrank_cell_beats_baseline_on_rotated_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let feat = dir.path().join("f.txt");
        save_features(&feat, &synthetic_features(64, 20, 10, 0.01, false, 42)).unwrap();
        let config = base_config(&dir.path().join("out"), &feat);
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.cells.len(), 2);
        let baseline = &outcome.cells[0];
        let lowrank = &outcome.cells[1];
        assert!(
            lowrank.report.rank1() > baseline.report.rank1(),
            "lowrank {} vs baseline {}",
            lowrank.report.rank1(),
            baseline.report.rank1()
        );
    }

    #[test]
    fn deterministic_summary_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let feat = dir.path().join("f.txt");
        save_features(&feat, &synthetic_features(16, 6, 3, 0.1, true, 7)).unwrap();
        let mut config = base_config(&dir.path().join("out1"), &feat);
        config.use_hallucination = true;
        let a = run_experiment(&config).unwrap();
        let mut config2 = config.clone();
        config2.out_dir = dir.path().join("out2");
        let b = run_experiment(&config2).unwrap();
        assert_eq!(a.summary_csv, b.summary_csv);
        let s1 = std::fs::read(dir.path().join("out1/summary.csv")).unwrap();
        let s2 = std::fs::read(dir.path().join("out2/summary.csv")).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(a.cells.len(), 4);
    }

    #[test]
    fn missing_hallucinated_records_is_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let feat = dir.path().join("f.txt");
        save_features(&feat, &synthetic_features(8, 4, 2, 0.1, false, 9)).unwrap();
        let mut config = base_config(&dir.path().join("out"), &feat);
        config.use_hallucination = true;
        config.use_lowrank = false;
        let err = run_experiment(&config).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
    }

    #[test]
    fn alpha_sweep_feature_mode_constant() {
        let dir = tempfile::tempdir().unwrap();
        let feat = dir.path().join("f.txt");
        save_features(&feat, &synthetic_features(16, 6, 3, 0.1, true, 11)).unwrap();
        let mut config = base_config(&dir.path().join("out"), &feat);
        config.use_hallucination = true;
        config.use_lowrank = false;
        let csv = alpha_sweep(&config, &[0.0, 0.5, 1.0]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        // feature-driven runs never re-blend, so every alpha matches
        let rank: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
        assert!(rank.windows(2).all(|w| w[0] == w[1]));
        assert!(alpha_sweep(&config, &[]).is_err());
    }

    #[test]
    fn config_rejects_missing_paths() {
        let config = ExperimentConfig::default();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let err = ExperimentConfig::from_toml_str("seed = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
