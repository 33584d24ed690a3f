//! Command-line front end. All real work lives in the library; each
//! subcommand is a thin wrapper that loads inputs, calls one library entry
//! point and writes the results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nirvis::blend::GaussianPasses;
use nirvis::color::rgb_to_ycbcr;
use nirvis::error::Error;
use nirvis::mining::{
    landmark_align, mine_pairs_color, parse_manifest, save_color_patch_dataset,
    load_color_patch_dataset,
};
use nirvis::lowrank::Spectrum;
use nirvis::net::{load_weights, save_weights, train, Channel, HallucinationNet, PreluMode};
use nirvis::pipeline::{
    alpha_sweep, hallucinate_rgb, load_rgb, run_experiment, save_rgb, ChannelNets,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "nirvis", about = "NIR-to-VIS face recognition toolkit", version)]
struct Cli {
    /// Experiment configuration file (flat dotted-key TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured random seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker count; accepted for interface stability, computation is
    /// single-threaded for determinism
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Y,
    Cb,
    Cr,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Channel {
        match c {
            ChannelArg::Y => Channel::Y,
            ChannelArg::Cb => Channel::Cb,
            ChannelArg::Cr => Channel::Cr,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mine aligned NIR/VIS patch pairs from an image manifest
    MinePatches {
        /// Manifest file: `path subject spectrum x1 y1 x2 y2 x3 y3` per line
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output patch dataset (.nvcd)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one hallucination channel network on a mined patch dataset
    TrainHallucinator {
        /// Patch dataset produced by mine-patches
        #[arg(long)]
        patches: PathBuf,
        #[arg(long, value_enum)]
        channel: ChannelArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Output weights file (.nvnw)
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a NIR image to a hallucinated VIS image
    Hallucinate {
        /// Directory holding y.nvnw, cb.nvnw and cr.nvnw
        #[arg(long)]
        weights_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Blur the residual once instead of twice
        #[arg(long)]
        single_pass: bool,
    },
    /// Learn the PCA + low-rank embedding and store it with the experiment
    /// artifacts
    LearnEmbedding,
    /// Run the configured ablation cells and write report CSVs
    Evaluate,
    /// Re-evaluate the hallucination cell over a grid of blending strengths
    AlphaSweep {
        /// Comma-separated alpha values in [0, 1]
        #[arg(long)]
        alphas: String,
    },
    /// Print the summary of a finished experiment
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::MinePatches { manifest, out } => {
            let config = load_config(cli)?;
            let manifest = manifest
                .clone()
                .or_else(|| config.manifest.clone())
                .ok_or_else(|| Error::Config("mine-patches needs --manifest".into()))?;
            let entries = parse_manifest(&manifest)?;
            let base = manifest.parent().unwrap_or(std::path::Path::new(".")).to_path_buf();
            let mut nir = Vec::new();
            let mut vis = Vec::new();
            let mut cbs = Vec::new();
            let mut crs = Vec::new();
            for (i, e) in entries.iter().enumerate() {
                let (r, g, b) = load_rgb(&base.join(&e.path))?;
                let (y, cb, cr) = rgb_to_ycbcr(&r, &g, &b)?;
                let warp = |p| landmark_align(p, &e.landmarks, e.subject, e.spectrum, i as u32);
                match e.spectrum {
                    Spectrum::Nir => nir.push(warp(&y)?),
                    Spectrum::Vis => {
                        vis.push(warp(&y)?);
                        cbs.push(warp(&cb)?.image);
                        crs.push(warp(&cr)?.image);
                    }
                }
            }
            let pairs = mine_pairs_color(&nir, &vis, &cbs, &crs, &config.mining)?;
            save_color_patch_dataset(out, &pairs)?;
            println!("mined {} patch pairs -> {}", pairs.len(), out.display());
        }
        Command::TrainHallucinator {
            patches,
            channel,
            epochs,
            batch,
            out,
        } => {
            let config = load_config(cli)?;
            let pairs = load_color_patch_dataset(patches)?;
            if pairs.is_empty() {
                return Err(Error::Config(format!("{} holds no patch pairs", patches.display())));
            }
            let channel: Channel = (*channel).into();
            let data: Vec<_> = pairs
                .iter()
                .map(|p| {
                    let target = match channel {
                        Channel::Y => &p.pair.vis_patch,
                        Channel::Cb => &p.cb_patch,
                        Channel::Cr => &p.cr_patch,
                    };
                    (p.pair.nir_patch.clone(), target.clone())
                })
                .collect();
            let mode = if config.shared_prelu {
                PreluMode::Shared
            } else {
                PreluMode::PerChannel
            };
            let mut net = HallucinationNet::new(channel, mode, config.seed);
            let mut tc = config.train.clone();
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            if let Some(b) = batch {
                tc.batch_size = *b;
            }
            let log = train(&mut net, &data, &tc)?;
            save_weights(out, &net)?;
            std::fs::write(out.with_extension("csv"), log.csv())?;
            let last = log.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} iterations over {} pairs, final epoch loss {last:.6} -> {}",
                log.iterations,
                data.len(),
                out.display()
            );
        }
        Command::Hallucinate {
            weights_dir,
            input,
            output,
            alpha,
            sigma,
            single_pass,
        } => {
            let config = load_config(cli)?;
            let nets = ChannelNets {
                y: load_weights(&weights_dir.join("y.nvnw"))?,
                cb: load_weights(&weights_dir.join("cb.nvnw"))?,
                cr: load_weights(&weights_dir.join("cr.nvnw"))?,
            };
            let (r, g, b) = load_rgb(input)?;
            let (y, _, _) = rgb_to_ycbcr(&r, &g, &b)?;
            let passes = if *single_pass || config.single_pass_blend {
                GaussianPasses::Single
            } else {
                GaussianPasses::Double
            };
            let (r, g, b) = hallucinate_rgb(
                &nets,
                &y,
                alpha.unwrap_or(config.alpha),
                sigma.unwrap_or(config.sigma),
                passes,
            )?;
            save_rgb(output, &r, &g, &b)?;
            println!("hallucinated {} -> {}", input.display(), output.display());
        }
        Command::LearnEmbedding => {
            let mut config = load_config(cli)?;
            // the embedding is learned inside the low-rank cells; force them on
            config.use_lowrank = true;
            let outcome = run_experiment(&config)?;
            for cell in &outcome.cells {
                println!("{}: rank-1 {:.4}", cell.name, cell.report.rank1());
            }
        }
        Command::Evaluate => {
            let config = load_config(cli)?;
            let outcome = run_experiment(&config)?;
            print!("{}", outcome.summary_csv);
        }
        Command::AlphaSweep { alphas } => {
            let mut config = load_config(cli)?;
            config.use_hallucination = true;
            let parsed: Result<Vec<f64>, _> = alphas
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect();
            let parsed =
                parsed.map_err(|e| Error::Config(format!("bad alpha list {alphas:?}: {e}")))?;
            let csv = alpha_sweep(&config, &parsed)?;
            print!("{csv}");
        }
        Command::Report => {
            let config = load_config(cli)?;
            let summary = config.out_dir.join("summary.csv");
            if !summary.exists() {
                return Err(Error::Config(format!(
                    "{} not found; run `nirvis evaluate` first",
                    summary.display()
                )));
            }
            print!("{}", std::fs::read_to_string(&summary)?);
            let sweep = config.out_dir.join("alpha_sweep.csv");
            if sweep.exists() {
                println!();
                print!("{}", std::fs::read_to_string(&sweep)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::Stage { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
