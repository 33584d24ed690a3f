//! Mines registered NIR/VIS patch pairs from synthetic aligned faces.
//!
//! The VIS face is a shifted, rescaled copy of the NIR scene, so the miner
//! has to register each window and the correlation gate has something real
//! to measure.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nirvis::lowrank::Spectrum;
use nirvis::mining::{mine_pairs, similarity_gate, AlignedFace, MiningConfig, FACE_SIZE};
use nirvis::raster::{gaussian_filter, Raster};

fn main() {
    let mut rng = StdRng::seed_from_u64(11);
    // One big smooth texture; NIR and VIS faces are offset crops of it, so
    // they depict the "same subject" under a small misalignment.
    let big = gaussian_filter(
        &Raster::from_fn(FACE_SIZE + 40, FACE_SIZE + 40, |_, _| rng.gen_range(0.0..1.0)),
        2.0,
    );
    let nir_img = big.crop(20, 20, FACE_SIZE, FACE_SIZE).unwrap();
    let vis_shifted = big.crop(22, 21, FACE_SIZE, FACE_SIZE).unwrap();
    // VIS gets a different intensity transfer, as a real sensor would.
    let vis_img = Raster::from_vec(
        FACE_SIZE,
        FACE_SIZE,
        vis_shifted.data().iter().map(|v| 0.1 + 0.8 * v).collect(),
    )
    .unwrap();

    let nir = AlignedFace::new(nir_img, 1, Spectrum::Nir, 0).unwrap();
    let vis = AlignedFace::new(vis_img, 1, Spectrum::Vis, 1).unwrap();

    let config = MiningConfig {
        window: 60,
        stride: 40,
        crop: 40,
        target_total: 200,
        ..MiningConfig::default()
    };
    let gate = similarity_gate(&nir.image, &vis.image, &config).unwrap();
    println!(
        "whole-face gate before registration: corr {:.3}, gradient corr {:.3}, accept {}",
        gate.corr, gate.grad_corr, gate.accept
    );

    let pairs = mine_pairs(&[nir], &[vis], &config).unwrap();
    println!("mined {} patch pairs ({}x{} crops, flips included)", pairs.len(), config.crop, config.crop);
    if let Some(p) = pairs.first() {
        println!(
            "first pair: subject {}, NIR mean {:.3}, VIS mean {:.3}",
            p.subject,
            p.nir_patch.mean(),
            p.vis_patch.mean()
        );
    }
}
