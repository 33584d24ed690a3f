//! Trains the Cb chroma hallucination network on a handful of synthetic
//! patch pairs and prints the loss trajectory.
//!
//! The Cb architecture (seven 3x3 layers) is the cheapest of the three
//! channel networks, which keeps this demo quick; the Y and Cr networks
//! train through exactly the same path.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nirvis::net::{train, Channel, HallucinationNet, PreluMode, TrainConfig};
use nirvis::raster::{gaussian_filter, Raster};

fn main() {
    let mut rng = StdRng::seed_from_u64(21);
    // NIR patch in, smoothed patch out: a learnable stand-in for the real
    // NIR-to-chroma mapping.
    let pairs: Vec<(Raster, Raster)> = (0..12)
        .map(|_| {
            let nir = Raster::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0));
            let target = gaussian_filter(&nir, 1.0);
            (nir, target)
        })
        .collect();

    let mut net = HallucinationNet::new(Channel::Cb, PreluMode::PerChannel, 21);
    let config = TrainConfig {
        epochs: 20,
        batch_size: 4,
        seed: 21,
        ..TrainConfig::default()
    };
    let log = train(&mut net, &pairs, &config).unwrap();

    println!("{} iterations over {} epochs", log.iterations, log.epoch_losses.len());
    for (e, loss) in log.epoch_losses.iter().enumerate() {
        if e % 4 == 0 || e + 1 == log.epoch_losses.len() {
            println!("  epoch {:>2}: loss {loss:.6}", e + 1);
        }
    }

    let (input, target) = &pairs[0];
    let pred = net.forward(input).unwrap();
    let err: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.data().len() as f64;
    println!("mean abs error on the first training patch: {err:.4}");
}
