//! Closed-set identification: cosine matching of NIR probes against a VIS
//! gallery, with the cumulative match characteristic and per-probe
//! decisions.

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nirvis::lowrank::Spectrum;
use nirvis::matcher::{identify, GallerySet, ProbeSet};

fn main() {
    let mut rng = StdRng::seed_from_u64(9);
    let dim = 8;
    let subjects = 6;

    // One enrolled vector per subject, three noisy probes each.
    let prototypes: Vec<Vec<f64>> = (0..subjects)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let gallery = DMatrix::from_fn(dim, subjects, |i, j| prototypes[j][i]);
    let gal_labels: Vec<u32> = (0..subjects as u32).collect();

    let probe_n = subjects * 3;
    let mut probes = DMatrix::zeros(dim, probe_n);
    let mut probe_labels = Vec::new();
    for s in 0..subjects {
        for k in 0..3 {
            for i in 0..dim {
                probes[(i, s * 3 + k)] = prototypes[s][i] + rng.gen_range(-0.9..0.9);
            }
            probe_labels.push(s as u32);
        }
    }

    let gallery = GallerySet::new(gallery, gal_labels, Spectrum::Vis).unwrap();
    let probes = ProbeSet::new(probes, probe_labels, Spectrum::Nir).unwrap();
    let report = identify(&gallery, &probes, subjects).unwrap();

    println!("CMC:");
    for (r, rate) in report.cmc().iter().enumerate() {
        println!("  rank {:>2}: {:.3}", r + 1, rate);
    }
    println!("\nfirst probes:");
    for d in report.decisions.iter().take(6) {
        let mark = if d.true_label == d.predicted_label { "ok " } else { "err" };
        println!(
            "  {mark} probe {:>2}: true {} predicted {} (score {:+.4})",
            d.probe_index, d.true_label, d.predicted_label, d.score
        );
    }
}
