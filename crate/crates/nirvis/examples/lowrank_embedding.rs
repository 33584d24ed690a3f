//! Learns the low-rank cross-spectral embedding on synthetic data.
//!
//! Subjects are random unit vectors; NIR samples see a fixed global rotation
//! of the feature space. The learned transform collapses the rotated
//! directions, so cosine matching across spectra recovers identity.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nirvis::lowrank::{embed, learn_lowrank_transform, CcpConfig, LabeledFeatureMatrix, Spectrum};
use nirvis::matcher::{identify, GallerySet, ProbeSet};
use nirvis::pca::l2_normalize_columns;

fn main() {
    let dim = 64;
    let subjects = 20;
    let per_spectrum = 10;
    let planes = 28;
    let noise = 0.01;
    let mut rng = StdRng::seed_from_u64(1);

    // The spectral gap: a rotation by 90 degrees in 28 planes of an
    // orthonormal basis, applied to every NIR sample.
    let basis = DMatrix::<f64>::from_fn(dim, 2 * planes, |_, _| rng.gen_range(-1.0..1.0))
        .qr()
        .q();
    let rotate = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = v.clone();
        for i in 0..planes {
            let u = basis.column(i);
            let e = basis.column(planes + i);
            let (cu, ce) = (u.dot(v), e.dot(v));
            out += &u * (-cu - ce);
            out += &e * (cu - ce);
        }
        out
    };

    let mut vis: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut nir: Vec<Vec<DVector<f64>>> = Vec::new();
    for _ in 0..subjects {
        let proto = DVector::<f64>::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)).normalize();
        let rotated = rotate(&proto);
        vis.push(
            (0..per_spectrum)
                .map(|_| proto.map(|x| x + rng.gen_range(-noise..noise)))
                .collect(),
        );
        nir.push(
            (0..per_spectrum)
                .map(|_| rotated.map(|x| x + rng.gen_range(-noise..noise)))
                .collect(),
        );
    }

    // First half of each subject's samples trains the transform.
    let half = per_spectrum / 2;
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    let mut spectra = Vec::new();
    for (s, vs) in vis.iter().enumerate() {
        for v in &vs[..half] {
            cols.push(v.clone());
            labels.push(s as u32);
            spectra.push(Spectrum::Vis);
        }
    }
    for (s, ns) in nir.iter().enumerate() {
        for v in &ns[..half] {
            cols.push(v.clone());
            labels.push(s as u32);
            spectra.push(Spectrum::Nir);
        }
    }
    let mut train = DMatrix::zeros(dim, cols.len());
    for (j, v) in cols.iter().enumerate() {
        train.set_column(j, v);
    }
    l2_normalize_columns(&mut train);
    let labeled = LabeledFeatureMatrix::new(train, labels, spectra).unwrap();

    let config = CcpConfig {
        max_outer_iters: 20,
        ..CcpConfig::default()
    };
    let outcome = learn_lowrank_transform(&labeled, &config).unwrap();
    println!(
        "objective {:.4} -> {:.4} over {} outer iterations (converged: {})",
        outcome.objective_history[0],
        outcome.objective_history.last().unwrap(),
        outcome.objective_history.len() - 1,
        outcome.converged
    );

    // Held-out second half: VIS gallery, NIR probes.
    let held = subjects * (per_spectrum - half);
    let mut gal = DMatrix::zeros(dim, held);
    let mut pro = DMatrix::zeros(dim, held);
    let mut gal_labels = Vec::new();
    let mut pro_labels = Vec::new();
    let (mut gj, mut pj) = (0, 0);
    for (s, vs) in vis.iter().enumerate() {
        for v in &vs[half..] {
            gal.set_column(gj, v);
            gal_labels.push(s as u32);
            gj += 1;
        }
    }
    for (s, ns) in nir.iter().enumerate() {
        for v in &ns[half..] {
            pro.set_column(pj, v);
            pro_labels.push(s as u32);
            pj += 1;
        }
    }

    let rank1 = |g: DMatrix<f64>, p: DMatrix<f64>| {
        identify(
            &GallerySet::new(g, gal_labels.clone(), Spectrum::Vis).unwrap(),
            &ProbeSet::new(p, pro_labels.clone(), Spectrum::Nir).unwrap(),
            1,
        )
        .unwrap()
        .rank1()
    };
    let baseline = rank1(gal.clone(), pro.clone());
    l2_normalize_columns(&mut gal);
    l2_normalize_columns(&mut pro);
    let embedded = rank1(
        embed(&outcome.transform, &gal).unwrap(),
        embed(&outcome.transform, &pro).unwrap(),
    );
    println!("rank-1 without embedding: {baseline:.3}");
    println!("rank-1 with embedding:    {embedded:.3}");
}
