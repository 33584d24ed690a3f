//! Recovers a known affine warp between two views of the same texture with
//! inverse-compositional alignment.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nirvis::raster::{gaussian_filter, Affine2, Raster};
use nirvis::register::{affine_register, RegisterConfig};

fn main() {
    let mut rng = StdRng::seed_from_u64(41);
    let scene = gaussian_filter(
        &Raster::from_fn(80, 80, |_, _| rng.gen_range(0.0..1.0)),
        2.0,
    );
    let image = scene.crop(10, 10, 60, 60).unwrap();

    // Ground truth: small shear plus a subpixel translation, template
    // coordinates to image coordinates.
    let truth = Affine2 {
        a: 1.0,
        b: 0.03,
        tx: 1.7,
        c: -0.02,
        d: 1.0,
        ty: -2.4,
    };
    let template = Raster::from_fn(60, 60, |x, y| {
        let (sx, sy) = truth.apply(x as f64, y as f64);
        scene.sample_bilinear(sx + 10.0, sy + 10.0)
    });

    let reg = affine_register(&image, &template, &RegisterConfig::default()).unwrap();
    println!("registered: {} in {} iterations, SSD {:.5}", reg.registered, reg.iterations, reg.final_ssd);
    println!("true warp:      a {:.4} b {:.4} tx {:.4} c {:.4} d {:.4} ty {:.4}",
        truth.a, truth.b, truth.tx, truth.c, truth.d, truth.ty);
    let t = reg.transform;
    println!("recovered warp: a {:.4} b {:.4} tx {:.4} c {:.4} d {:.4} ty {:.4}",
        t.a, t.b, t.tx, t.c, t.d, t.ty);

    let corners = [(0.0, 0.0), (59.0, 0.0), (0.0, 59.0), (59.0, 59.0)];
    let mean_disp: f64 = corners
        .iter()
        .map(|&(x, y)| {
            let (ax, ay) = t.apply(x, y);
            let (bx, by) = truth.apply(x, y);
            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
        })
        .sum::<f64>()
        / 4.0;
    println!("mean corner displacement error: {mean_disp:.4} px");
}
