//! Luminance blending: folds high-frequency NIR detail back into the
//! hallucinated channel, Y = Y_hat - alpha * G(N_ir - Y_hat).
//!
//! A zero-weight Y network is the identity through its skip connection, so
//! the hallucinated luminance here is a smoothed copy of the input and the
//! effect of alpha is easy to read off.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use nirvis::blend::{blend, GaussianPasses};
use nirvis::raster::{gaussian_filter, Raster};

fn main() {
    let mut rng = StdRng::seed_from_u64(31);
    let nir = gaussian_filter(
        &Raster::from_fn(48, 48, |_, _| rng.gen_range(0.0..1.0)),
        1.0,
    );
    // Stand-in for the network output: the NIR input with its fine detail
    // smoothed away.
    let y_hat = gaussian_filter(&nir, 2.0);

    let detail = |img: &Raster| -> f64 {
        // mean absolute difference to a heavily smoothed copy
        let smooth = gaussian_filter(img, 2.0);
        img.data()
            .iter()
            .zip(smooth.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / img.data().len() as f64
    };

    println!("detail in NIR input:    {:.5}", detail(&nir));
    println!("detail in hallucinated: {:.5}", detail(&y_hat));
    for alpha in [0.0, 0.3, 0.6, 1.0] {
        let single = blend(&y_hat, &nir, alpha, 1.0, GaussianPasses::Single).unwrap();
        let double = blend(&y_hat, &nir, alpha, 1.0, GaussianPasses::Double).unwrap();
        println!(
            "alpha {alpha:.1}: detail {:.5} (single pass) / {:.5} (double pass)",
            detail(&single),
            detail(&double)
        );
    }
}
