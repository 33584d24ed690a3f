//! Luminance blending of the hallucinated output with the original NIR:
//!
//! ```text
//!   Y = Y_hat - alpha * G(N_ir - Y_hat)
//! ```
//!
//! where `G` is a truncated, normalized Gaussian filter applied either twice
//! (default) or once, selectable because the two readings of the filter
//! notation are both defensible. The filter uses replicate padding so face
//! borders are not darkened.

use crate::error::{Error, Result};
use crate::raster::{gaussian_filter, Raster};

/// How many times the Gaussian is applied to the difference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GaussianPasses {
    Single,
    Double,
}

impl Default for GaussianPasses {
    fn default() -> Self {
        GaussianPasses::Double
    }
}

/// Blends a hallucinated luminance channel with the original NIR raster.
///
/// `alpha` in [0, 1] controls how much NIR detail is folded back in; `sigma`
/// is the Gaussian standard deviation (kernel truncated at 3 sigma and
/// renormalized to unit sum).
pub fn blend(
    y_hat: &Raster,
    nir: &Raster,
    alpha: f64,
    sigma: f64,
    passes: GaussianPasses,
) -> Result<Raster> {
    if y_hat.width() != nir.width() || y_hat.height() != nir.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            y_hat.width(),
            y_hat.height(),
            nir.width(),
            nir.height()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(y_hat.clone());
    }
    let diff = Raster::from_vec(
        nir.width(),
        nir.height(),
        nir.data()
            .iter()
            .zip(y_hat.data())
            .map(|(n, y)| n - y)
            .collect(),
    )?;
    let mut filtered = gaussian_filter(&diff, sigma);
    if passes == GaussianPasses::Double {
        filtered = gaussian_filter(&filtered, sigma);
    }
    Raster::from_vec(
        nir.width(),
        nir.height(),
        y_hat
            .data()
            .iter()
            .zip(filtered.data())
            .map(|(y, f)| y - alpha * f)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::gaussian_kernel;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn noise(seed: u64, w: usize, h: usize) -> Raster {
        let mut r = StdRng::seed_from_u64(seed);
        Raster::from_fn(w, h, |_, _| r.gen_range(0.0..1.0))
    }

    #[test]
    fn alpha_zero_returns_y_hat_exactly() {
        let y_hat = noise(1, 16, 16);
        let nir = noise(2, 16, 16);
        let out = blend(&y_hat, &nir, 0.0, 1.0, GaussianPasses::Double).unwrap();
        for (a, b) in out.data().iter().zip(y_hat.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_inputs_are_fixed_point_for_all_alpha() {
        let y_hat = noise(3, 16, 16);
        for alpha in [0.0, 0.3, 0.6, 1.0] {
            for passes in [GaussianPasses::Single, GaussianPasses::Double] {
                let out = blend(&y_hat, &y_hat.clone(), alpha, 1.0, passes).unwrap();
                for (a, b) in out.data().iter().zip(y_hat.data()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    /// Direct two-pass separable filtering oracle at the default alpha.
    #[test]
    fn matches_filtering_oracle() {
        let y_hat = noise(4, 20, 20);
        let nir = noise(5, 20, 20);
        let alpha = 0.6;
        let out = blend(&y_hat, &nir, alpha, 1.0, GaussianPasses::Double).unwrap();
        let diff = Raster::from_vec(
            20,
            20,
            nir.data()
                .iter()
                .zip(y_hat.data())
                .map(|(n, y)| n - y)
                .collect(),
        )
        .unwrap();
        let filtered = gaussian_filter(&gaussian_filter(&diff, 1.0), 1.0);
        for i in 0..400 {
            let expect = y_hat.data()[i] - alpha * filtered.data()[i];
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_and_double_pass_differ_on_nonuniform_input() {
        let y_hat = noise(6, 16, 16);
        let nir = noise(7, 16, 16);
        let one = blend(&y_hat, &nir, 0.6, 1.0, GaussianPasses::Single).unwrap();
        let two = blend(&y_hat, &nir, 0.6, 1.0, GaussianPasses::Double).unwrap();
        assert!(one != two);
    }

    #[test]
    fn kernel_unit_sum() {
        let k = gaussian_kernel(1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mean_preserved_when_means_equal() {
        // constant difference in the interior: the filter is mean-preserving
        let y_hat = noise(8, 24, 24);
        let shift = 0.1;
        let nir = Raster::from_vec(
            24,
            24,
            y_hat.data().iter().map(|v| v + shift).collect(),
        )
        .unwrap();
        let out = blend(&y_hat, &nir, 0.5, 1.0, GaussianPasses::Double).unwrap();
        // N - Y_hat is constant, the filter returns it unchanged
        for (o, y) in out.data().iter().zip(y_hat.data()) {
            assert!((o - (y - 0.5 * shift)).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let y_hat = noise(9, 8, 8);
        assert!(blend(&y_hat, &y_hat.clone(), 1.5, 1.0, GaussianPasses::Double).is_err());
    }
}
