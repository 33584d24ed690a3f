//! Affine patch registration by inverse-compositional Gauss-Newton on the
//! sum of squared intensity differences.
//!
//! The NIR patch is the template; the VIS luminance patch is warped onto it.
//! The inverse-compositional formulation precomputes the template gradients,
//! steepest-descent images and Hessian once, so each iteration only rewarps
//! the image and solves a 6x6 system.

use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::raster::{warp_affine, Affine2, Raster};

/// Stopping rules for [`affine_register`].
#[derive(Debug, Clone, Copy)]
pub struct RegisterConfig {
    pub max_iters: usize,
    /// Stop once the incremental parameter update norm drops below this.
    pub update_tolerance: f64,
    /// Declare divergence after this many consecutive SSD increases.
    pub divergence_streak: usize,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            update_tolerance: 1e-4,
            divergence_streak: 3,
        }
    }
}

/// Outcome of registering a VIS patch against a NIR template.
#[derive(Debug, Clone)]
pub struct Registration {
    /// VIS patch resampled into the template frame with the final warp.
    pub warped: Raster,
    /// Warp mapping template coordinates to image coordinates.
    pub transform: Affine2,
    /// False when the solver diverged; `warped` is then the identity warp.
    pub registered: bool,
    pub iterations: usize,
    pub final_ssd: f64,
}

fn ssd(a: &Raster, b: &Raster) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Fits a 6-parameter affine warp minimizing SSD between `image` (VIS) and
/// `template` (NIR), starting from the identity.
pub fn affine_register(
    image: &Raster,
    template: &Raster,
    config: &RegisterConfig,
) -> Result<Registration> {
    if image.width() != template.width() || image.height() != template.height() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs template {}x{}",
            image.width(),
            image.height(),
            template.width(),
            template.height()
        )));
    }
    if template.is_constant() || image.is_constant() {
        return Err(Error::InvalidInput(
            "constant patch cannot be registered".into(),
        ));
    }

    let w = template.width();
    let h = template.height();

    // Template gradients and steepest-descent images, precomputed once.
    // Warp parameterization: W(x; p) = [(1+p0)x + p2 y + p4, p1 x + (1+p3)y + p5].
    let mut steepest = vec![[0.0f64; 6]; w * h];
    let mut hessian = Matrix6::<f64>::zeros();
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (template.get_clamped(xi + 1, yi) - template.get_clamped(xi - 1, yi));
            let gy = 0.5 * (template.get_clamped(xi, yi + 1) - template.get_clamped(xi, yi - 1));
            let (xf, yf) = (x as f64, y as f64);
            let sd = [gx * xf, gy * xf, gx * yf, gy * yf, gx, gy];
            for i in 0..6 {
                for j in 0..6 {
                    hessian[(i, j)] += sd[i] * sd[j];
                }
            }
            steepest[y * w + x] = sd;
        }
    }
    let hessian_inv = hessian
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("degenerate template (singular Hessian)".into()))?;

    let identity_warp = warp_affine(image, &Affine2::IDENTITY, w, h);
    let identity_ssd = ssd(&identity_warp, template);

    let mut warp = Affine2::IDENTITY;
    let mut prev_ssd = identity_ssd;
    let mut best_ssd = identity_ssd;
    let mut best_warp = Affine2::IDENTITY;
    let mut bad_streak = 0usize;
    let mut iterations = 0usize;
    let mut diverged = false;

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let warped = warp_affine(image, &warp, w, h);
        let current_ssd = ssd(&warped, template);
        if current_ssd < best_ssd {
            best_ssd = current_ssd;
            best_warp = warp;
        }
        // Consecutive SSD increases mean the linearization stopped helping:
        // either true divergence or jitter around the optimum. Stop and let
        // the best-so-far comparison below decide which it was.
        if current_ssd > prev_ssd {
            bad_streak += 1;
            if bad_streak >= config.divergence_streak {
                diverged = true;
                break;
            }
        } else {
            bad_streak = 0;
        }
        prev_ssd = current_ssd;

        let mut b = Vector6::<f64>::zeros();
        for idx in 0..w * h {
            let e = warped.data()[idx] - template.data()[idx];
            let sd = &steepest[idx];
            for i in 0..6 {
                b[i] += sd[i] * e;
            }
        }
        let dp = hessian_inv * b;

        // Inverse-compositional update: W <- W o W(dp)^-1.
        let delta = Affine2 {
            a: 1.0 + dp[0],
            b: dp[2],
            tx: dp[4],
            c: dp[1],
            d: 1.0 + dp[3],
            ty: dp[5],
        };
        warp = warp.compose(&delta.inverse()?);

        if dp.norm() < config.update_tolerance {
            break;
        }
    }

    // A solver that stalled without ever beating the identity warp did not
    // register anything.
    if diverged && best_ssd >= identity_ssd {
        return Ok(Registration {
            warped: identity_warp,
            transform: Affine2::IDENTITY,
            registered: false,
            iterations,
            final_ssd: identity_ssd,
        });
    }
    let warped = warp_affine(image, &best_warp, w, h);
    Ok(Registration {
        warped,
        transform: best_warp,
        registered: true,
        iterations,
        final_ssd: best_ssd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::gaussian_filter;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Smooth random texture: filtered noise has usable gradients everywhere.
    pub(crate) fn textured(seed: u64, w: usize, h: usize) -> Raster {
        let mut r = StdRng::seed_from_u64(seed);
        let noise = Raster::from_fn(w, h, |_, _| r.gen_range(0.0..1.0));
        gaussian_filter(&noise, 2.0)
    }

    #[test]
    fn identical_patches_give_identity() {
        let t = textured(1, 60, 60);
        let reg = affine_register(&t.clone(), &t, &RegisterConfig::default()).unwrap();
        assert!(reg.registered);
        assert!(
            reg.transform.distance_from_identity() < 1e-3,
            "transform strayed: {:?}",
            reg.transform
        );
    }

    #[test]
    fn translation_recovered() {
        let scene = textured(2, 80, 80);
        // template: crop at (10, 10); image: crop at (12, 11) -> the warp
        // from template coords to image coords is a (+2, +1) translation.
        let template = scene.crop(10, 10, 60, 60).unwrap();
        let image = scene.crop(12, 11, 60, 60).unwrap();
        let reg = affine_register(&image, &template, &RegisterConfig::default()).unwrap();
        assert!(reg.registered);
        let (cx, cy) = reg.transform.apply(30.0, 30.0);
        let dx = cx - 30.0;
        let dy = cy - 30.0;
        assert!(
            (dx + 2.0).abs() < 0.5 && (dy + 1.0).abs() < 0.5,
            "recovered shift ({dx}, {dy})"
        );
    }

    #[test]
    fn ssd_never_worse_than_identity() {
        for seed in 0..5 {
            let scene = textured(100 + seed, 80, 80);
            let template = scene.crop(8, 8, 60, 60).unwrap();
            let image = scene.crop(10, 9, 60, 60).unwrap();
            let reg = affine_register(&image, &template, &RegisterConfig::default()).unwrap();
            let id_ssd = ssd(&image, &template);
            assert!(reg.final_ssd <= id_ssd + 1e-9);
        }
    }

    #[test]
    fn uncorrelated_noise_flagged_or_near_identity() {
        let mut r = StdRng::seed_from_u64(55);
        let a = Raster::from_fn(60, 60, |_, _| r.gen_range(0.0..1.0));
        let b = Raster::from_fn(60, 60, |_, _| r.gen_range(0.0..1.0));
        let reg = affine_register(&a, &b, &RegisterConfig::default()).unwrap();
        assert!(!reg.registered || reg.transform.distance_from_identity() < 1.0);
    }

    #[test]
    fn constant_patch_rejected() {
        let flat = Raster::new(60, 60);
        let t = textured(3, 60, 60);
        assert!(affine_register(&flat, &t, &RegisterConfig::default()).is_err());
    }
}
