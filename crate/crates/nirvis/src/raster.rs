//! Single-channel f64 rasters and the image primitives shared by patch
//! mining, registration and blending.

use crate::error::{Error, Result};

/// Row-major single-channel image with f64 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} raster needs {} samples, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with replicate borders at integer coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Bilinear sample at a real coordinate, replicate borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Contract(format!(
                "crop {}x{}+{}+{} exceeds {}x{}",
                w, h, x0, y0, self.width, self.height
            )));
        }
        let mut out = Raster::new(w, h);
        for y in 0..h {
            let src = (y0 + y) * self.width + x0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = Raster::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_constant(&self) -> bool {
        self.data.windows(2).all(|w| w[0] == w[1])
    }
}

/// 2x3 affine transform acting on (x, y) image coordinates:
/// `x' = a*x + b*y + tx`, `y' = c*x + d*y + ty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        c: 0.0,
        d: 1.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Affine2 {
        Affine2 {
            tx,
            ty,
            ..Affine2::IDENTITY
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        Affine2 {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            tx: self.a * other.tx + self.b * other.ty + self.tx,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
            ty: self.c * other.tx + self.d * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let det = self.a * self.d - self.b * self.c;
        if det.abs() < 1e-12 {
            return Err(Error::InvalidInput("singular affine transform".into()));
        }
        let (ia, ib, ic, id) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Ok(Affine2 {
            a: ia,
            b: ib,
            tx: -(ia * self.tx + ib * self.ty),
            c: ic,
            d: id,
            ty: -(ic * self.tx + id * self.ty),
        })
    }

    /// Solves the affine map sending each `from[i]` to `to[i]` exactly.
    /// The three source points must be non-collinear.
    pub fn from_three_points(from: &[(f64, f64); 3], to: &[(f64, f64); 3]) -> Result<Affine2> {
        let (x1, y1) = from[0];
        let (x2, y2) = from[1];
        let (x3, y3) = from[2];
        let det = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1);
        if det.abs() < 1e-9 {
            return Err(Error::InvalidInput("collinear landmark points".into()));
        }
        // A collinear target triangle makes the map singular.
        let to_det = (to[1].0 - to[0].0) * (to[2].1 - to[0].1)
            - (to[2].0 - to[0].0) * (to[1].1 - to[0].1);
        if to_det.abs() < 1e-9 {
            return Err(Error::InvalidInput("collinear landmark points".into()));
        }
        // Cramer solve for each output coordinate separately.
        let solve = |u1: f64, u2: f64, u3: f64| -> (f64, f64, f64) {
            let da = (u2 - u1) * (y3 - y1) - (u3 - u1) * (y2 - y1);
            let db = (x2 - x1) * (u3 - u1) - (x3 - x1) * (u2 - u1);
            let a = da / det;
            let b = db / det;
            let t = u1 - a * x1 - b * y1;
            (a, b, t)
        };
        let (a, b, tx) = solve(to[0].0, to[1].0, to[2].0);
        let (c, d, ty) = solve(to[0].1, to[1].1, to[2].1);
        Ok(Affine2 {
            a,
            b,
            tx,
            c,
            d,
            ty,
        })
    }

    /// Parameter-vector l2 norm of the displacement from the identity.
    pub fn distance_from_identity(&self) -> f64 {
        ((self.a - 1.0).powi(2)
            + self.b.powi(2)
            + self.tx.powi(2)
            + self.c.powi(2)
            + (self.d - 1.0).powi(2)
            + self.ty.powi(2))
        .sqrt()
    }
}

/// Warps `src` into a `width` x `height` output: `out(p) = src(map(p))`,
/// bilinear with replicate borders.
pub fn warp_affine(src: &Raster, map: &Affine2, width: usize, height: usize) -> Raster {
    Raster::from_fn(width, height, |x, y| {
        let (sx, sy) = map.apply(x as f64, y as f64);
        src.sample_bilinear(sx, sy)
    })
}

/// Gradient magnitude via central differences with replicate borders.
pub fn gradient_magnitude(img: &Raster) -> Raster {
    Raster::from_fn(img.width(), img.height(), |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let gx = 0.5 * (img.get_clamped(xi + 1, yi) - img.get_clamped(xi - 1, yi));
        let gy = 0.5 * (img.get_clamped(xi, yi + 1) - img.get_clamped(xi, yi - 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pearson correlation of two equally sized rasters.
///
/// Returns 0.0 when either raster is constant (the convention used by the
/// patch similarity gate).
pub fn pearson_correlation(p: &Raster, q: &Raster) -> Result<f64> {
    if p.width() != q.width() || p.height() != q.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            p.width(),
            p.height(),
            q.width(),
            q.height()
        )));
    }
    let mp = p.mean();
    let mq = q.mean();
    let (mut num, mut dp, mut dq) = (0.0, 0.0, 0.0);
    for (a, b) in p.data().iter().zip(q.data()) {
        let da = a - mp;
        let db = b - mq;
        num += da * db;
        dp += da * da;
        dq += db * db;
    }
    if dp == 0.0 || dq == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (dp.sqrt() * dq.sqrt()))
}

/// Normalized 1-D Gaussian kernel truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter with replicate borders.
pub fn gaussian_filter(img: &Raster, sigma: f64) -> Raster {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut horiz = Raster::new(img.width(), img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let mut acc = 0.0;
            for (i, &w) in kernel.iter().enumerate() {
                acc += w * img.get_clamped(x as isize + i as isize - radius, y as isize);
            }
            horiz.set(x, y, acc);
        }
    }
    let mut out = Raster::new(img.width(), img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let mut acc = 0.0;
            for (i, &w) in kernel.iter().enumerate() {
                acc += w * horiz.get_clamped(x as isize, y as isize + i as isize - radius);
            }
            out.set(x, y, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn noise(seed: u64, w: usize, h: usize) -> Raster {
        let mut r = StdRng::seed_from_u64(seed);
        Raster::from_fn(w, h, |_, _| r.gen_range(0.0..1.0))
    }

    #[test]
    fn bilinear_interpolates_midpoints() {
        let img = Raster::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((img.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-12);
        assert!((img.sample_bilinear(0.0, 0.5) - 1.0).abs() < 1e-12);
        assert!((img.sample_bilinear(0.5, 0.5) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn affine_three_point_solve_roundtrip() {
        let m = Affine2 {
            a: 1.1,
            b: 0.05,
            tx: 3.0,
            c: -0.04,
            d: 0.95,
            ty: -2.0,
        };
        let from = [(10.0, 10.0), (50.0, 12.0), (30.0, 48.0)];
        let to = [m.apply(10.0, 10.0), m.apply(50.0, 12.0), m.apply(30.0, 48.0)];
        let solved = Affine2::from_three_points(&from, &to).unwrap();
        for (x, y) in [(0.0, 0.0), (17.0, 23.0), (61.0, 5.0)] {
            let (ex, ey) = m.apply(x, y);
            let (gx, gy) = solved.apply(x, y);
            assert!((ex - gx).abs() < 1e-9 && (ey - gy).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_collinear_rejected() {
        let from = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        let to = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        assert!(Affine2::from_three_points(&from, &to).is_err());
    }

    #[test]
    fn affine_compose_inverse_is_identity() {
        let m = Affine2 {
            a: 0.9,
            b: 0.1,
            tx: 4.0,
            c: -0.2,
            d: 1.2,
            ty: 1.0,
        };
        let id = m.compose(&m.inverse().unwrap());
        assert!(id.distance_from_identity() < 1e-10);
    }

    #[test]
    fn pearson_self_and_negation() {
        let p = noise(1, 8, 8);
        assert!((pearson_correlation(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        let neg = Raster::from_vec(8, 8, p.data().iter().map(|v| -v).collect()).unwrap();
        assert!((pearson_correlation(&p, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = Raster::new(8, 8);
        assert_eq!(pearson_correlation(&p, &flat).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_kernel_unit_sum() {
        for sigma in [0.5, 1.0, 2.5] {
            let k = gaussian_kernel(sigma);
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_preserves_constant_image() {
        let img = Raster::from_fn(10, 10, |_, _| 0.7);
        let out = gaussian_filter(&img, 1.0);
        for v in out.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_is_involution() {
        let img = noise(9, 7, 5);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn gradient_of_ramp_is_uniform() {
        let img = Raster::from_fn(8, 8, |x, _| 2.0 * x as f64);
        let g = gradient_magnitude(&img);
        // interior: |d/dx| = 2
        for y in 0..8 {
            for x in 1..7 {
                assert!((g.get(x, y) - 2.0).abs() < 1e-12);
            }
        }
    }
}
