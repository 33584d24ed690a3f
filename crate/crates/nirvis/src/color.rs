//! Full-range BT.601 conversion between RGB and YCbCr rasters in [0, 1].

use crate::error::{Error, Result};
use crate::raster::Raster;

fn check_same_size(a: &Raster, b: &Raster, c: &Raster) -> Result<()> {
    if a.width() != b.width()
        || a.width() != c.width()
        || a.height() != b.height()
        || a.height() != c.height()
    {
        return Err(Error::DimensionMismatch(
            "channel rasters differ in size".into(),
        ));
    }
    Ok(())
}

/// RGB -> (Y, Cb, Cr), all channels in [0, 1], chroma centered at 0.5.
pub fn rgb_to_ycbcr(r: &Raster, g: &Raster, b: &Raster) -> Result<(Raster, Raster, Raster)> {
    check_same_size(r, g, b)?;
    let n = r.data().len();
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        let (rv, gv, bv) = (r.data()[i], g.data()[i], b.data()[i]);
        let yv = 0.299 * rv + 0.587 * gv + 0.114 * bv;
        y.push(yv);
        cb.push(0.5 + (bv - yv) / 1.772);
        cr.push(0.5 + (rv - yv) / 1.402);
    }
    Ok((
        Raster::from_vec(r.width(), r.height(), y)?,
        Raster::from_vec(r.width(), r.height(), cb)?,
        Raster::from_vec(r.width(), r.height(), cr)?,
    ))
}

/// (Y, Cb, Cr) -> RGB, unclamped (exact inverse of [`rgb_to_ycbcr`]).
pub fn ycbcr_to_rgb(y: &Raster, cb: &Raster, cr: &Raster) -> Result<(Raster, Raster, Raster)> {
    check_same_size(y, cb, cr)?;
    let n = y.data().len();
    let mut r = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let yv = y.data()[i];
        let cbv = cb.data()[i] - 0.5;
        let crv = cr.data()[i] - 0.5;
        let rv = yv + 1.402 * crv;
        let bv = yv + 1.772 * cbv;
        let gv = (yv - 0.299 * rv - 0.114 * bv) / 0.587;
        r.push(rv);
        g.push(gv);
        b.push(bv);
    }
    Ok((
        Raster::from_vec(y.width(), y.height(), r)?,
        Raster::from_vec(y.width(), y.height(), g)?,
        Raster::from_vec(y.width(), y.height(), b)?,
    ))
}

/// Clamps every sample to [0, 1] in place.
pub fn clamp_unit(img: &mut Raster) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn const_raster(v: f64) -> Raster {
        Raster::from_fn(4, 4, |_, _| v)
    }

    #[test]
    fn white_maps_to_unit_luma_neutral_chroma() {
        let (y, cb, cr) =
            rgb_to_ycbcr(&const_raster(1.0), &const_raster(1.0), &const_raster(1.0)).unwrap();
        for i in 0..16 {
            assert!((y.data()[i] - 1.0).abs() < 1e-12);
            assert!((cb.data()[i] - 0.5).abs() < 1e-12);
            assert!((cr.data()[i] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn black_maps_to_zero_luma_neutral_chroma() {
        let (y, cb, cr) =
            rgb_to_ycbcr(&const_raster(0.0), &const_raster(0.0), &const_raster(0.0)).unwrap();
        for i in 0..16 {
            assert!(y.data()[i].abs() < 1e-12);
            assert!((cb.data()[i] - 0.5).abs() < 1e-12);
            assert!((cr.data()[i] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_within_1e6() {
        let mut rng = StdRng::seed_from_u64(21);
        let r = Raster::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let g = Raster::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let b = Raster::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let (y, cb, cr) = rgb_to_ycbcr(&r, &g, &b).unwrap();
        let (r2, g2, b2) = ycbcr_to_rgb(&y, &cb, &cr).unwrap();
        for ((a, b_), (c, d)) in r
            .data()
            .iter()
            .zip(r2.data())
            .zip(g.data().iter().zip(g2.data()))
        {
            assert!((a - b_).abs() < 1e-6);
            assert!((c - d).abs() < 1e-6);
        }
        for (a, b_) in b.data().iter().zip(b2.data()) {
            assert!((a - b_).abs() < 1e-6);
        }
    }
}
