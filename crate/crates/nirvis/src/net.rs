//! Per-channel fully-convolutional NIR-to-VIS hallucination networks.
//!
//! Three hour-glass networks translate a NIR raster into the Y, Cb and Cr
//! channels of a VIS estimate. All convolutions are stride 1 with zero
//! padding so the output matches the input size; PReLU activations sit
//! between layers (none after the last), and the luminance network adds a
//! skip connection from the input to the last layer's output.
//!
//! Convolutions are evaluated as a sum of per-kernel-offset GEMMs over a
//! channels-by-pixels matrix, which keeps both forward and backward passes
//! on the fast matrix-multiply path.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Parametric ReLU: `x` for nonnegative `x`, `a * x` otherwise.
#[inline]
pub fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

/// Which color channel a network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Channel {
    Y,
    Cb,
    Cr,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Channel::Y => write!(f, "Y"),
            Channel::Cb => write!(f, "Cb"),
            Channel::Cr => write!(f, "Cr"),
        }
    }
}

/// Whether PReLU slopes are learned per output channel or shared per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PreluMode {
    PerChannel,
    Shared,
}

impl Default for PreluMode {
    fn default() -> Self {
        PreluMode::PerChannel
    }
}

/// A channels-by-pixels activation map (`data` is `channels x (h*w)`,
/// pixel-major columns in row-major scan order).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: DMatrix<f64>,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            data: DMatrix::zeros(channels, h * w),
            h,
            w,
        }
    }

    pub fn from_raster(r: &Raster) -> Self {
        Self {
            data: DMatrix::from_row_slice(1, r.data().len(), r.data()),
            h: r.height(),
            w: r.width(),
        }
    }

    pub fn to_raster(&self) -> Result<Raster> {
        if self.data.nrows() != 1 {
            return Err(Error::Contract(format!(
                "expected single-channel map, got {} channels",
                self.data.nrows()
            )));
        }
        Raster::from_vec(self.w, self.h, self.data.as_slice().to_vec())
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }
}

/// Copies `src` shifted by `(dy, dx)` pixels into `dst`, zero outside:
/// `dst(:, (y, x)) = src(:, (y + dy, x + dx))`.
fn shift_into(src: &DMatrix<f64>, h: usize, w: usize, dy: isize, dx: isize, dst: &mut DMatrix<f64>) {
    dst.fill(0.0);
    let ch = src.nrows();
    let y_start = (-dy).max(0) as usize;
    let y_end = ((h as isize - dy).clamp(0, h as isize)) as usize;
    let x_start = (-dx).max(0) as usize;
    let x_end = ((w as isize - dx).clamp(0, w as isize)) as usize;
    if x_start >= x_end || y_start >= y_end {
        return;
    }
    let run = (x_end - x_start) * ch;
    let src_slice = src.as_slice();
    let dst_slice = dst.as_mut_slice();
    for y_out in y_start..y_end {
        let y_in = (y_out as isize + dy) as usize;
        let x_in = (x_start as isize + dx) as usize;
        let d0 = (y_out * w + x_start) * ch;
        let s0 = (y_in * w + x_in) * ch;
        dst_slice[d0..d0 + run].copy_from_slice(&src_slice[s0..s0 + run]);
    }
}

/// One stride-1, zero-padded convolution with optional PReLU.
///
/// Weights are stored per kernel offset as `out_ch x in_ch` matrices.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `kernel * kernel` matrices, offset index `ky * kernel + kx`.
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<f64>,
    /// PReLU slopes (`out_ch` entries, or one when shared); `None` on the
    /// final layer.
    pub prelu_slopes: Option<Vec<f64>>,
}

impl ConvLayer {
    /// He-style initialization scaled by fan-in; PReLU slopes start at 0.25.
    pub fn he_init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        prelu: Option<PreluMode>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernels must be odd for same-size padding");
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weights = (0..kernel * kernel)
            .map(|_| {
                DMatrix::from_fn(out_ch, in_ch, |_, _| {
                    // Box-Muller from uniform draws keeps the dependency
                    // surface small and the stream reproducible.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
            })
            .collect();
        let prelu_slopes = prelu.map(|mode| match mode {
            PreluMode::PerChannel => vec![0.25; out_ch],
            PreluMode::Shared => vec![0.25],
        });
        Self {
            in_ch,
            out_ch,
            kernel,
            weights,
            bias: vec![0.0; out_ch],
            prelu_slopes,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, prelu: Option<PreluMode>) -> Self {
        let prelu_slopes = prelu.map(|mode| match mode {
            PreluMode::PerChannel => vec![0.25; out_ch],
            PreluMode::Shared => vec![0.25],
        });
        Self {
            in_ch,
            out_ch,
            kernel,
            weights: vec![DMatrix::zeros(out_ch, in_ch); kernel * kernel],
            bias: vec![0.0; out_ch],
            prelu_slopes,
        }
    }

    fn slope(&self, channel: usize) -> f64 {
        let s = self.prelu_slopes.as_ref().expect("layer has prelu");
        if s.len() == 1 {
            s[0]
        } else {
            s[channel]
        }
    }

    /// Pre-activation output (convolution plus bias).
    fn forward_pre(&self, input: &FeatureMap, scratch: &mut DMatrix<f64>) -> FeatureMap {
        debug_assert_eq!(input.channels(), self.in_ch);
        let (h, w) = (input.h, input.w);
        let pad = (self.kernel / 2) as isize;
        let mut out = FeatureMap::zeros(self.out_ch, h, w);
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                shift_into(&input.data, h, w, dy, dx, scratch);
                out.data
                    .gemm(1.0, &self.weights[ky * self.kernel + kx], scratch, 1.0);
            }
        }
        for (c, &b) in self.bias.iter().enumerate() {
            for v in out.data.row_mut(c).iter_mut() {
                *v += b;
            }
        }
        out
    }

    fn activate(&self, pre: &FeatureMap) -> FeatureMap {
        match &self.prelu_slopes {
            None => pre.clone(),
            Some(_) => {
                let mut act = pre.clone();
                for c in 0..self.out_ch {
                    let a = self.slope(c);
                    for v in act.data.row_mut(c).iter_mut() {
                        if *v < 0.0 {
                            *v *= a;
                        }
                    }
                }
                act
            }
        }
    }
}

/// Gradients for one layer, shaped like its parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<f64>,
    pub prelu_slopes: Option<Vec<f64>>,
}

impl LayerGrads {
    fn zeros_like(layer: &ConvLayer) -> Self {
        Self {
            weights: vec![DMatrix::zeros(layer.out_ch, layer.in_ch); layer.kernel * layer.kernel],
            bias: vec![0.0; layer.out_ch],
            prelu_slopes: layer.prelu_slopes.as_ref().map(|s| vec![0.0; s.len()]),
        }
    }
}

/// Gradients for every layer of a network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    fn zeros_like(net: &HallucinationNet) -> Self {
        Self {
            layers: net.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    fn accumulate(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (wa, wb) in a.weights.iter_mut().zip(&b.weights) {
                *wa += wb;
            }
            for (ba, bb) in a.bias.iter_mut().zip(&b.bias) {
                *ba += bb;
            }
            if let (Some(sa), Some(sb)) = (a.prelu_slopes.as_mut(), b.prelu_slopes.as_ref()) {
                for (x, y) in sa.iter_mut().zip(sb) {
                    *x += y;
                }
            }
        }
    }
}

/// One per-channel hallucination network.
#[derive(Debug, Clone)]
pub struct HallucinationNet {
    pub channel: Channel,
    pub layers: Vec<ConvLayer>,
    /// Input added elementwise to the final layer output (Y network only).
    pub skip: bool,
    trained: bool,
}

/// Channel plans: (layer count, first/last filters, intermediate filters,
/// kernel size, skip).
fn architecture(channel: Channel) -> (usize, usize, usize, usize, bool) {
    match channel {
        Channel::Y => (11, 148, 36, 11, true),
        Channel::Cb => (7, 66, 32, 3, false),
        Channel::Cr => (8, 148, 48, 5, false),
    }
}

impl HallucinationNet {
    /// Builds the architecture for `channel` with He-initialized weights.
    pub fn new(channel: Channel, prelu_mode: PreluMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (depth, deep, narrow, kernel, skip) = architecture(channel);
        let mut layers = Vec::with_capacity(depth);
        // Hour-glass: deep first layer, narrow middle, deep next-to-last,
        // single-channel output layer without activation.
        layers.push(ConvLayer::he_init(1, deep, kernel, Some(prelu_mode), &mut rng));
        layers.push(ConvLayer::he_init(deep, narrow, kernel, Some(prelu_mode), &mut rng));
        for _ in 0..depth - 4 {
            layers.push(ConvLayer::he_init(narrow, narrow, kernel, Some(prelu_mode), &mut rng));
        }
        layers.push(ConvLayer::he_init(narrow, deep, kernel, Some(prelu_mode), &mut rng));
        layers.push(ConvLayer::he_init(deep, 1, kernel, None, &mut rng));
        Self {
            channel,
            layers,
            skip,
            trained: false,
        }
    }

    /// Same architecture with all weights and biases zero (tests).
    pub fn zeroed(channel: Channel, prelu_mode: PreluMode) -> Self {
        let (depth, deep, narrow, kernel, skip) = architecture(channel);
        let mut layers = Vec::with_capacity(depth);
        layers.push(ConvLayer::zeros(1, deep, kernel, Some(prelu_mode)));
        layers.push(ConvLayer::zeros(deep, narrow, kernel, Some(prelu_mode)));
        for _ in 0..depth - 4 {
            layers.push(ConvLayer::zeros(narrow, narrow, kernel, Some(prelu_mode)));
        }
        layers.push(ConvLayer::zeros(narrow, deep, kernel, Some(prelu_mode)));
        layers.push(ConvLayer::zeros(deep, 1, kernel, None));
        Self {
            channel,
            layers,
            skip,
            trained: false,
        }
    }

    /// Arbitrary layer stack, for small test networks.
    pub fn custom(channel: Channel, layers: Vec<ConvLayer>, skip: bool) -> Self {
        Self {
            channel,
            layers,
            skip,
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn max_kernel(&self) -> usize {
        self.layers.iter().map(|l| l.kernel).max().unwrap_or(1)
    }

    /// Runs the network on a raster of any size at or above the largest
    /// kernel; output matches the input size.
    pub fn forward(&self, nir: &Raster) -> Result<Raster> {
        if nir.width() < self.max_kernel() || nir.height() < self.max_kernel() {
            return Err(Error::Contract(format!(
                "input {}x{} smaller than largest kernel {}",
                nir.width(),
                nir.height(),
                self.max_kernel()
            )));
        }
        let input = FeatureMap::from_raster(nir);
        let npix = input.h * input.w;
        let mut cur = input.clone();
        for layer in &self.layers {
            let mut scratch = DMatrix::zeros(layer.in_ch, npix);
            let pre = layer.forward_pre(&cur, &mut scratch);
            cur = layer.activate(&pre);
        }
        if self.skip {
            cur.data += &input.data;
        }
        cur.to_raster()
    }

    /// Forward pass keeping per-layer caches for backpropagation.
    fn forward_cached(&self, input: &FeatureMap) -> (Vec<FeatureMap>, Vec<FeatureMap>, FeatureMap) {
        let npix = input.h * input.w;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for layer in &self.layers {
            let mut scratch = DMatrix::zeros(layer.in_ch, npix);
            let pre = layer.forward_pre(&cur, &mut scratch);
            let act = layer.activate(&pre);
            inputs.push(cur);
            pres.push(pre);
            cur = act;
        }
        if self.skip {
            cur.data += &input.data;
        }
        (inputs, pres, cur)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.len() * l.out_ch * l.in_ch
                    + l.bias.len()
                    + l.prelu_slopes.as_ref().map_or(0, |s| s.len())
            })
            .sum()
    }

    /// Flat parameter access used by finite-difference checks and the Adam
    /// update (layer order: weights by offset, then bias, then slopes).
    pub fn param(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            let per_mat = l.out_ch * l.in_ch;
            let nw = l.weights.len() * per_mat;
            if index < nw {
                return l.weights[index / per_mat].as_slice()[index % per_mat];
            }
            index -= nw;
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
            if let Some(s) = &l.prelu_slopes {
                if index < s.len() {
                    return s[index];
                }
                index -= s.len();
            }
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            let per_mat = l.out_ch * l.in_ch;
            let nw = l.weights.len() * per_mat;
            if index < nw {
                l.weights[index / per_mat].as_mut_slice()[index % per_mat] = value;
                return;
            }
            index -= nw;
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
            if let Some(s) = &mut l.prelu_slopes {
                if index < s.len() {
                    s[index] = value;
                    return;
                }
                index -= s.len();
            }
        }
        panic!("parameter index out of range");
    }
}

/// Mean halved squared error: `0.5 * sum((pred - target)^2) / batch`.
pub fn euclidean_loss(pred: &Raster, target: &Raster) -> Result<f64> {
    euclidean_loss_batched(pred, target, 1)
}

pub fn euclidean_loss_batched(pred: &Raster, target: &Raster, batch: usize) -> Result<f64> {
    if pred.width() != target.width() || pred.height() != target.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(0.5 * sum / batch as f64)
}

/// Loss and exact parameter gradients of [`euclidean_loss`] over a batch of
/// (input, target) raster pairs.
pub fn loss_and_grads(
    net: &HallucinationNet,
    batch: &[(&Raster, &Raster)],
) -> Result<(f64, NetGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let batch_size = batch.len();
    let mut total_loss = 0.0;
    let mut grads = NetGrads::zeros_like(net);

    for &(input_raster, target) in batch {
        let input = FeatureMap::from_raster(input_raster);
        let (inputs, pres, pred) = net.forward_cached(&input);
        let pred_raster = pred.to_raster()?;
        total_loss += euclidean_loss_batched(&pred_raster, target, batch_size)?;

        // dL/dpred, already divided by the batch size
        let npix = input.h * input.w;
        let target_map = FeatureMap::from_raster(target);
        let mut grad_out = FeatureMap {
            data: (&pred.data - &target_map.data) / batch_size as f64,
            h: input.h,
            w: input.w,
        };
        // The skip path feeds dL/dpred into the input gradient, which is
        // not attached to any parameter; only the conv path matters here.

        let mut sample = NetGrads::zeros_like(net);
        for (li, layer) in net.layers.iter().enumerate().rev() {
            let pre = &pres[li];
            let layer_input = &inputs[li];
            let lg = &mut sample.layers[li];

            // through the activation
            let mut grad_pre = grad_out;
            if layer.prelu_slopes.is_some() {
                let shared = layer.prelu_slopes.as_ref().unwrap().len() == 1;
                for c in 0..layer.out_ch {
                    let a = layer.slope(c);
                    let slot = if shared { 0 } else { c };
                    let mut slope_grad = 0.0;
                    for (g, &p) in grad_pre
                        .data
                        .row_mut(c)
                        .iter_mut()
                        .zip(pre.data.row(c).iter())
                    {
                        if p < 0.0 {
                            slope_grad += *g * p;
                            *g *= a;
                        }
                    }
                    lg.prelu_slopes.as_mut().unwrap()[slot] += slope_grad;
                }
            }

            // bias gradient
            for c in 0..layer.out_ch {
                lg.bias[c] = grad_pre.data.row(c).sum();
            }

            // weight gradients: dW_off = grad_pre . shift(input, off)^T,
            // computed as (shift(input, off) . grad_pre^T)^T with the
            // transpose of grad_pre taken once per layer.
            let pad = (layer.kernel / 2) as isize;
            let grad_pre_t = grad_pre.data.transpose();
            let mut in_scratch = DMatrix::zeros(layer.in_ch, npix);
            for ky in 0..layer.kernel {
                for kx in 0..layer.kernel {
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    shift_into(&layer_input.data, input.h, input.w, dy, dx, &mut in_scratch);
                    let mut wt = DMatrix::zeros(layer.in_ch, layer.out_ch);
                    wt.gemm(1.0, &in_scratch, &grad_pre_t, 0.0);
                    lg.weights[ky * layer.kernel + kx] += wt.transpose();
                }
            }

            // gradient w.r.t. the layer input:
            // din = sum_off W_off^T . shift(grad_pre, -off)
            if li > 0 {
                let mut din = FeatureMap::zeros(layer.in_ch, input.h, input.w);
                let mut out_scratch = DMatrix::zeros(layer.out_ch, npix);
                for ky in 0..layer.kernel {
                    for kx in 0..layer.kernel {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        shift_into(&grad_pre.data, input.h, input.w, -dy, -dx, &mut out_scratch);
                        let w_t = layer.weights[ky * layer.kernel + kx].transpose();
                        din.data.gemm(1.0, &w_t, &out_scratch, 1.0);
                    }
                }
                grad_out = din;
            } else {
                grad_out = FeatureMap::zeros(1, 1, 1); // unused
            }
        }
        grads.accumulate(&sample);
    }
    Ok((total_loss, grads))
}

const WEIGHTS_MAGIC: &[u8; 4] = b"NVNW";
const WEIGHTS_VERSION: u32 = 1;

/// Saves network weights as a versioned binary container (32-bit floats).
pub fn save_weights(path: &std::path::Path, net: &HallucinationNet) -> Result<()> {
    use std::io::Write as _;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let channel_tag: u8 = match net.channel {
        Channel::Y => 0,
        Channel::Cb => 1,
        Channel::Cr => 2,
    };
    w.write_all(&[channel_tag, net.skip as u8, net.trained as u8])?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for l in &net.layers {
        w.write_all(&(l.in_ch as u32).to_le_bytes())?;
        w.write_all(&(l.out_ch as u32).to_le_bytes())?;
        w.write_all(&(l.kernel as u32).to_le_bytes())?;
        let slopes = l.prelu_slopes.as_deref().unwrap_or(&[]);
        w.write_all(&(slopes.len() as u32).to_le_bytes())?;
        for m in &l.weights {
            for v in m.as_slice() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        for v in &l.bias {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in slopes {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a weights container written by [`save_weights`].
pub fn load_weights(path: &std::path::Path) -> Result<HallucinationNet> {
    use std::io::Read as _;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated file"))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::format(path, "not a network weights file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::format(path, "truncated file"))?;
    let version = u32::from_le_bytes(b4);
    if version != WEIGHTS_VERSION {
        return Err(Error::format(path, format!("unknown version {version}")));
    }
    let mut b3 = [0u8; 3];
    r.read_exact(&mut b3)
        .map_err(|_| Error::format(path, "truncated file"))?;
    let channel = match b3[0] {
        0 => Channel::Y,
        1 => Channel::Cb,
        2 => Channel::Cr,
        other => return Err(Error::format(path, format!("unknown channel tag {other}"))),
    };
    let skip = b3[1] != 0;
    let trained = b3[2] != 0;
    r.read_exact(&mut b4)
        .map_err(|_| Error::format(path, "truncated file"))?;
    let depth = u32::from_le_bytes(b4) as usize;
    if depth == 0 || depth > 64 {
        return Err(Error::format(path, format!("implausible layer count {depth}")));
    }
    let read_f32 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<f64> {
        let mut fb = [0u8; 4];
        r.read_exact(&mut fb)
            .map_err(|_| Error::format(path, "truncated file"))?;
        Ok(f32::from_le_bytes(fb) as f64)
    };
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut dims = [0u32; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut b4)
                .map_err(|_| Error::format(path, "truncated file"))?;
            *d = u32::from_le_bytes(b4);
        }
        let (in_ch, out_ch, kernel, n_slopes) =
            (dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        if in_ch == 0 || out_ch == 0 || kernel == 0 || kernel % 2 == 0 || kernel > 63 {
            return Err(Error::format(path, "implausible layer shape"));
        }
        let mut weights = Vec::with_capacity(kernel * kernel);
        for _ in 0..kernel * kernel {
            let mut m = DMatrix::zeros(out_ch, in_ch);
            for v in m.as_mut_slice() {
                *v = read_f32(&mut r)?;
            }
            weights.push(m);
        }
        let mut bias = vec![0.0; out_ch];
        for v in bias.iter_mut() {
            *v = read_f32(&mut r)?;
        }
        let prelu_slopes = if n_slopes > 0 {
            let mut s = vec![0.0; n_slopes];
            for v in s.iter_mut() {
                *v = read_f32(&mut r)?;
            }
            Some(s)
        } else {
            None
        };
        layers.push(ConvLayer {
            in_ch,
            out_ch,
            kernel,
            weights,
            bias,
            prelu_slopes,
        });
    }
    Ok(HallucinationNet {
        channel,
        layers,
        skip,
        trained,
    })
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter slice.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update on a parameter slice.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Adam moments mirroring a network's parameters.
#[derive(Debug)]
pub struct NetOptimizer {
    hyper: AdamHyper,
    states: Vec<Vec<AdamState>>,
}

impl NetOptimizer {
    pub fn new(net: &HallucinationNet, hyper: AdamHyper) -> Self {
        let states = net
            .layers
            .iter()
            .map(|l| {
                let mut s = Vec::new();
                for w in &l.weights {
                    s.push(AdamState::new(w.len()));
                }
                s.push(AdamState::new(l.bias.len()));
                if let Some(slopes) = &l.prelu_slopes {
                    s.push(AdamState::new(slopes.len()));
                }
                s
            })
            .collect();
        Self { hyper, states }
    }

    pub fn step(&mut self, net: &mut HallucinationNet, grads: &NetGrads) {
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let lg = &grads.layers[li];
            let states = &mut self.states[li];
            let mut si = 0;
            for (w, gw) in layer.weights.iter_mut().zip(&lg.weights) {
                adam_step(
                    w.as_mut_slice(),
                    gw.as_slice(),
                    &mut states[si],
                    &self.hyper,
                );
                si += 1;
            }
            adam_step(&mut layer.bias, &lg.bias, &mut states[si], &self.hyper);
            si += 1;
            if let (Some(s), Some(gs)) = (layer.prelu_slopes.as_mut(), lg.prelu_slopes.as_ref()) {
                adam_step(s, gs, &mut states[si], &self.hyper);
            }
        }
    }
}

/// Training controls.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hyper: AdamHyper,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_iterations: Option<usize>,
    /// Optional early stop once the running batch loss falls at or below
    /// this fraction of the first batch loss.
    pub stop_loss_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            hyper: AdamHyper::default(),
            max_iterations: None,
            stop_loss_ratio: None,
        }
    }
}

/// Per-epoch and per-iteration loss record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub iteration_losses: Vec<f64>,
    pub iterations: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// CSV with header `epoch,mean_loss`.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Minibatch training loop over (input, target) raster pairs, deterministic
/// under a fixed seed.
pub fn train(
    net: &mut HallucinationNet,
    pairs: &[(Raster, Raster)],
    config: &TrainConfig,
) -> Result<TrainLog> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = NetOptimizer::new(net, config.hyper);
    let mut log = TrainLog {
        epoch_losses: Vec::new(),
        iteration_losses: Vec::new(),
        iterations: 0,
        stopped_early: false,
    };
    let mut first_loss: Option<f64> = None;

    'epochs: for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        // Fisher-Yates with the run's own stream
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(&Raster, &Raster)> =
                chunk.iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
            let (loss, grads) = loss_and_grads(net, &batch)?;
            optimizer.step(net, &grads);
            log.iterations += 1;
            log.iteration_losses.push(loss);
            epoch_loss += loss;
            epoch_batches += 1;
            let first = *first_loss.get_or_insert(loss);
            if let Some(ratio) = config.stop_loss_ratio {
                if loss <= ratio * first {
                    log.stopped_early = true;
                    log.epoch_losses.push(epoch_loss / epoch_batches as f64);
                    break 'epochs;
                }
            }
            if let Some(cap) = config.max_iterations {
                if log.iterations >= cap {
                    log.stopped_early = true;
                    log.epoch_losses.push(epoch_loss / epoch_batches as f64);
                    break 'epochs;
                }
            }
        }
        log.epoch_losses.push(epoch_loss / epoch_batches as f64);
    }
    if config.epochs > 0 {
        net.mark_trained();
    }
    Ok(log)
}
