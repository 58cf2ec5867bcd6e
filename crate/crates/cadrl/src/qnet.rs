//! Small convolutional network mapping an RGB observation to an M x M grid of
//! per-action scores (logistic head), or to a class distribution (softmax
//! head). Written from scratch: forward, exact reverse-mode gradients, and
//! momentum SGD. Parameters are stored as f32; all arithmetic runs through f64
//! activations and accumulators so finite-difference checks are clean.

use crate::render::ImageBuf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss mask selects no bins")]
    EmptyMask,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit this configuration: {0}")]
    ArchMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One conv layer: `out_ch` filters of size `kernel` x `kernel`, zero padding
/// kernel/2, followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Dense layer to m*m logits, read through a logistic.
    ScoreMap { m: usize },
    /// Dense layer to `classes` logits, read through a softmax.
    Softmax { classes: usize },
}

/// Network architecture descriptor; stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_h: usize,
    pub in_w: usize,
    pub in_ch: usize,
    pub convs: Vec<ConvSpec>,
    pub head: HeadKind,
}

impl ArchSpec {
    /// Conventional trunk for a square observation: three stride-2 convs.
    pub fn for_observation(side: usize, channels: &[usize], head: HeadKind) -> ArchSpec {
        ArchSpec {
            in_h: side,
            in_w: side,
            in_ch: 3,
            convs: channels.iter().map(|&c| ConvSpec { out_ch: c, kernel: 3, stride: 2 }).collect(),
            head,
        }
    }

    /// (channels, height, width) after each conv layer, starting at the input.
    pub fn feature_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![(self.in_ch, self.in_h, self.in_w)];
        for c in &self.convs {
            let (_, h, w) = dims[dims.len() - 1];
            let p = c.kernel / 2;
            let oh = (h + 2 * p - c.kernel) / c.stride + 1;
            let ow = (w + 2 * p - c.kernel) / c.stride + 1;
            dims.push((c.out_ch, oh, ow));
        }
        dims
    }

    pub fn flat_dim(&self) -> usize {
        let (c, h, w) = *self.feature_dims().last().unwrap();
        c * h * w
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::ScoreMap { m } => m * m,
            HeadKind::Softmax { classes } => classes,
        }
    }

    /// Layer-ordered parameter tensor shapes with their checkpoint names.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let dims = self.feature_dims();
        let mut specs = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let in_ch = dims[i].0;
            specs.push((format!("conv{i}.w"), vec![c.out_ch, in_ch, c.kernel, c.kernel]));
            specs.push((format!("conv{i}.b"), vec![c.out_ch]));
        }
        specs.push(("head.w".into(), vec![self.out_dim(), self.flat_dim()]));
        specs.push(("head.b".into(), vec![self.out_dim()]));
        specs
    }
}

/// Dense tensor of f32 values with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }
}

/// Gradient tensors mirror the parameter shapes but accumulate in f64.
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros_like(params: &NetParams) -> Grads {
        Grads { tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }

    /// Elementwise sum, used when accumulating per-sample gradients in a fixed order.
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub arch: ArchSpec,
    pub tensors: Vec<Tensor>,
}

/// M x M grid of probabilities in (0, 1), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub m: usize,
    pub data: Vec<f32>,
}

impl ScoreMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.m + col]
    }
}

/// Fan-in-scaled uniform init for conv filters, balanced uniform for the head,
/// zero biases. Deterministic in the seed.
pub fn init_params(arch: &ArchSpec, seed: u64) -> NetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = arch.feature_dims();
    let mut tensors = Vec::new();
    for (i, c) in arch.convs.iter().enumerate() {
        let in_ch = dims[i].0;
        let fan_in = (in_ch * c.kernel * c.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut w = Tensor::zeros(vec![c.out_ch, in_ch, c.kernel, c.kernel]);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-bound..bound) as f32;
        }
        tensors.push(w);
        tensors.push(Tensor::zeros(vec![c.out_ch]));
    }
    let (fan_in, fan_out) = (arch.flat_dim() as f64, arch.out_dim() as f64);
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let mut w = Tensor::zeros(vec![arch.out_dim(), arch.flat_dim()]);
    for v in w.data.iter_mut() {
        *v = rng.gen_range(-bound..bound) as f32;
    }
    tensors.push(w);
    tensors.push(Tensor::zeros(vec![arch.out_dim()]));
    NetParams { arch: arch.clone(), tensors }
}

fn check_image(arch: &ArchSpec, image: &ImageBuf) -> Result<(), NetError> {
    if image.width != arch.in_w || image.height != arch.in_h {
        return Err(NetError::Shape(format!(
            "image {}x{} does not match network input {}x{}",
            image.width, image.height, arch.in_w, arch.in_h
        )));
    }
    Ok(())
}

/// Interleaved RGB rows -> channel-major f64 planes, centered to [-0.5, 0.5].
fn image_to_planes(arch: &ArchSpec, image: &ImageBuf) -> Vec<f64> {
    let (h, w) = (arch.in_h, arch.in_w);
    let mut x = vec![0.0f64; 3 * h * w];
    for row in 0..h {
        for col in 0..w {
            let px = (row * w + col) * 3;
            for ch in 0..3 {
                x[ch * h * w + row * w + col] = image.data[px + ch] as f64 - 0.5;
            }
        }
    }
    x
}

struct ForwardCache {
    /// acts[0] is the centered input; acts[i+1] the post-ReLU output of conv i.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn conv_forward(
    x: &[f64],
    (ic, ih, iw): (usize, usize, usize),
    (oc, oh, ow): (usize, usize, usize),
    w: &[f32],
    b: &[f32],
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let p = kernel / 2;
    let mut y = vec![0.0f64; oc * oh * ow];
    for o in 0..oc {
        let w_o = &w[o * ic * kernel * kernel..(o + 1) * ic * kernel * kernel];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o] as f64;
                for c in 0..ic {
                    let x_c = &x[c * ih * iw..(c + 1) * ih * iw];
                    let w_c = &w_o[c * kernel * kernel..(c + 1) * kernel * kernel];
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - p as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let x_row = &x_c[iy as usize * iw..(iy as usize + 1) * iw];
                        let w_row = &w_c[ky * kernel..(ky + 1) * kernel];
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - p as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            acc += w_row[kx] as f64 * x_row[ix as usize];
                        }
                    }
                }
                // ReLU fused here.
                y[o * oh * ow + oy * ow + ox] = acc.max(0.0);
            }
        }
    }
    y
}

fn forward_cached(params: &NetParams, image: &ImageBuf) -> Result<ForwardCache, NetError> {
    check_image(&params.arch, image)?;
    let dims = params.arch.feature_dims();
    let mut acts = vec![image_to_planes(&params.arch, image)];
    for (i, c) in params.arch.convs.iter().enumerate() {
        let y = conv_forward(
            &acts[i],
            dims[i],
            dims[i + 1],
            &params.tensors[2 * i].data,
            &params.tensors[2 * i + 1].data,
            c.kernel,
            c.stride,
        );
        acts.push(y);
    }
    let nl = params.arch.convs.len();
    let (hw, hb) = (&params.tensors[2 * nl].data, &params.tensors[2 * nl + 1].data);
    let feat = &acts[nl];
    let out = params.arch.out_dim();
    let mut logits = vec![0.0f64; out];
    for j in 0..out {
        let w_j = &hw[j * feat.len()..(j + 1) * feat.len()];
        let mut acc = hb[j] as f64;
        for (wv, xv) in w_j.iter().zip(feat.iter()) {
            acc += *wv as f64 * xv;
        }
        logits[j] = acc;
    }
    Ok(ForwardCache { acts, logits })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-action scores for a score-map network.
pub fn forward(params: &NetParams, image: &ImageBuf) -> Result<ScoreMap, NetError> {
    let m = match params.arch.head {
        HeadKind::ScoreMap { m } => m,
        HeadKind::Softmax { .. } => {
            return Err(NetError::Shape("forward requires a score-map head".into()))
        }
    };
    let cache = forward_cached(params, image)?;
    let data = cache.logits.iter().map(|&z| sigmoid(z) as f32).collect();
    Ok(ScoreMap { m, data })
}

/// Class probabilities for a softmax network.
pub fn forward_class_probs(params: &NetParams, image: &ImageBuf) -> Result<Vec<f64>, NetError> {
    match params.arch.head {
        HeadKind::Softmax { .. } => {}
        HeadKind::ScoreMap { .. } => {
            return Err(NetError::Shape("forward_class_probs requires a softmax head".into()))
        }
    }
    let cache = forward_cached(params, image)?;
    Ok(softmax(&cache.logits))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Activations of the last conv layer, for inspection and tests.
pub fn trunk_features(params: &NetParams, image: &ImageBuf) -> Result<(Vec<f64>, (usize, usize, usize)), NetError> {
    let cache = forward_cached(params, image)?;
    let dims = params.arch.feature_dims();
    let last = dims[params.arch.convs.len()];
    Ok((cache.acts[params.arch.convs.len()].clone(), last))
}

/// Which ReLU units fired, over all conv layers in order. Finite-difference
/// gradient checks are only meaningful where this signature is stable.
pub fn activation_gates(params: &NetParams, image: &ImageBuf) -> Result<Vec<bool>, NetError> {
    let cache = forward_cached(params, image)?;
    let mut gates = Vec::new();
    for act in &cache.acts[1..] {
        gates.extend(act.iter().map(|&v| v > 0.0));
    }
    Ok(gates)
}

const PROB_EPS: f64 = 1e-7;

/// Masked mean binary cross-entropy against soft targets, from probabilities.
/// Probabilities are clamped to [eps, 1-eps]. Errors if the mask is all zero
/// or the shapes disagree.
pub fn masked_bce(pred: &ScoreMap, target: &[f32], mask: &[f32]) -> Result<f64, NetError> {
    if target.len() != pred.data.len() || mask.len() != pred.data.len() {
        return Err(NetError::Shape(format!(
            "score map has {} bins, target {} and mask {}",
            pred.data.len(),
            target.len(),
            mask.len()
        )));
    }
    let mask_sum: f64 = mask.iter().map(|&m| m as f64).sum();
    if mask_sum <= 0.0 {
        return Err(NetError::EmptyMask);
    }
    let mut acc = 0.0f64;
    for i in 0..target.len() {
        let p = (pred.data[i] as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = target[i] as f64;
        acc += mask[i] as f64 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(-acc / mask_sum)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One supervised example: dense per-bin soft targets with a validity mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: ImageBuf,
    pub target: Vec<f32>,
    pub mask: Vec<f32>,
}

fn check_sample(params: &NetParams, s: &TrainSample) -> Result<f64, NetError> {
    let out = params.arch.out_dim();
    if s.target.len() != out || s.mask.len() != out {
        return Err(NetError::Shape(format!(
            "sample target/mask ({}, {}) do not match head size {}",
            s.target.len(),
            s.mask.len(),
            out
        )));
    }
    let mask_sum: f64 = s.mask.iter().map(|&m| m as f64).sum();
    if mask_sum <= 0.0 {
        return Err(NetError::EmptyMask);
    }
    Ok(mask_sum)
}

/// Training loss of one sample (masked mean BCE computed from logits).
pub fn sample_loss(params: &NetParams, s: &TrainSample) -> Result<f64, NetError> {
    let mask_sum = check_sample(params, s)?;
    let cache = forward_cached(params, &s.image)?;
    let mut acc = 0.0f64;
    for i in 0..s.target.len() {
        let (z, y) = (cache.logits[i], s.target[i] as f64);
        acc += s.mask[i] as f64 * (softplus(z) - y * z);
    }
    Ok(acc / mask_sum)
}

/// Loss and exact parameter gradients for one sample.
pub fn sample_loss_and_grads(params: &NetParams, s: &TrainSample) -> Result<(f64, Grads), NetError> {
    let mask_sum = check_sample(params, s)?;
    let cache = forward_cached(params, &s.image)?;
    let mut loss = 0.0f64;
    let mut dz = vec![0.0f64; s.target.len()];
    for i in 0..s.target.len() {
        let (z, y) = (cache.logits[i], s.target[i] as f64);
        let m = s.mask[i] as f64;
        loss += m * (softplus(z) - y * z);
        dz[i] = m * (sigmoid(z) - y) / mask_sum;
    }
    let grads = backward_from_head(params, &cache, &dz);
    Ok((loss / mask_sum, grads))
}

/// Cross-entropy loss of one labeled image for a softmax network.
pub fn class_loss(params: &NetParams, image: &ImageBuf, class: usize) -> Result<f64, NetError> {
    let cache = forward_cached(params, image)?;
    let p = softmax(&cache.logits);
    if class >= p.len() {
        return Err(NetError::Shape(format!("class {class} out of range {}", p.len())));
    }
    Ok(-(p[class].max(1e-300)).ln())
}

/// Loss and gradients for one labeled image, softmax cross-entropy.
pub fn class_loss_and_grads(params: &NetParams, image: &ImageBuf, class: usize) -> Result<(f64, Grads), NetError> {
    let cache = forward_cached(params, image)?;
    let p = softmax(&cache.logits);
    if class >= p.len() {
        return Err(NetError::Shape(format!("class {class} out of range {}", p.len())));
    }
    let loss = -(p[class].max(1e-300)).ln();
    let mut dz = p;
    dz[class] -= 1.0;
    let grads = backward_from_head(params, &cache, &dz);
    Ok((loss, grads))
}

/// Reverse-mode pass given dLoss/dlogits.
fn backward_from_head(params: &NetParams, cache: &ForwardCache, dz_head: &[f64]) -> Grads {
    let arch = &params.arch;
    let dims = arch.feature_dims();
    let nl = arch.convs.len();
    let mut grads = Grads::zeros_like(params);

    let feat = &cache.acts[nl];
    let hw = &params.tensors[2 * nl].data;
    let mut dfeat = vec![0.0f64; feat.len()];
    {
        let (dw, rest) = grads.tensors.split_at_mut(2 * nl + 1);
        let dw = &mut dw[2 * nl];
        let db = &mut rest[0];
        for (j, &g) in dz_head.iter().enumerate() {
            db[j] += g;
            let w_j = &hw[j * feat.len()..(j + 1) * feat.len()];
            let dw_j = &mut dw[j * feat.len()..(j + 1) * feat.len()];
            for f in 0..feat.len() {
                dw_j[f] += g * feat[f];
                dfeat[f] += w_j[f] as f64 * g;
            }
        }
    }

    // Walk the conv stack backwards. dfeat holds dLoss/d(post-ReLU activation).
    let mut da = dfeat;
    for i in (0..nl).rev() {
        let c = arch.convs[i];
        let (ic, ih, iw) = dims[i];
        let (oc, oh, ow) = dims[i + 1];
        let p = c.kernel / 2;
        let x = &cache.acts[i];
        let y = &cache.acts[i + 1];
        let w = &params.tensors[2 * i].data;
        let mut dx = vec![0.0f64; x.len()];
        {
            let (dwt, rest) = grads.tensors.split_at_mut(2 * i + 1);
            let dw = &mut dwt[2 * i];
            let db = &mut rest[0];
            for o in 0..oc {
                let w_o = &w[o * ic * c.kernel * c.kernel..(o + 1) * ic * c.kernel * c.kernel];
                let dw_o = &mut dw[o * ic * c.kernel * c.kernel..(o + 1) * ic * c.kernel * c.kernel];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let oi = o * oh * ow + oy * ow + ox;
                        // ReLU gate.
                        if y[oi] <= 0.0 {
                            continue;
                        }
                        let g = da[oi];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for ci in 0..ic {
                            let x_c = &x[ci * ih * iw..(ci + 1) * ih * iw];
                            let dx_c = &mut dx[ci * ih * iw..(ci + 1) * ih * iw];
                            let w_c = &w_o[ci * c.kernel * c.kernel..(ci + 1) * c.kernel * c.kernel];
                            let dw_c = &mut dw_o[ci * c.kernel * c.kernel..(ci + 1) * c.kernel * c.kernel];
                            for ky in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - p as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let row = iy as usize * iw;
                                for kx in 0..c.kernel {
                                    let ix = (ox * c.stride + kx) as isize - p as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let xi = row + ix as usize;
                                    dw_c[ky * c.kernel + kx] += g * x_c[xi];
                                    dx_c[xi] += g * w_c[ky * c.kernel + kx] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        da = dx;
    }
    grads
}

/// Classic momentum SGD. With momentum 0 the update is exactly p - lr * g.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, params: &NetParams) -> Sgd {
        Sgd { lr, momentum, velocity: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &Grads) {
        for ((t, v), g) in params.tensors.iter_mut().zip(&mut self.velocity).zip(&grads.tensors) {
            for i in 0..t.data.len() {
                v[i] = self.momentum * v[i] - self.lr * g[i] as f32;
                t.data[i] += v[i];
            }
        }
    }
}

// ======================================================================
// Checkpoint format: magic, version, arch descriptor, named f32 tensors.
// ======================================================================

const CKPT_MAGIC: &[u8; 8] = b"QNETCKPT";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &NetParams, path: &Path) -> Result<(), NetError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&params.arch).expect("arch is serializable");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    let specs = params.arch.tensor_specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for ((name, shape), tensor) in specs.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams, NetError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(NetError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(NetError::Corrupt(format!("unsupported version {version}")));
    }
    let arch_len = r.u32()? as usize;
    let arch: ArchSpec = serde_json::from_slice(r.take(arch_len)?)
        .map_err(|e| NetError::Corrupt(format!("bad arch descriptor: {e}")))?;
    let n_tensors = r.u32()? as usize;
    let specs = arch.tensor_specs();
    if n_tensors != specs.len() {
        return Err(NetError::Corrupt(format!(
            "expected {} tensors, found {}",
            specs.len(),
            n_tensors
        )));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for (name, shape) in &specs {
        let name_len = r.u32()? as usize;
        let found = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NetError::Corrupt("tensor name is not utf-8".into()))?;
        if found != name {
            return Err(NetError::Corrupt(format!("expected tensor {name}, found {found}")));
        }
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        if &dims != shape {
            return Err(NetError::Corrupt(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let bytes = r.take(n * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor { shape: dims, data });
    }
    if r.pos != buf.len() {
        return Err(NetError::Corrupt("trailing bytes".into()));
    }
    Ok(NetParams { arch, tensors })
}

/// Reject parameters whose head does not produce an m x m score map or whose
/// input size disagrees with the observation resolution.
pub fn ensure_scoremap_compat(params: &NetParams, m: usize, obs_w: usize, obs_h: usize) -> Result<(), NetError> {
    match params.arch.head {
        HeadKind::ScoreMap { m: got } if got == m => {}
        HeadKind::ScoreMap { m: got } => {
            return Err(NetError::ArchMismatch(format!(
                "checkpoint predicts a {got}x{got} grid, configuration wants {m}x{m}"
            )));
        }
        HeadKind::Softmax { .. } => {
            return Err(NetError::ArchMismatch("checkpoint has a classifier head".into()));
        }
    }
    if params.arch.in_w != obs_w || params.arch.in_h != obs_h {
        return Err(NetError::ArchMismatch(format!(
            "checkpoint expects {}x{} input, configuration renders {}x{}",
            params.arch.in_w, params.arch.in_h, obs_w, obs_h
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_image(w: usize, h: usize, seed: u64) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageBuf { width: w, height: h, data }
    }

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            in_h: 12,
            in_w: 12,
            in_ch: 3,
            convs: vec![ConvSpec { out_ch: 4, kernel: 3, stride: 2 }, ConvSpec { out_ch: 6, kernel: 3, stride: 2 }],
            head: HeadKind::ScoreMap { m: 3 },
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = tiny_arch();
        let a = init_params(&arch, 9);
        let b = init_params(&arch, 9);
        let c = init_params(&arch, 10);
        assert_eq!(a.tensors, b.tensors);
        assert_ne!(a.tensors, c.tensors);
        // Biases start at zero.
        assert!(a.tensors[1].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let params = init_params(&tiny_arch(), 3);
        let img = random_image(12, 12, 1);
        let s1 = forward(&params, &img).unwrap();
        let s2 = forward(&params, &img).unwrap();
        assert_eq!(s1.data.len(), 9);
        assert_eq!(s1, s2);
        assert!(s1.data.iter().all(|&p| p > 0.0 && p < 1.0));
        let bad = random_image(10, 12, 1);
        assert!(forward(&params, &bad).is_err());
    }

    #[test]
    fn zero_params_give_uniform_half() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, 3);
        for t in &mut params.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let s = forward(&params, &random_image(12, 12, 2)).unwrap();
        assert!(s.data.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn fresh_params_score_near_half_on_average() {
        let params = init_params(&tiny_arch(), 42);
        let mut mean = 0.0;
        for seed in 0..16 {
            let s = forward(&params, &random_image(12, 12, seed)).unwrap();
            mean += s.data.iter().map(|&v| v as f64).sum::<f64>() / s.data.len() as f64;
        }
        mean /= 16.0;
        assert!(mean > 0.3 && mean < 0.7, "fresh network is saturated: mean {mean}");
    }

    #[test]
    fn bce_matches_hand_values() {
        let pred = ScoreMap { m: 3, data: vec![0.5; 9] };
        let target: Vec<f32> = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let mask = vec![1.0f32; 9];
        let loss = masked_bce(&pred, &target, &mask).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // Perfect confident prediction drives the loss to the clamp floor.
        let pred = ScoreMap { m: 3, data: target.clone() };
        let loss = masked_bce(&pred, &target, &mask).unwrap();
        assert!(loss < 1e-6);
        // Empty mask errors.
        assert!(matches!(
            masked_bce(&ScoreMap { m: 3, data: vec![0.5; 9] }, &target, &vec![0.0f32; 9]),
            Err(NetError::EmptyMask)
        ));
    }

    #[test]
    fn bce_matches_independent_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<f32> = (0..9).map(|_| rng.gen_range(0.01..0.99)).collect();
        let target: Vec<f32> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask: Vec<f32> = (0..9).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let pred = ScoreMap { m: 3, data: data.clone() };
        let got = masked_bce(&pred, &target, &mask).unwrap();
        // Direct transcription of the definition.
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..9 {
            let (p, y, m) = (data[i] as f64, target[i] as f64, mask[i] as f64);
            num += m * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            den += m;
        }
        assert!((got - (-num / den)).abs() < 1e-6);
    }

    #[test]
    fn training_loss_agrees_with_probability_form() {
        let params = init_params(&tiny_arch(), 5);
        let img = random_image(12, 12, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target: Vec<f32> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask: Vec<f32> = (0..9).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
        let s = TrainSample { image: img.clone(), target: target.clone(), mask: mask.clone() };
        let from_logits = sample_loss(&params, &s).unwrap();
        let probs = forward(&params, &img).unwrap();
        let from_probs = masked_bce(&probs, &target, &mask).unwrap();
        assert!((from_logits - from_probs).abs() < 1e-5);
    }

    /// Central finite differences against the analytic gradient, relative
    /// error below 1e-3 (with a small absolute floor for near-zero entries).
    pub(crate) fn grad_check(arch: &ArchSpec, seed: u64) -> (f64, usize) {
        let params = init_params(arch, seed);
        let img = random_image(arch.in_w, arch.in_h, seed ^ 0xabcd);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
        let out = arch.out_dim();
        let sample = TrainSample {
            image: img,
            target: (0..out).map(|_| rng.gen_range(0.0..1.0)).collect(),
            mask: (0..out).map(|_| if rng.gen_bool(0.9) { 1.0 } else { 0.0 }).collect(),
        };
        let (_, grads) = sample_loss_and_grads(&params, &sample).unwrap();
        let eps = 5e-4f32;
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for ti in 0..params.tensors.len() {
            let n = params.tensors[ti].data.len();
            // Subsample large tensors; always check biases fully.
            let stride = (n / 60).max(1);
            for j in (0..n).step_by(stride) {
                let mut p_hi = params.clone();
                p_hi.tensors[ti].data[j] += eps;
                let mut p_lo = params.clone();
                p_lo.tensors[ti].data[j] -= eps;
                // A perturbation that flips a ReLU gate lands on a kink, where
                // the finite difference does not estimate the derivative.
                let g_hi = activation_gates(&p_hi, &sample.image).unwrap();
                let g_lo = activation_gates(&p_lo, &sample.image).unwrap();
                if g_hi != g_lo {
                    continue;
                }
                let actual_step = (p_hi.tensors[ti].data[j] - p_lo.tensors[ti].data[j]) as f64;
                let l_hi = sample_loss(&p_hi, &sample).unwrap();
                let l_lo = sample_loss(&p_lo, &sample).unwrap();
                let fd = (l_hi - l_lo) / actual_step;
                let an = grads.tensors[ti][j];
                let denom = fd.abs().max(an.abs());
                if denom < 1e-6 {
                    continue;
                }
                let rel = (fd - an).abs() / denom;
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        (max_rel, checked)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (rel, n) = grad_check(&tiny_arch(), 12);
        assert!(n > 50);
        assert!(rel < 1e-3, "max relative gradient error {rel}");
    }

    #[test]
    fn masked_out_bins_do_not_influence_gradients() {
        let params = init_params(&tiny_arch(), 5);
        let img = random_image(12, 12, 9);
        let mask: Vec<f32> = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let t1: Vec<f32> = vec![1.0; 9];
        // Change targets only where the mask is zero.
        let t2: Vec<f32> = t1
            .iter()
            .zip(&mask)
            .map(|(&t, &m)| if m == 0.0 { 0.0 } else { t })
            .collect();
        let (l1, g1) = sample_loss_and_grads(
            &params,
            &TrainSample { image: img.clone(), target: t1, mask: mask.clone() },
        )
        .unwrap();
        let (l2, g2) =
            sample_loss_and_grads(&params, &TrainSample { image: img, target: t2, mask }).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gradient_step_descends() {
        let params = init_params(&tiny_arch(), 21);
        let img = random_image(12, 12, 3);
        let sample = TrainSample { image: img, target: vec![1.0; 9], mask: vec![1.0; 9] };
        let (l0, grads) = sample_loss_and_grads(&params, &sample).unwrap();
        let mut p = params.clone();
        let mut opt = Sgd::new(0.05, 0.0, &p);
        opt.step(&mut p, &grads);
        let l1 = sample_loss(&p, &sample).unwrap();
        assert!(l1 < l0, "loss went {l0} -> {l1}");
    }

    #[test]
    fn sgd_momentum_recursion_matches_hand_computation() {
        let arch = ArchSpec {
            in_h: 4,
            in_w: 4,
            in_ch: 3,
            convs: vec![],
            head: HeadKind::ScoreMap { m: 3 },
        };
        let mut params = init_params(&arch, 1);
        let w0 = params.tensors[0].data[0];
        let g = Grads {
            tensors: vec![vec![1.0; params.tensors[0].data.len()], vec![1.0; params.tensors[1].data.len()]],
        };
        let mut opt = Sgd::new(0.1, 0.9, &params);
        opt.step(&mut params, &g);
        // v1 = -0.1, w1 = w0 - 0.1
        assert!((params.tensors[0].data[0] - (w0 - 0.1)).abs() < 1e-6);
        opt.step(&mut params, &g);
        // v2 = 0.9 * -0.1 - 0.1 = -0.19, w2 = w0 - 0.29
        assert!((params.tensors[0].data[0] - (w0 - 0.29)).abs() < 1e-6);
        // lr = 0 leaves parameters untouched.
        let snapshot = params.tensors.clone();
        let mut opt0 = Sgd::new(0.0, 0.5, &params);
        opt0.step(&mut params, &g);
        assert_eq!(params.tensors, snapshot);
    }

    #[test]
    fn softmax_head_and_class_gradients() {
        let arch = ArchSpec {
            in_h: 12,
            in_w: 12,
            in_ch: 3,
            convs: vec![ConvSpec { out_ch: 4, kernel: 3, stride: 2 }],
            head: HeadKind::Softmax { classes: 3 },
        };
        let params = init_params(&arch, 4);
        let img = random_image(12, 12, 4);
        let p = forward_class_probs(&params, &img).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Finite differences on the class loss, skipping ReLU kinks.
        let (_, grads) = class_loss_and_grads(&params, &img, 1).unwrap();
        let eps = 5e-4f32;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for ti in 0..params.tensors.len() {
            let n = params.tensors[ti].data.len();
            for j in (0..n).step_by((n / 40).max(1)) {
                let mut hi = params.clone();
                hi.tensors[ti].data[j] += eps;
                let mut lo = params.clone();
                lo.tensors[ti].data[j] -= eps;
                if activation_gates(&hi, &img).unwrap() != activation_gates(&lo, &img).unwrap() {
                    continue;
                }
                let step = (hi.tensors[ti].data[j] - lo.tensors[ti].data[j]) as f64;
                let fd = (class_loss(&hi, &img, 1).unwrap() - class_loss(&lo, &img, 1).unwrap()) / step;
                let an = grads.tensors[ti][j];
                let denom = fd.abs().max(an.abs());
                if denom > 1e-6 {
                    worst = worst.max((fd - an).abs() / denom);
                    checked += 1;
                }
            }
        }
        assert!(checked > 30);
        assert!(worst < 1e-3, "softmax gradient error {worst}");
    }

    #[test]
    fn translation_consistency_on_impulse_images() {
        // Shifting the input by the total stride shifts the trunk features by
        // one cell (away from the borders).
        let arch = ArchSpec {
            in_h: 16,
            in_w: 16,
            in_ch: 3,
            convs: vec![ConvSpec { out_ch: 5, kernel: 3, stride: 2 }, ConvSpec { out_ch: 7, kernel: 3, stride: 2 }],
            head: HeadKind::ScoreMap { m: 3 },
        };
        let params = init_params(&arch, 17);
        let impulse = |r: usize, c: usize| {
            let mut img = ImageBuf { width: 16, height: 16, data: vec![0.5; 16 * 16 * 3] };
            let i = (r * 16 + c) * 3;
            img.data[i] = 1.0;
            img.data[i + 1] = 0.25;
            img.data[i + 2] = 0.75;
            img
        };
        let total_stride = 4;
        let (f1, (ch, fh, fw)) = trunk_features(&params, &impulse(7, 6)).unwrap();
        let (f2, _) = trunk_features(&params, &impulse(7, 6 + total_stride)).unwrap();
        for c in 0..ch {
            for y in 1..fh - 1 {
                for x in 1..fw - 2 {
                    let a = f1[c * fh * fw + y * fw + x];
                    let b = f2[c * fh * fw + y * fw + x + 1];
                    assert!(
                        (a - b).abs() < 1e-9,
                        "feature shift mismatch at c={c} y={y} x={x}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = init_params(&tiny_arch(), 99);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params.arch, loaded.arch);
        for (a, b) in params.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = init_params(&tiny_arch(), 7);
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 13]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(NetError::Corrupt(_))));
        // An 11x11 score map is not interchangeable with a 41x41 configuration.
        let mut arch = tiny_arch();
        arch.head = HeadKind::ScoreMap { m: 11 };
        let params = init_params(&arch, 2);
        assert!(ensure_scoremap_compat(&params, 11, 12, 12).is_ok());
        assert!(matches!(
            ensure_scoremap_compat(&params, 41, 12, 12),
            Err(NetError::ArchMismatch(_))
        ));
    }

    #[test]
    fn overfits_a_small_batch() {
        let arch = ArchSpec {
            in_h: 12,
            in_w: 12,
            in_ch: 3,
            convs: vec![ConvSpec { out_ch: 8, kernel: 3, stride: 2 }],
            head: HeadKind::ScoreMap { m: 3 },
        };
        let mut params = init_params(&arch, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<TrainSample> = (0..50)
            .map(|i| TrainSample {
                image: random_image(12, 12, 1000 + i),
                target: (0..9).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
                mask: vec![1.0; 9],
            })
            .collect();
        let mut opt = Sgd::new(0.5, 0.9, &params);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let mut total = Grads::zeros_like(&params);
            let mut loss_sum = 0.0;
            for s in &samples {
                let (l, g) = sample_loss_and_grads(&params, s).unwrap();
                loss_sum += l;
                total.add(&g);
            }
            total.scale(1.0 / samples.len() as f64);
            opt.step(&mut params, &total);
            last = loss_sum / samples.len() as f64;
            if last < 0.1 {
                break;
            }
        }
        assert!(last < 0.1, "failed to overfit: final loss {last}");
    }
}
