//! M5-style raw-waveform CNN gender classifier with exact input gradients.
//!
//! The network is a stack of conv + batch-norm + ReLU + max-pool-4 blocks
//! followed by global average pooling and a fully-connected layer to two
//! logits (class 0 = F, class 1 = M). Forward and backward passes are
//! written by hand so that input gradients for PGD are exact; convolutions
//! run as im2col matrix products. The element type is generic: f32 for
//! training, f64 for finite-difference gradient checks.
//!
//! Inputs are waveform samples in [0, 1]; the network subtracts the 0.5
//! pad value internally, so gradients with respect to the raw samples are
//! unchanged by the shift.

mod checkpoint;

pub use checkpoint::{load_model, save_model};

use ndarray::{Array1, Array2, Array3, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{random_chunk, Gender, Waveform};
use crate::error::{Error, Result};

const POOL: usize = 4;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One conv block: out channels, kernel width, stride. Every block is
/// followed by batch norm, ReLU, and max-pool 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct M5Config {
    pub blocks: Vec<ConvBlockSpec>,
    /// Divide all channel counts by 8 for desk-scale runs.
    pub desk_scale: bool,
}

impl Default for M5Config {
    fn default() -> Self {
        let blocks = [(128, 80, 4), (128, 3, 1), (256, 3, 1), (512, 3, 1)]
            .into_iter()
            .map(|(out_channels, kernel, stride)| ConvBlockSpec {
                out_channels,
                kernel,
                stride,
            })
            .collect();
        Self {
            blocks,
            desk_scale: false,
        }
    }
}

impl M5Config {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("M5 needs at least one conv block".to_string()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::config(format!(
                    "block {i}: channels, kernel, and stride must be positive"
                )));
            }
            if self.desk_scale && b.out_channels % 8 != 0 {
                return Err(Error::config(format!(
                    "block {i}: desk_scale needs channel counts divisible by 8"
                )));
            }
        }
        Ok(())
    }

    /// Block specs with the desk_scale channel division applied.
    pub fn effective_blocks(&self) -> Vec<ConvBlockSpec> {
        let div = if self.desk_scale { 8 } else { 1 };
        self.blocks
            .iter()
            .map(|b| ConvBlockSpec {
                out_channels: b.out_channels / div,
                ..*b
            })
            .collect()
    }

    /// Smallest input length the conv stack accepts.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1usize;
        for b in self.blocks.iter().rev() {
            need *= POOL; // floor(n / 4) >= need
            need = (need - 1) * b.stride + b.kernel;
        }
        need
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Conv1d<F> {
    /// (out_channels, in_channels, kernel)
    w: Array3<F>,
    b: Array1<F>,
    stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm<F> {
    gamma: Array1<F>,
    beta: Array1<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
struct Block<F> {
    conv: Conv1d<F>,
    bn: BatchNorm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct M5Model<F> {
    config: M5Config,
    blocks: Vec<Block<F>>,
    /// (2, last_channels)
    fc_w: Array2<F>,
    fc_b: Array1<F>,
    mode: Mode,
}

fn f<F: NdFloat + FromPrimitive>(v: f64) -> F {
    F::from_f64(v).expect("f64 converts to the model element type")
}

/// Class index convention for the two logits.
pub fn class_index(g: Gender) -> usize {
    match g {
        Gender::F => 0,
        Gender::M => 1,
    }
}

pub fn gender_from_class(idx: usize) -> Gender {
    if idx == 0 {
        Gender::F
    } else {
        Gender::M
    }
}

impl<F: NdFloat + FromPrimitive> M5Model<F> {
    /// Fresh model with centered-uniform init scaled by 1/sqrt(fan_in),
    /// batch-norm gamma 1 / beta 0, running stats (0, 1). Deterministic
    /// per seed.
    pub fn new(config: &M5Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |scale: f64| -> f64 { scale * (2.0 * rng.gen::<f64>() - 1.0) };
        let mut blocks = Vec::new();
        let mut in_ch = 1usize;
        for spec in config.effective_blocks() {
            let fan_in = in_ch * spec.kernel;
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w = Array3::from_shape_simple_fn((spec.out_channels, in_ch, spec.kernel), || {
                f(uniform(scale))
            });
            let b = Array1::from_shape_simple_fn(spec.out_channels, || f(uniform(scale)));
            blocks.push(Block {
                conv: Conv1d {
                    w,
                    b,
                    stride: spec.stride,
                },
                bn: BatchNorm {
                    gamma: Array1::from_elem(spec.out_channels, F::one()),
                    beta: Array1::zeros(spec.out_channels),
                    running_mean: Array1::zeros(spec.out_channels),
                    running_var: Array1::from_elem(spec.out_channels, F::one()),
                },
            });
            in_ch = spec.out_channels;
        }
        let scale = 1.0 / (in_ch as f64).sqrt();
        let fc_w = Array2::from_shape_simple_fn((2, in_ch), || f(uniform(scale)));
        let fc_b = Array1::from_shape_simple_fn(2, || f(uniform(scale)));
        Ok(Self {
            config: config.clone(),
            blocks,
            fc_w,
            fc_b,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &M5Config {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Eval-mode logits for a batch of raw-sample rows.
    pub fn forward(&self, batch: &Array2<F>) -> Result<Array2<F>> {
        if self.mode != Mode::Eval {
            return Err(Error::numeric(
                "plain forward requires eval mode; training uses the internal cached path"
                    .to_string(),
            ));
        }
        Ok(self.forward_cached(batch)?.logits)
    }

    /// Forward in the current mode. Batch statistics for the running-stat
    /// update are returned in the pass; `apply_batch_stats` commits them.
    fn forward_cached(&self, batch: &Array2<F>) -> Result<ForwardPass<F>> {
        let t = batch.ncols();
        let min = self.config.min_input_len();
        if t < min {
            return Err(Error::data(format!(
                "input length {t} below the minimum {min} for this conv stack"
            )));
        }
        let b = batch.nrows();
        let half = f::<F>(0.5);
        let mut x = Array3::zeros((b, 1, t));
        for (i, row) in batch.axis_iter(Axis(0)).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                x[[i, 0, j]] = v - half;
            }
        }
        let train = self.mode == Mode::Train;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, train);
            caches.push(cache);
            x = next;
        }
        // Global average pool over time.
        let t_last = x.dim().2;
        let gap: Array2<F> = x.sum_axis(Axis(2)) / f::<F>(t_last as f64);
        let logits = gap.dot(&self.fc_w.t()) + &self.fc_b;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite logits".to_string()));
        }
        Ok(ForwardPass {
            caches,
            gap,
            last_len: t_last,
            logits,
        })
    }

    /// Mean cross-entropy and its gradient w.r.t. the logits.
    fn loss_and_dlogits(logits: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
        let b = logits.nrows();
        let mut dlogits = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0f64;
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: F = exps.iter().cloned().fold(F::zero(), |a, v| a + v);
            let y = labels[i];
            loss += (z.ln() + m - row[y]).to_f64().expect("finite loss");
            for (j, e) in exps.iter().enumerate() {
                let p = *e / z;
                let target = if j == y { F::one() } else { F::zero() };
                dlogits[[i, j]] = (p - target) / f::<F>(b as f64);
            }
        }
        (loss / b as f64, dlogits)
    }

    /// Backward from dlogits through the whole stack. Returns parameter
    /// gradients and the gradient w.r.t. the raw input samples.
    fn backward(&self, pass: &ForwardPass<F>, dlogits: &Array2<F>) -> (Grads<F>, Array2<F>) {
        let mut grads = Grads::zeros_like(self);
        grads.fc_w = dlogits.t().dot(&pass.gap);
        grads.fc_b = dlogits.sum_axis(Axis(0));
        let dgap = dlogits.dot(&self.fc_w);

        // Undo global average pooling: spread evenly over time.
        let (b, c_last) = dgap.dim();
        let t_last = pass.last_len;
        let inv_t = f::<F>(1.0 / t_last as f64);
        let mut dx = Array3::zeros((b, c_last, t_last));
        for i in 0..b {
            for c in 0..c_last {
                let v = dgap[[i, c]] * inv_t;
                for t in 0..t_last {
                    dx[[i, c, t]] = v;
                }
            }
        }

        let train = self.mode == Mode::Train;
        for (block, cache) in self.blocks.iter().zip(&pass.caches).rev() {
            let (dprev, bg) = block.backward(&dx, cache, train);
            dx = dprev;
            grads.blocks.push(bg);
        }
        grads.blocks.reverse();

        // Input shift by -0.5 is affine: gradient passes through unchanged.
        let t_in = dx.dim().2;
        let mut dinput = Array2::zeros((b, t_in));
        for i in 0..b {
            for t in 0..t_in {
                dinput[[i, t]] = dx[[i, 0, t]];
            }
        }
        (grads, dinput)
    }

    /// Fold a train-mode pass's batch statistics into the running stats
    /// with momentum `BN_MOMENTUM`.
    fn apply_batch_stats(&mut self, pass: &ForwardPass<F>) {
        let mom = f::<F>(BN_MOMENTUM);
        let keep = F::one() - mom;
        for (block, cache) in self.blocks.iter_mut().zip(&pass.caches) {
            if let Some((mean, var)) = &cache.batch_stats {
                for ch in 0..mean.len() {
                    block.bn.running_mean[ch] = keep * block.bn.running_mean[ch] + mom * mean[ch];
                    block.bn.running_var[ch] = keep * block.bn.running_var[ch] + mom * var[ch];
                }
            }
        }
    }

    /// Cross-entropy loss and the exact gradient w.r.t. the input samples.
    /// Requires eval mode: batch-norm must use frozen running stats, or the
    /// gradient would depend on the batch composition.
    pub fn loss_and_input_grad(&self, x: &[F], y: Gender) -> Result<(f64, Vec<F>)> {
        if self.mode != Mode::Eval {
            return Err(Error::numeric(
                "input gradients require eval mode (frozen batch norm)".to_string(),
            ));
        }
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .expect("row shape is consistent");
        let pass = self.forward_cached(&batch)?;
        let (loss, dlogits) = Self::loss_and_dlogits(&pass.logits, &[class_index(y)]);
        let (_, dinput) = self.backward(&pass, &dlogits);
        Ok((loss, dinput.row(0).to_vec()))
    }

    /// Classify one utterance from its raw samples.
    pub fn classify(&self, samples: &[F]) -> Result<Gender> {
        let batch = Array2::from_shape_vec((1, samples.len()), samples.to_vec())
            .expect("row shape is consistent");
        let logits = self.forward(&batch)?;
        Ok(if logits[[0, 0]] >= logits[[0, 1]] {
            Gender::F
        } else {
            Gender::M
        })
    }
}

struct ForwardPass<F> {
    caches: Vec<BlockCache<F>>,
    gap: Array2<F>,
    last_len: usize,
    logits: Array2<F>,
}

struct BlockCache<F> {
    /// Block input (B, C_in, T_in).
    x: Array3<F>,
    /// Normalized pre-scale activations (B, C, T_conv).
    xhat: Array3<F>,
    /// 1 / sqrt(var + eps) used in this pass, per channel.
    invstd: Array1<F>,
    /// Post-ReLU activations (B, C, T_conv); the mask is relu_out > 0.
    relu_out: Array3<F>,
    /// Argmax positions in conv-time coordinates (B, C, T_pool).
    pool_arg: Array3<usize>,
    /// Train-mode batch (mean, biased var) awaiting the running update.
    batch_stats: Option<(Array1<F>, Array1<F>)>,
}

struct BlockGrads<F> {
    w: Array3<F>,
    b: Array1<F>,
    gamma: Array1<F>,
    beta: Array1<F>,
}

struct Grads<F> {
    blocks: Vec<BlockGrads<F>>,
    fc_w: Array2<F>,
    fc_b: Array1<F>,
}

impl<F: NdFloat + FromPrimitive> Grads<F> {
    fn zeros_like(m: &M5Model<F>) -> Self {
        Self {
            blocks: Vec::with_capacity(m.blocks.len()),
            fc_w: Array2::zeros(m.fc_w.raw_dim()),
            fc_b: Array1::zeros(m.fc_b.raw_dim()),
        }
    }
}

impl<F: NdFloat + FromPrimitive> Conv1d<F> {
    fn out_len(&self, t_in: usize) -> usize {
        (t_in - self.w.dim().2) / self.stride + 1
    }

    /// im2col matrix (C_in * K, T_out) for one sample.
    fn im2col(&self, x: &Array3<F>, sample: usize) -> Array2<F> {
        let (_, c_in, k) = self.w.dim();
        let t_in = x.dim().2;
        let t_out = self.out_len(t_in);
        let xbuf = x.as_slice().expect("contiguous");
        let mut cols = Array2::zeros((c_in * k, t_out));
        let cbuf = cols.as_slice_mut().expect("contiguous");
        for c in 0..c_in {
            let src = &xbuf[(sample * c_in + c) * t_in..][..t_in];
            for j in 0..k {
                let dst = &mut cbuf[(c * k + j) * t_out..][..t_out];
                if self.stride == 1 {
                    dst.copy_from_slice(&src[j..j + t_out]);
                } else {
                    for (d, s) in dst.iter_mut().zip(src[j..].iter().step_by(self.stride)) {
                        *d = *s;
                    }
                }
            }
        }
        cols
    }

    fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (c_out, c_in, k) = self.w.dim();
        let b = x.dim().0;
        let t_out = self.out_len(x.dim().2);
        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .expect("conv weight reshapes to 2-D");
        let mut y = Array3::zeros((b, c_out, t_out));
        let ybuf = y.as_slice_mut().expect("contiguous");
        for i in 0..b {
            let cols = self.im2col(x, i);
            let out = w2.dot(&cols);
            let dst = &mut ybuf[i * c_out * t_out..][..c_out * t_out];
            dst.copy_from_slice(out.as_slice().expect("contiguous"));
            for c in 0..c_out {
                let bias = self.b[c];
                for v in &mut dst[c * t_out..][..t_out] {
                    *v += bias;
                }
            }
        }
        y
    }

    /// Accumulate dW/db and return dX. Recomputes im2col per sample.
    fn backward(
        &self,
        x: &Array3<F>,
        dy: &Array3<F>,
        dw: &mut Array3<F>,
        db: &mut Array1<F>,
    ) -> Array3<F> {
        let (c_out, c_in, k) = self.w.dim();
        let (b, _, t_out) = dy.dim();
        let t_in = x.dim().2;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .expect("conv weight reshapes to 2-D");
        let dybuf = dy.as_slice().expect("contiguous");
        let mut dw2 = Array2::<F>::zeros((c_out, c_in * k));
        let mut dx = Array3::zeros(x.raw_dim());
        let dxbuf = dx.as_slice_mut().expect("contiguous");
        for i in 0..b {
            let cols = self.im2col(x, i);
            let dy2 = ndarray::ArrayView2::from_shape(
                (c_out, t_out),
                &dybuf[i * c_out * t_out..][..c_out * t_out],
            )
            .expect("contiguous sample view");
            for c in 0..c_out {
                db[c] += dy2.row(c).sum();
            }
            ndarray::linalg::general_mat_mul(F::one(), &dy2, &cols.t(), F::one(), &mut dw2);
            let dcols = w2.t().dot(&dy2);
            let dcbuf = dcols.as_slice().expect("contiguous");
            for c in 0..c_in {
                let dst = &mut dxbuf[(i * c_in + c) * t_in..][..t_in];
                for j in 0..k {
                    let src = &dcbuf[(c * k + j) * t_out..][..t_out];
                    if self.stride == 1 {
                        for (d, s) in dst[j..j + t_out].iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        for (o, s) in src.iter().enumerate() {
                            dst[o * self.stride + j] += *s;
                        }
                    }
                }
            }
        }
        *dw += &dw2
            .into_shape_with_order((c_out, c_in, k))
            .expect("conv gradient reshapes back to 3-D");
        dx
    }
}

impl<F: NdFloat + FromPrimitive> Block<F> {
    fn forward(&self, x: &Array3<F>, train: bool) -> (Array3<F>, BlockCache<F>) {
        let conv_out = self.conv.forward(x);
        let (b, c, t) = conv_out.dim();
        let n = f::<F>((b * t) as f64);
        let eps = f::<F>(BN_EPS);
        let cbuf = conv_out.as_slice().expect("contiguous");
        let row = |i: usize, ch: usize| -> &[F] { &cbuf[(i * c + ch) * t..][..t] };

        let (mean, invstd, batch_stats) = if train {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let mut s = F::zero();
                for i in 0..b {
                    for &v in row(i, ch) {
                        s += v;
                    }
                }
                let m = s / n;
                let mut acc = F::zero();
                for i in 0..b {
                    for &v in row(i, ch) {
                        let d = v - m;
                        acc += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = acc / n;
            }
            let invstd = var.mapv(|v| F::one() / (v + eps).sqrt());
            let stats = Some((mean.clone(), var));
            (mean, invstd, stats)
        } else {
            let invstd = self.bn.running_var.mapv(|v| F::one() / (v + eps).sqrt());
            (self.bn.running_mean.clone(), invstd, None)
        };

        let mut xhat = Array3::zeros((b, c, t));
        let mut relu_out = Array3::zeros((b, c, t));
        {
            let xhbuf = xhat.as_slice_mut().expect("contiguous");
            let rbuf = relu_out.as_slice_mut().expect("contiguous");
            for i in 0..b {
                for ch in 0..c {
                    let (m, is) = (mean[ch], invstd[ch]);
                    let (g, be) = (self.bn.gamma[ch], self.bn.beta[ch]);
                    let off = (i * c + ch) * t;
                    let src = &cbuf[off..][..t];
                    let xh_row = &mut xhbuf[off..][..t];
                    let r_row = &mut rbuf[off..][..t];
                    for ((xv, xh), r) in src.iter().zip(xh_row.iter_mut()).zip(r_row.iter_mut()) {
                        let h = (*xv - m) * is;
                        *xh = h;
                        *r = (g * h + be).max(F::zero());
                    }
                }
            }
        }

        // Max-pool 4; trailing remainder is dropped.
        let t_pool = t / POOL;
        let mut pooled = Array3::zeros((b, c, t_pool));
        let mut pool_arg = Array3::zeros((b, c, t_pool));
        {
            let rbuf = relu_out.as_slice().expect("contiguous");
            let pbuf = pooled.as_slice_mut().expect("contiguous");
            let abuf = pool_arg.as_slice_mut().expect("contiguous");
            for i in 0..b {
                for ch in 0..c {
                    let src = &rbuf[(i * c + ch) * t..][..t];
                    let off = (i * c + ch) * t_pool;
                    let p_row = &mut pbuf[off..][..t_pool];
                    let a_row = &mut abuf[off..][..t_pool];
                    for (o, win) in src.chunks_exact(POOL).enumerate() {
                        let mut best = 0usize;
                        for j in 1..POOL {
                            if win[j] > win[best] {
                                best = j;
                            }
                        }
                        p_row[o] = win[best];
                        a_row[o] = o * POOL + best;
                    }
                }
            }
        }

        (
            pooled,
            BlockCache {
                x: x.clone(),
                xhat,
                invstd,
                relu_out,
                pool_arg,
                batch_stats,
            },
        )
    }

    fn backward(
        &self,
        dpool: &Array3<F>,
        cache: &BlockCache<F>,
        train: bool,
    ) -> (Array3<F>, BlockGrads<F>) {
        let (b, c, t) = cache.relu_out.dim();
        let t_pool = dpool.dim().2;
        let dpbuf = dpool.as_slice().expect("contiguous");
        let abuf = cache.pool_arg.as_slice().expect("contiguous");
        let rbuf = cache.relu_out.as_slice().expect("contiguous");
        let xhbuf = cache.xhat.as_slice().expect("contiguous");

        // Max-pool routes gradient to the argmax; ReLU masks it.
        let mut dy = Array3::zeros((b, c, t));
        {
            let dybuf = dy.as_slice_mut().expect("contiguous");
            for i in 0..b {
                for ch in 0..c {
                    let poff = (i * c + ch) * t_pool;
                    let toff = (i * c + ch) * t;
                    let dst = &mut dybuf[toff..][..t];
                    for o in 0..t_pool {
                        dst[abuf[poff + o]] += dpbuf[poff + o];
                    }
                    let mask = &rbuf[toff..][..t];
                    for (d, r) in dst.iter_mut().zip(mask) {
                        if *r <= F::zero() {
                            *d = F::zero();
                        }
                    }
                }
            }
        }

        // Batch norm backward; in eval mode the stats are constants.
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dconv = Array3::zeros((b, c, t));
        let n = f::<F>((b * t) as f64);
        {
            let dybuf = dy.as_slice().expect("contiguous");
            let dcbuf = dconv.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                let g = self.bn.gamma[ch];
                let is = cache.invstd[ch];
                let mut sum_dy = F::zero();
                let mut sum_dy_xhat = F::zero();
                for i in 0..b {
                    let off = (i * c + ch) * t;
                    for (d, xh) in dybuf[off..][..t].iter().zip(&xhbuf[off..][..t]) {
                        sum_dy += *d;
                        sum_dy_xhat += *d * *xh;
                    }
                }
                dgamma[ch] = sum_dy_xhat;
                dbeta[ch] = sum_dy;
                if train {
                    let inv_n = F::one() / n;
                    let c1 = inv_n * g * sum_dy;
                    let c2 = inv_n * g * sum_dy_xhat;
                    for i in 0..b {
                        let off = (i * c + ch) * t;
                        let dst = &mut dcbuf[off..][..t];
                        for ((d, dyv), xh) in
                            dst.iter_mut().zip(&dybuf[off..][..t]).zip(&xhbuf[off..][..t])
                        {
                            *d = is * (*dyv * g - c1 - c2 * *xh);
                        }
                    }
                } else {
                    let scale = g * is;
                    for i in 0..b {
                        let off = (i * c + ch) * t;
                        for (d, dyv) in dcbuf[off..][..t].iter_mut().zip(&dybuf[off..][..t]) {
                            *d = *dyv * scale;
                        }
                    }
                }
            }
        }

        let mut dw = Array3::zeros(self.conv.w.raw_dim());
        let mut db = Array1::zeros(self.conv.b.raw_dim());
        let dx = self.conv.backward(&cache.x, &dconv, &mut dw, &mut db);
        (
            dx,
            BlockGrads {
                w: dw,
                b: db,
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub cycle_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub chunk_s: f64,
    pub eval_s: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            min_lr: 1e-8,
            cycle_steps: 12_500,
            total_steps: 50_000,
            batch_size: 32,
            chunk_s: 3.0,
            eval_s: 6.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr < self.max_lr) {
            return Err(Error::config(format!(
                "min_lr {} must be below max_lr {}",
                self.min_lr, self.max_lr
            )));
        }
        if self.total_steps == 0 || self.cycle_steps < 2 || self.batch_size == 0 {
            return Err(Error::config(
                "total_steps, cycle_steps, and batch_size must be positive".to_string(),
            ));
        }
        if !(self.chunk_s > 0.0 && self.eval_s > 0.0) {
            return Err(Error::config(
                "chunk_s and eval_s must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Triangular cyclic learning rate: min at step 0, max at half cycle, back
/// to min at a full cycle.
pub fn cyclic_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let pos = step % cfg.cycle_steps;
    let half = cfg.cycle_steps as f64 / 2.0;
    let frac = if (pos as f64) <= half {
        pos as f64 / half
    } else {
        (cfg.cycle_steps - pos) as f64 / half
    };
    cfg.min_lr + (cfg.max_lr - cfg.min_lr) * frac
}

/// Train an M5 model: per step, draw `batch_size` utterances uniformly
/// with replacement, take a seeded random chunk of each, and apply one
/// Adam update of the cross-entropy with the cyclic learning rate.
/// Returns the eval-mode model and the per-step loss trace. Fully
/// deterministic per seed.
pub fn train<F: NdFloat + FromPrimitive>(
    cfg_m: &M5Config,
    cfg_t: &TrainConfig,
    corpus: &[Waveform],
) -> Result<(M5Model<F>, Vec<f64>)> {
    cfg_t.validate()?;
    let labels: Vec<Gender> = corpus
        .iter()
        .map(|w| {
            w.gender
                .ok_or_else(|| Error::data(format!("utterance {} has no gender label", w.source_id)))
        })
        .collect::<Result<_>>()?;
    if !labels.contains(&Gender::F) || !labels.contains(&Gender::M) {
        return Err(Error::data(
            "training corpus must contain both genders".to_string(),
        ));
    }

    let mut model = M5Model::<F>::new(cfg_m, cfg_t.seed)?;
    model.set_mode(Mode::Train);
    let chunk_len = (cfg_t.chunk_s * crate::audio_io::PIPELINE_RATE_HZ as f64).round() as usize;
    let min = cfg_m.min_input_len();
    if chunk_len < min {
        return Err(Error::config(format!(
            "chunk of {chunk_len} samples is below the stack minimum {min}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg_t.seed.wrapping_add(1));
    let mut adam_m = Grads::zeros_like(&model);
    let mut adam_v = Grads::zeros_like(&model);
    for blk in &model.blocks {
        let zero = BlockGrads {
            w: Array3::zeros(blk.conv.w.raw_dim()),
            b: Array1::zeros(blk.conv.b.raw_dim()),
            gamma: Array1::zeros(blk.bn.gamma.raw_dim()),
            beta: Array1::zeros(blk.bn.beta.raw_dim()),
        };
        adam_m.blocks.push(zero);
        adam_v.blocks.push(BlockGrads {
            w: Array3::zeros(blk.conv.w.raw_dim()),
            b: Array1::zeros(blk.conv.b.raw_dim()),
            gamma: Array1::zeros(blk.bn.gamma.raw_dim()),
            beta: Array1::zeros(blk.bn.beta.raw_dim()),
        });
    }

    let mut trace = Vec::with_capacity(cfg_t.total_steps);
    for step in 0..cfg_t.total_steps {
        let mut batch = Array2::zeros((cfg_t.batch_size, chunk_len));
        let mut batch_labels = Vec::with_capacity(cfg_t.batch_size);
        for i in 0..cfg_t.batch_size {
            let idx = rng.gen_range(0..corpus.len());
            let chunk = random_chunk(&corpus[idx], cfg_t.chunk_s, &mut rng);
            for (j, &v) in chunk.samples.iter().enumerate() {
                batch[[i, j]] = f(v);
            }
            batch_labels.push(class_index(labels[idx]));
        }
        let pass = model.forward_cached(&batch)?;
        model.apply_batch_stats(&pass);
        let (loss, dlogits) = M5Model::loss_and_dlogits(&pass.logits, &batch_labels);
        let (grads, _) = model.backward(&pass, &dlogits);
        trace.push(loss);
        let lr = cyclic_lr(step, cfg_t);
        adam_update(&mut model, &grads, &mut adam_m, &mut adam_v, lr, step + 1);
    }
    model.set_mode(Mode::Eval);
    Ok((model, trace))
}

fn adam_update<F: NdFloat + FromPrimitive>(
    model: &mut M5Model<F>,
    g: &Grads<F>,
    m: &mut Grads<F>,
    v: &mut Grads<F>,
    lr: f64,
    t: usize,
) {
    let b1 = ADAM_BETA1;
    let b2 = ADAM_BETA2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let update = |p: &mut [F], g: &[F], m: &mut [F], v: &mut [F]| {
        for i in 0..p.len() {
            let gi = g[i].to_f64().expect("finite gradient");
            let mi = b1 * m[i].to_f64().expect("finite moment") + (1.0 - b1) * gi;
            let vi = b2 * v[i].to_f64().expect("finite moment") + (1.0 - b2) * gi * gi;
            m[i] = f(mi);
            v[i] = f(vi);
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            p[i] = p[i] - f(step);
        }
    };
    for (i, blk) in model.blocks.iter_mut().enumerate() {
        update(
            blk.conv.w.as_slice_mut().expect("contiguous"),
            g.blocks[i].w.as_slice().expect("contiguous"),
            m.blocks[i].w.as_slice_mut().expect("contiguous"),
            v.blocks[i].w.as_slice_mut().expect("contiguous"),
        );
        update(
            blk.conv.b.as_slice_mut().expect("contiguous"),
            g.blocks[i].b.as_slice().expect("contiguous"),
            m.blocks[i].b.as_slice_mut().expect("contiguous"),
            v.blocks[i].b.as_slice_mut().expect("contiguous"),
        );
        update(
            blk.bn.gamma.as_slice_mut().expect("contiguous"),
            g.blocks[i].gamma.as_slice().expect("contiguous"),
            m.blocks[i].gamma.as_slice_mut().expect("contiguous"),
            v.blocks[i].gamma.as_slice_mut().expect("contiguous"),
        );
        update(
            blk.bn.beta.as_slice_mut().expect("contiguous"),
            g.blocks[i].beta.as_slice().expect("contiguous"),
            m.blocks[i].beta.as_slice_mut().expect("contiguous"),
            v.blocks[i].beta.as_slice_mut().expect("contiguous"),
        );
    }
    update(
        model.fc_w.as_slice_mut().expect("contiguous"),
        g.fc_w.as_slice().expect("contiguous"),
        m.fc_w.as_slice_mut().expect("contiguous"),
        v.fc_w.as_slice_mut().expect("contiguous"),
    );
    update(
        model.fc_b.as_slice_mut().expect("contiguous"),
        g.fc_b.as_slice().expect("contiguous"),
        m.fc_b.as_slice_mut().expect("contiguous"),
        v.fc_b.as_slice_mut().expect("contiguous"),
    );
}
