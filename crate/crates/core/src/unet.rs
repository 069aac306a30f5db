//! Baseline volumetric network: two-conv encoder, a stack of residual
//! blocks with squeeze-excitation gating, one pool/upsample stage, and a
//! tanh conv decoder. Encoder and feature convolutions use circular
//! padding; decoder convolutions use "same" zero padding.
//!
//! Batch statistics couple examples, so training passes run on whole
//! batches; running averages serve evaluation.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conv::{conv3d_backward, conv3d_forward, Batch, ConvParams, ConvSpec, PadMode};
use crate::grid::Dims3;
use crate::tensor::{gemm, Mat, Scalar, TensorEntry, TensorEntryMut, Trans};

#[derive(Debug, Error)]
pub enum UnetError {
    #[error("dims {0:?} must be even on every axis for pool/upsample")]
    OddDims(Dims3),
    #[error("input has {got} channels, config expects {want}")]
    ChannelMismatch { got: usize, want: usize },
    #[error("config invalid: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnetConfig {
    /// 1 for the Patterson map, plus one per partial-structure channel,
    /// plus one when a refining channel is stacked.
    pub in_channels: usize,
    /// Partial-structure channels stacked after the Patterson map (+PS).
    pub ps_channels: usize,
    /// Whether a prior-prediction channel is stacked last (+R).
    pub refine: bool,
    pub enc1: usize,
    pub enc2: usize,
    pub res_blocks: usize,
    pub se_reduction: usize,
    pub k_enc: usize,
    pub k_dec: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            ps_channels: 0,
            refine: false,
            enc1: 25,
            enc2: 30,
            res_blocks: 7,
            se_reduction: 2,
            k_enc: 7,
            k_dec: 5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl UnetConfig {
    /// Small variant for 64-bit gradient checks.
    pub fn tiny() -> Self {
        Self {
            enc1: 4,
            enc2: 6,
            res_blocks: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), UnetError> {
        if self.in_channels == 0 || self.enc1 == 0 || self.enc2 == 0 {
            return Err(UnetError::BadConfig(
                "channel counts must be positive".into(),
            ));
        }
        if self.k_enc % 2 == 0 || self.k_dec % 2 == 0 {
            return Err(UnetError::BadConfig("kernel sizes must be odd".into()));
        }
        if self.enc2 % self.se_reduction != 0 {
            return Err(UnetError::BadConfig("se_reduction must divide enc2".into()));
        }
        if self.in_channels != 1 + self.ps_channels + usize::from(self.refine) {
            return Err(UnetError::BadConfig(format!(
                "in_channels {} inconsistent with ps_channels {} and refine {}",
                self.in_channels, self.ps_channels, self.refine
            )));
        }
        Ok(())
    }

    fn conv1_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.in_channels,
            out_ch: self.enc1,
            k: self.k_enc,
            pad: PadMode::Circular,
        }
    }
    fn conv2_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.enc1,
            out_ch: self.enc2,
            k: self.k_enc,
            pad: PadMode::Circular,
        }
    }
    fn res_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.enc2,
            out_ch: self.enc2,
            k: self.k_enc,
            pad: PadMode::Circular,
        }
    }
    fn dec1_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.enc2,
            out_ch: self.enc1,
            k: self.k_dec,
            pad: PadMode::Zero,
        }
    }
    fn dec2_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.enc1,
            out_ch: 1,
            k: self.k_dec,
            pad: PadMode::Zero,
        }
    }
}

/// Trainable batch-norm parameters; running statistics live in [`BnState`].
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

impl<F: Scalar> BnParams<F> {
    fn identity(ch: usize) -> Self {
        Self {
            gamma: vec![F::one(); ch],
            beta: vec![F::zero(); ch],
        }
    }
    fn zeros(ch: usize) -> Self {
        Self {
            gamma: vec![F::zero(); ch],
            beta: vec![F::zero(); ch],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> BnState<F> {
    fn fresh(ch: usize) -> Self {
        Self {
            mean: vec![F::zero(); ch],
            var: vec![F::one(); ch],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<F> {
    pub w1: Mat<F>,
    pub b1: Vec<F>,
    pub w2: Mat<F>,
    pub b2: Vec<F>,
}

impl<F: Scalar> SeParams<F> {
    fn init(rng: &mut ChaCha8Rng, ch: usize, reduction: usize) -> Self {
        let hidden = ch / reduction;
        Self {
            w1: crate::tensor::randn_mat(rng, hidden, ch, ch),
            b1: vec![F::zero(); hidden],
            w2: crate::tensor::randn_mat(rng, ch, hidden, hidden),
            b2: vec![F::zero(); ch],
        }
    }
    fn zeros_like(&self) -> Self {
        Self {
            w1: self.w1.zeros_like(),
            b1: vec![F::zero(); self.b1.len()],
            w2: self.w2.zeros_like(),
            b2: vec![F::zero(); self.b2.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams<F> {
    pub conv_a: ConvParams<F>,
    pub bn_a: BnParams<F>,
    pub conv_b: ConvParams<F>,
    pub bn_b: BnParams<F>,
    pub se: SeParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetParams<F> {
    pub conv1: ConvParams<F>,
    pub bn1: BnParams<F>,
    pub conv2: ConvParams<F>,
    pub bn2: BnParams<F>,
    pub blocks: Vec<ResBlockParams<F>>,
    pub dec1: ConvParams<F>,
    pub bn_dec: BnParams<F>,
    pub dec2: ConvParams<F>,
}

/// Running batch-norm statistics, in encoder/blocks/decoder order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetStats<F> {
    pub bn1: BnState<F>,
    pub bn2: BnState<F>,
    pub blocks: Vec<(BnState<F>, BnState<F>)>,
    pub bn_dec: BnState<F>,
}

impl<F: Scalar> UnetParams<F> {
    fn init(cfg: &UnetConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: ConvParams::init(&cfg.conv1_spec(), rng),
            bn1: BnParams::identity(cfg.enc1),
            conv2: ConvParams::init(&cfg.conv2_spec(), rng),
            bn2: BnParams::identity(cfg.enc2),
            blocks: (0..cfg.res_blocks)
                .map(|_| ResBlockParams {
                    conv_a: ConvParams::init(&cfg.res_spec(), rng),
                    bn_a: BnParams::identity(cfg.enc2),
                    conv_b: ConvParams::init(&cfg.res_spec(), rng),
                    bn_b: BnParams::identity(cfg.enc2),
                    se: SeParams::init(rng, cfg.enc2, cfg.se_reduction),
                })
                .collect(),
            dec1: ConvParams::init(&cfg.dec1_spec(), rng),
            bn_dec: BnParams::identity(cfg.enc1),
            dec2: ConvParams::init(&cfg.dec2_spec(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let conv_zero = |c: &ConvParams<F>| ConvParams {
            w: vec![F::zero(); c.w.len()],
            b: vec![F::zero(); c.b.len()],
        };
        Self {
            conv1: conv_zero(&self.conv1),
            bn1: BnParams::zeros(self.bn1.gamma.len()),
            conv2: conv_zero(&self.conv2),
            bn2: BnParams::zeros(self.bn2.gamma.len()),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlockParams {
                    conv_a: conv_zero(&b.conv_a),
                    bn_a: BnParams::zeros(b.bn_a.gamma.len()),
                    conv_b: conv_zero(&b.conv_b),
                    bn_b: BnParams::zeros(b.bn_b.gamma.len()),
                    se: b.se.zeros_like(),
                })
                .collect(),
            dec1: conv_zero(&self.dec1),
            bn_dec: BnParams::zeros(self.bn_dec.gamma.len()),
            dec2: conv_zero(&self.dec2),
        }
    }

    pub fn flatten(&self) -> Vec<TensorEntry<'_, F>> {
        fn pv<'a, F>(out: &mut Vec<TensorEntry<'a, F>>, name: String, v: &'a [F]) {
            out.push(TensorEntry {
                name,
                shape: vec![v.len()],
                data: v,
            });
        }
        fn pm<'a, F>(out: &mut Vec<TensorEntry<'a, F>>, name: String, m: &'a Mat<F>) {
            out.push(TensorEntry {
                name,
                shape: vec![m.rows, m.cols],
                data: &m.data,
            });
        }
        let mut out = Vec::new();
        pv(&mut out, "conv1.w".into(), &self.conv1.w);
        pv(&mut out, "conv1.b".into(), &self.conv1.b);
        pv(&mut out, "bn1.gamma".into(), &self.bn1.gamma);
        pv(&mut out, "bn1.beta".into(), &self.bn1.beta);
        pv(&mut out, "conv2.w".into(), &self.conv2.w);
        pv(&mut out, "conv2.b".into(), &self.conv2.b);
        pv(&mut out, "bn2.gamma".into(), &self.bn2.gamma);
        pv(&mut out, "bn2.beta".into(), &self.bn2.beta);
        for (i, b) in self.blocks.iter().enumerate() {
            pv(&mut out, format!("blocks.{i}.conv_a.w"), &b.conv_a.w);
            pv(&mut out, format!("blocks.{i}.conv_a.b"), &b.conv_a.b);
            pv(&mut out, format!("blocks.{i}.bn_a.gamma"), &b.bn_a.gamma);
            pv(&mut out, format!("blocks.{i}.bn_a.beta"), &b.bn_a.beta);
            pv(&mut out, format!("blocks.{i}.conv_b.w"), &b.conv_b.w);
            pv(&mut out, format!("blocks.{i}.conv_b.b"), &b.conv_b.b);
            pv(&mut out, format!("blocks.{i}.bn_b.gamma"), &b.bn_b.gamma);
            pv(&mut out, format!("blocks.{i}.bn_b.beta"), &b.bn_b.beta);
            pm(&mut out, format!("blocks.{i}.se.w1"), &b.se.w1);
            pv(&mut out, format!("blocks.{i}.se.b1"), &b.se.b1);
            pm(&mut out, format!("blocks.{i}.se.w2"), &b.se.w2);
            pv(&mut out, format!("blocks.{i}.se.b2"), &b.se.b2);
        }
        pv(&mut out, "dec1.w".into(), &self.dec1.w);
        pv(&mut out, "dec1.b".into(), &self.dec1.b);
        pv(&mut out, "bn_dec.gamma".into(), &self.bn_dec.gamma);
        pv(&mut out, "bn_dec.beta".into(), &self.bn_dec.beta);
        pv(&mut out, "dec2.w".into(), &self.dec2.w);
        pv(&mut out, "dec2.b".into(), &self.dec2.b);
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<TensorEntryMut<'_, F>> {
        fn pv<'a, F>(out: &mut Vec<TensorEntryMut<'a, F>>, name: String, v: &'a mut [F]) {
            out.push(TensorEntryMut { name, data: v });
        }
        let mut out = Vec::new();
        pv(&mut out, "conv1.w".into(), &mut self.conv1.w);
        pv(&mut out, "conv1.b".into(), &mut self.conv1.b);
        pv(&mut out, "bn1.gamma".into(), &mut self.bn1.gamma);
        pv(&mut out, "bn1.beta".into(), &mut self.bn1.beta);
        pv(&mut out, "conv2.w".into(), &mut self.conv2.w);
        pv(&mut out, "conv2.b".into(), &mut self.conv2.b);
        pv(&mut out, "bn2.gamma".into(), &mut self.bn2.gamma);
        pv(&mut out, "bn2.beta".into(), &mut self.bn2.beta);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            pv(&mut out, format!("blocks.{i}.conv_a.w"), &mut b.conv_a.w);
            pv(&mut out, format!("blocks.{i}.conv_a.b"), &mut b.conv_a.b);
            pv(
                &mut out,
                format!("blocks.{i}.bn_a.gamma"),
                &mut b.bn_a.gamma,
            );
            pv(&mut out, format!("blocks.{i}.bn_a.beta"), &mut b.bn_a.beta);
            pv(&mut out, format!("blocks.{i}.conv_b.w"), &mut b.conv_b.w);
            pv(&mut out, format!("blocks.{i}.conv_b.b"), &mut b.conv_b.b);
            pv(
                &mut out,
                format!("blocks.{i}.bn_b.gamma"),
                &mut b.bn_b.gamma,
            );
            pv(&mut out, format!("blocks.{i}.bn_b.beta"), &mut b.bn_b.beta);
            pv(&mut out, format!("blocks.{i}.se.w1"), &mut b.se.w1.data);
            pv(&mut out, format!("blocks.{i}.se.b1"), &mut b.se.b1);
            pv(&mut out, format!("blocks.{i}.se.w2"), &mut b.se.w2.data);
            pv(&mut out, format!("blocks.{i}.se.b2"), &mut b.se.b2);
        }
        pv(&mut out, "dec1.w".into(), &mut self.dec1.w);
        pv(&mut out, "dec1.b".into(), &mut self.dec1.b);
        pv(&mut out, "bn_dec.gamma".into(), &mut self.bn_dec.gamma);
        pv(&mut out, "bn_dec.beta".into(), &mut self.bn_dec.beta);
        pv(&mut out, "dec2.w".into(), &mut self.dec2.w);
        pv(&mut out, "dec2.b".into(), &mut self.dec2.b);
        out
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        let src = other.flatten();
        for (dst, s) in self.flatten_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, s.name);
            for (d, &v) in dst.data.iter_mut().zip(s.data) {
                *d += v * scale;
            }
        }
    }
}

/// Train-time forward uses batch statistics; eval uses running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnCache<F> {
    xhat: Batch<F>,
    rstd: Vec<F>,
    batch_mean: Vec<F>,
    batch_var: Vec<F>,
}

struct SeCache<F> {
    input: Batch<F>,
    z: Mat<F>,
    s1_pre: Mat<F>,
    s1: Mat<F>,
    gate: Mat<F>,
}

struct BlockCache<F> {
    input: Batch<F>,
    bn_a: BnCache<F>,
    ra: Batch<F>,
    bn_b: BnCache<F>,
    se: SeCache<F>,
    out: Batch<F>,
}

/// Activations retained by a training-mode forward pass.
pub struct UnetCache<F> {
    input: Batch<F>,
    bn1: BnCache<F>,
    pub r1: Batch<F>,
    bn2: BnCache<F>,
    pub r2: Batch<F>,
    pool_idx: Vec<u32>,
    pooled: Batch<F>,
    blocks: Vec<BlockCache<F>>,
    bn_dec: BnCache<F>,
    rd: Batch<F>,
    pub y: Batch<F>,
}

fn bn_forward<F: Scalar>(
    x: &Batch<F>,
    p: &BnParams<F>,
    state: &BnState<F>,
    eps: f64,
    mode: Mode,
) -> (Batch<F>, Option<BnCache<F>>) {
    let ch = x.ch;
    let vox = x.vox();
    let eps = F::from_f64_lossy(eps);
    let mut y = Batch::zeros(x.n, ch, x.dims);
    match mode {
        Mode::Eval => {
            for c in 0..ch {
                let rs = F::one() / (state.var[c] + eps).sqrt();
                for b in 0..x.n {
                    let src = x.slice(b, c);
                    let dst = y.slice_mut(b, c);
                    for i in 0..vox {
                        dst[i] = (src[i] - state.mean[c]) * rs * p.gamma[c] + p.beta[c];
                    }
                }
            }
            (y, None)
        }
        Mode::Train => {
            let n = F::from_f64_lossy((x.n * vox) as f64);
            let mut xhat = Batch::zeros(x.n, ch, x.dims);
            let mut rstd = vec![F::zero(); ch];
            let mut means = vec![F::zero(); ch];
            let mut vars = vec![F::zero(); ch];
            for c in 0..ch {
                let mut sum = F::zero();
                for b in 0..x.n {
                    sum += x.slice(b, c).iter().cloned().sum::<F>();
                }
                let mean = sum / n;
                let mut var = F::zero();
                for b in 0..x.n {
                    for &v in x.slice(b, c) {
                        var += (v - mean) * (v - mean);
                    }
                }
                var /= n;
                let rs = F::one() / (var + eps).sqrt();
                means[c] = mean;
                vars[c] = var;
                rstd[c] = rs;
                for b in 0..x.n {
                    let src = x.slice(b, c);
                    let xh = xhat.slice_mut(b, c);
                    let out = y.slice_mut(b, c);
                    for i in 0..vox {
                        xh[i] = (src[i] - mean) * rs;
                        out[i] = xh[i] * p.gamma[c] + p.beta[c];
                    }
                }
            }
            (
                y,
                Some(BnCache {
                    xhat,
                    rstd,
                    batch_mean: means,
                    batch_var: vars,
                }),
            )
        }
    }
}

fn bn_backward<F: Scalar>(
    dy: &Batch<F>,
    cache: &BnCache<F>,
    p: &BnParams<F>,
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Batch<F> {
    let ch = dy.ch;
    let vox = dy.vox();
    let n = F::from_f64_lossy((dy.n * vox) as f64);
    let mut dx = Batch::zeros(dy.n, ch, dy.dims);
    for c in 0..ch {
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for b in 0..dy.n {
            let d = dy.slice(b, c);
            let xh = cache.xhat.slice(b, c);
            for i in 0..vox {
                sum_dy += d[i];
                sum_dy_xhat += d[i] * xh[i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let g = p.gamma[c];
        let rs = cache.rstd[c];
        let m1 = sum_dy / n;
        let m2 = sum_dy_xhat / n;
        for b in 0..dy.n {
            let d = dy.slice(b, c);
            let xh = cache.xhat.slice(b, c);
            let mut row = vec![F::zero(); vox];
            for i in 0..vox {
                row[i] = g * rs * (d[i] - m1 - xh[i] * m2);
            }
            dx.slice_mut(b, c).copy_from_slice(&row);
        }
    }
    dx
}

fn relu_batch<F: Scalar>(x: &Batch<F>) -> Batch<F> {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    y
}

/// Masks `grad` where the stored relu output is zero.
fn relu_batch_backward<F: Scalar>(out: &Batch<F>, grad: &mut Batch<F>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

fn maxpool2<F: Scalar>(x: &Batch<F>) -> (Batch<F>, Vec<u32>) {
    let (n1, n2, n3) = x.dims;
    let half = (n1 / 2, n2 / 2, n3 / 2);
    let mut y = Batch::zeros(x.n, x.ch, half);
    let mut idx = vec![0u32; x.n * x.ch * half.0 * half.1 * half.2];
    let hv = half.0 * half.1 * half.2;
    for b in 0..x.n {
        for c in 0..x.ch {
            let src = x.slice(b, c);
            let dst = y.slice_mut(b, c);
            let ibase = (b * x.ch + c) * hv;
            for i in 0..half.0 {
                for j in 0..half.1 {
                    for k in 0..half.2 {
                        let mut best = F::neg_infinity();
                        let mut best_at = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                for dk in 0..2 {
                                    let at = ((2 * i + di) * n2 + (2 * j + dj)) * n3 + (2 * k + dk);
                                    if src[at] > best {
                                        best = src[at];
                                        best_at = at;
                                    }
                                }
                            }
                        }
                        let o = (i * half.1 + j) * half.2 + k;
                        dst[o] = best;
                        idx[ibase + o] = best_at as u32;
                    }
                }
            }
        }
    }
    (y, idx)
}

fn maxpool2_backward<F: Scalar>(dy: &Batch<F>, idx: &[u32], full_dims: Dims3) -> Batch<F> {
    let mut dx = Batch::zeros(dy.n, dy.ch, full_dims);
    let hv = dy.vox();
    for b in 0..dy.n {
        for c in 0..dy.ch {
            let d = dy.slice(b, c);
            let ibase = (b * dy.ch + c) * hv;
            let dst = dx.slice_mut(b, c);
            for (o, &g) in d.iter().enumerate() {
                dst[idx[ibase + o] as usize] += g;
            }
        }
    }
    dx
}

fn upsample2<F: Scalar>(x: &Batch<F>) -> Batch<F> {
    let (n1, n2, n3) = x.dims;
    let full = (2 * n1, 2 * n2, 2 * n3);
    let mut y = Batch::zeros(x.n, x.ch, full);
    for b in 0..x.n {
        for c in 0..x.ch {
            let src = x.slice(b, c);
            let dst = y.slice_mut(b, c);
            for i in 0..2 * n1 {
                for j in 0..2 * n2 {
                    for k in 0..2 * n3 {
                        dst[(i * 2 * n2 + j) * 2 * n3 + k] =
                            src[((i / 2) * n2 + j / 2) * n3 + k / 2];
                    }
                }
            }
        }
    }
    y
}

fn upsample2_backward<F: Scalar>(dy: &Batch<F>) -> Batch<F> {
    let (m1, m2, m3) = dy.dims;
    let half = (m1 / 2, m2 / 2, m3 / 2);
    let mut dx = Batch::zeros(dy.n, dy.ch, half);
    for b in 0..dy.n {
        for c in 0..dy.ch {
            let src = dy.slice(b, c);
            let dst = dx.slice_mut(b, c);
            for i in 0..m1 {
                for j in 0..m2 {
                    for k in 0..m3 {
                        dst[((i / 2) * half.1 + j / 2) * half.2 + k / 2] +=
                            src[(i * m2 + j) * m3 + k];
                    }
                }
            }
        }
    }
    dx
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

fn se_forward<F: Scalar>(x: &Batch<F>, p: &SeParams<F>) -> (Batch<F>, SeCache<F>) {
    let vox = x.vox();
    let inv = F::from_f64_lossy(1.0 / vox as f64);
    let mut z = Mat::zeros(x.n, x.ch);
    for b in 0..x.n {
        for c in 0..x.ch {
            z.row_mut(b)[c] = x.slice(b, c).iter().cloned().sum::<F>() * inv;
        }
    }
    let mut s1_pre = Mat::zeros(x.n, p.w1.rows);
    gemm(
        &mut s1_pre,
        &z,
        Trans::No,
        &p.w1,
        Trans::Yes,
        F::one(),
        F::zero(),
    );
    for r in 0..s1_pre.rows {
        for (v, &b) in s1_pre.row_mut(r).iter_mut().zip(&p.b1) {
            *v += b;
        }
    }
    let mut s1 = s1_pre.clone();
    for v in &mut s1.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    let mut s2 = Mat::zeros(x.n, p.w2.rows);
    gemm(
        &mut s2,
        &s1,
        Trans::No,
        &p.w2,
        Trans::Yes,
        F::one(),
        F::zero(),
    );
    for r in 0..s2.rows {
        for (v, &b) in s2.row_mut(r).iter_mut().zip(&p.b2) {
            *v += b;
        }
    }
    let gate = Mat::from_vec(x.n, x.ch, s2.data.iter().map(|&v| sigmoid(v)).collect());
    let mut y = x.clone();
    for b in 0..x.n {
        for c in 0..x.ch {
            let g = gate.at(b, c);
            for v in y.slice_mut(b, c) {
                *v *= g;
            }
        }
    }
    (
        y,
        SeCache {
            input: x.clone(),
            z,
            s1_pre,
            s1,
            gate,
        },
    )
}

fn se_backward<F: Scalar>(
    dy: &Batch<F>,
    cache: &SeCache<F>,
    p: &SeParams<F>,
    grads: &mut SeParams<F>,
) -> Batch<F> {
    let x = &cache.input;
    let vox = x.vox();
    let inv = F::from_f64_lossy(1.0 / vox as f64);

    // Gradient into the gates and the pass-through path.
    let mut dgate = Mat::zeros(x.n, x.ch);
    let mut dx = dy.clone();
    for b in 0..x.n {
        for c in 0..x.ch {
            let g = cache.gate.at(b, c);
            let mut acc = F::zero();
            let xs = x.slice(b, c);
            let ds = dy.slice(b, c);
            for i in 0..vox {
                acc += ds[i] * xs[i];
            }
            dgate.row_mut(b)[c] = acc;
            for v in dx.slice_mut(b, c) {
                *v *= g;
            }
        }
    }

    // sigmoid, fc2, relu, fc1, pool.
    let mut ds2 = dgate;
    for (d, &g) in ds2.data.iter_mut().zip(&cache.gate.data) {
        *d = *d * g * (F::one() - g);
    }
    let mut ds1 = Mat::zeros(x.n, p.w2.cols);
    gemm(
        &mut ds1,
        &ds2,
        Trans::No,
        &p.w2,
        Trans::No,
        F::one(),
        F::zero(),
    );
    gemm(
        &mut grads.w2,
        &ds2,
        Trans::Yes,
        &cache.s1,
        Trans::No,
        F::one(),
        F::one(),
    );
    for r in 0..ds2.rows {
        for (g, &v) in grads.b2.iter_mut().zip(ds2.row(r)) {
            *g += v;
        }
    }
    for (d, &pre) in ds1.data.iter_mut().zip(&cache.s1_pre.data) {
        if pre <= F::zero() {
            *d = F::zero();
        }
    }
    let mut dz = Mat::zeros(x.n, p.w1.cols);
    gemm(
        &mut dz,
        &ds1,
        Trans::No,
        &p.w1,
        Trans::No,
        F::one(),
        F::zero(),
    );
    gemm(
        &mut grads.w1,
        &ds1,
        Trans::Yes,
        &cache.z,
        Trans::No,
        F::one(),
        F::one(),
    );
    for r in 0..ds1.rows {
        for (g, &v) in grads.b1.iter_mut().zip(ds1.row(r)) {
            *g += v;
        }
    }
    for b in 0..x.n {
        for c in 0..x.ch {
            let spread = dz.at(b, c) * inv;
            for v in dx.slice_mut(b, c) {
                *v += spread;
            }
        }
    }
    dx
}

pub struct Unet<F: Scalar> {
    pub cfg: UnetConfig,
    pub params: UnetParams<F>,
    pub stats: UnetStats<F>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRYU";

impl<F: Scalar> Unet<F> {
    pub fn new(cfg: UnetConfig, rng: &mut ChaCha8Rng) -> Result<Self, UnetError> {
        cfg.validate()?;
        let params = UnetParams::init(&cfg, rng);
        let stats = UnetStats {
            bn1: BnState::fresh(cfg.enc1),
            bn2: BnState::fresh(cfg.enc2),
            blocks: (0..cfg.res_blocks)
                .map(|_| (BnState::fresh(cfg.enc2), BnState::fresh(cfg.enc2)))
                .collect(),
            bn_dec: BnState::fresh(cfg.enc1),
        };
        Ok(Self { cfg, params, stats })
    }

    fn check_input(&self, x: &Batch<F>) -> Result<(), UnetError> {
        if x.ch != self.cfg.in_channels {
            return Err(UnetError::ChannelMismatch {
                got: x.ch,
                want: self.cfg.in_channels,
            });
        }
        let (n1, n2, n3) = x.dims;
        if n1 % 2 != 0 || n2 % 2 != 0 || n3 % 2 != 0 {
            return Err(UnetError::OddDims(x.dims));
        }
        Ok(())
    }

    /// Forward pass. Training mode returns the cache needed by
    /// [`Self::backward`]; eval mode normalizes with running statistics.
    pub fn forward(
        &self,
        x: &Batch<F>,
        mode: Mode,
    ) -> Result<(Batch<F>, Option<UnetCache<F>>), UnetError> {
        self.check_input(x)?;
        let cfg = &self.cfg;
        let p = &self.params;

        let a1 = conv3d_forward(x, &cfg.conv1_spec(), &p.conv1);
        let (b1, bn1c) = bn_forward(&a1, &p.bn1, &self.stats.bn1, cfg.bn_eps, mode);
        let r1 = relu_batch(&b1);
        let a2 = conv3d_forward(&r1, &cfg.conv2_spec(), &p.conv2);
        let (b2, bn2c) = bn_forward(&a2, &p.bn2, &self.stats.bn2, cfg.bn_eps, mode);
        let r2 = relu_batch(&b2);
        let (pooled, pool_idx) = maxpool2(&r2);

        let mut t = pooled.clone();
        let mut block_caches = Vec::with_capacity(cfg.res_blocks);
        for (i, blk) in p.blocks.iter().enumerate() {
            let aa = conv3d_forward(&t, &cfg.res_spec(), &blk.conv_a);
            let (ba, bn_ac) = bn_forward(&aa, &blk.bn_a, &self.stats.blocks[i].0, cfg.bn_eps, mode);
            let ra = relu_batch(&ba);
            let ab = conv3d_forward(&ra, &cfg.res_spec(), &blk.conv_b);
            let (bb, bn_bc) = bn_forward(&ab, &blk.bn_b, &self.stats.blocks[i].1, cfg.bn_eps, mode);
            let (scaled, sec) = se_forward(&bb, &blk.se);
            let mut sum = scaled;
            for (s, &skip) in sum.data.iter_mut().zip(&t.data) {
                *s += skip;
            }
            let out = relu_batch(&sum);
            if mode == Mode::Train {
                block_caches.push(BlockCache {
                    input: t,
                    bn_a: bn_ac.expect("train cache"),
                    ra,
                    bn_b: bn_bc.expect("train cache"),
                    se: sec,
                    out: out.clone(),
                });
            }
            t = out;
        }

        let up = upsample2(&t);
        let d1 = conv3d_forward(&up, &cfg.dec1_spec(), &p.dec1);
        let (bd, bn_dc) = bn_forward(&d1, &p.bn_dec, &self.stats.bn_dec, cfg.bn_eps, mode);
        let rd = relu_batch(&bd);
        let d2 = conv3d_forward(&rd, &cfg.dec2_spec(), &p.dec2);
        let mut y = d2;
        for v in &mut y.data {
            *v = v.tanh();
        }

        let cache = if mode == Mode::Train {
            Some(UnetCache {
                input: x.clone(),
                bn1: bn1c.expect("train cache"),
                r1,
                bn2: bn2c.expect("train cache"),
                r2,
                pool_idx,
                pooled,
                blocks: block_caches,
                bn_dec: bn_dc.expect("train cache"),
                rd,
                y: y.clone(),
            })
        } else {
            None
        };
        Ok((y, cache))
    }

    /// Parameter gradients and nothing else; inputs receive no gradient.
    pub fn backward(&self, cache: &UnetCache<F>, d_out: &Batch<F>) -> UnetParams<F> {
        let cfg = &self.cfg;
        let p = &self.params;
        let mut g = p.zeros_like();

        // tanh and decoder.
        let mut dd2 = d_out.clone();
        for (d, &y) in dd2.data.iter_mut().zip(&cache.y.data) {
            *d *= F::one() - y * y;
        }
        let (mut drd, g_dec2) = conv3d_backward(&cache.rd, &dd2, &cfg.dec2_spec(), &p.dec2);
        add_conv(&mut g.dec2, &g_dec2);
        relu_batch_backward(&cache.rd, &mut drd);
        let dd1 = bn_backward(
            &drd,
            &cache.bn_dec,
            &p.bn_dec,
            &mut g.bn_dec.gamma,
            &mut g.bn_dec.beta,
        );
        let up = upsample2(cache.blocks.last().map(|b| &b.out).unwrap_or(&cache.pooled));
        let (dup, g_dec1) = conv3d_backward(&up, &dd1, &cfg.dec1_spec(), &p.dec1);
        add_conv(&mut g.dec1, &g_dec1);
        let mut dt = upsample2_backward(&dup);

        // Residual blocks in reverse.
        for (i, blk) in p.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            relu_batch_backward(&bc.out, &mut dt);
            // Skip connection: gradient reaches both the SE path and the input.
            let mut dskip = dt.clone();
            let mut blk_grads = ResBlockParams {
                conv_a: ConvParams {
                    w: vec![F::zero(); blk.conv_a.w.len()],
                    b: vec![F::zero(); blk.conv_a.b.len()],
                },
                bn_a: BnParams::zeros(blk.bn_a.gamma.len()),
                conv_b: ConvParams {
                    w: vec![F::zero(); blk.conv_b.w.len()],
                    b: vec![F::zero(); blk.conv_b.b.len()],
                },
                bn_b: BnParams::zeros(blk.bn_b.gamma.len()),
                se: blk.se.zeros_like(),
            };
            let dbb = se_backward(&dt, &bc.se, &blk.se, &mut blk_grads.se);
            let dab = bn_backward(
                &dbb,
                &bc.bn_b,
                &blk.bn_b,
                &mut blk_grads.bn_b.gamma,
                &mut blk_grads.bn_b.beta,
            );
            let (mut dra, g_cb) = conv3d_backward(&bc.ra, &dab, &cfg.res_spec(), &blk.conv_b);
            add_conv(&mut blk_grads.conv_b, &g_cb);
            relu_batch_backward(&bc.ra, &mut dra);
            let daa = bn_backward(
                &dra,
                &bc.bn_a,
                &blk.bn_a,
                &mut blk_grads.bn_a.gamma,
                &mut blk_grads.bn_a.beta,
            );
            let (dinput, g_ca) = conv3d_backward(&bc.input, &daa, &cfg.res_spec(), &blk.conv_a);
            add_conv(&mut blk_grads.conv_a, &g_ca);
            for (a, &b) in dskip.data.iter_mut().zip(&dinput.data) {
                *a += b;
            }
            dt = dskip;
            g.blocks[i] = blk_grads;
        }

        // Encoder.
        let mut dr2 = maxpool2_backward(&dt, &cache.pool_idx, cache.r2.dims);
        relu_batch_backward(&cache.r2, &mut dr2);
        let da2 = bn_backward(&dr2, &cache.bn2, &p.bn2, &mut g.bn2.gamma, &mut g.bn2.beta);
        let (mut dr1, g_c2) = conv3d_backward(&cache.r1, &da2, &cfg.conv2_spec(), &p.conv2);
        add_conv(&mut g.conv2, &g_c2);
        relu_batch_backward(&cache.r1, &mut dr1);
        let da1 = bn_backward(&dr1, &cache.bn1, &p.bn1, &mut g.bn1.gamma, &mut g.bn1.beta);
        let (_, g_c1) = conv3d_backward(&cache.input, &da1, &cfg.conv1_spec(), &p.conv1);
        add_conv(&mut g.conv1, &g_c1);
        g
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// averages, PyTorch-style: biased batch variance normalizes, unbiased
    /// updates the average.
    pub fn update_running_stats(&mut self, cache: &UnetCache<F>) {
        let m = F::from_f64_lossy(self.cfg.bn_momentum);
        let one_m = F::one() - m;
        let apply = |state: &mut BnState<F>, c: &BnCache<F>, n: usize| {
            let unbias = F::from_f64_lossy(n as f64 / (n as f64 - 1.0).max(1.0));
            for i in 0..state.mean.len() {
                state.mean[i] = one_m * state.mean[i] + m * c.batch_mean[i];
                state.var[i] = one_m * state.var[i] + m * c.batch_var[i] * unbias;
            }
        };
        let n_full = cache.input.n * cache.r1.vox();
        let n_half = cache.input.n * cache.pooled.vox();
        apply(&mut self.stats.bn1, &cache.bn1, n_full);
        apply(&mut self.stats.bn2, &cache.bn2, n_full);
        for (i, bc) in cache.blocks.iter().enumerate() {
            apply(&mut self.stats.blocks[i].0, &bc.bn_a, n_half);
            apply(&mut self.stats.blocks[i].1, &bc.bn_b, n_half);
        }
        apply(&mut self.stats.bn_dec, &cache.bn_dec, n_full);
    }

    fn stats_tensors(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        let mut push = |name: String, v: &[F]| {
            out.push((name, v.iter().map(|x| x.to_f64_lossy() as f32).collect()));
        };
        push("stats.bn1.mean".into(), &self.stats.bn1.mean);
        push("stats.bn1.var".into(), &self.stats.bn1.var);
        push("stats.bn2.mean".into(), &self.stats.bn2.mean);
        push("stats.bn2.var".into(), &self.stats.bn2.var);
        for (i, (a, b)) in self.stats.blocks.iter().enumerate() {
            push(format!("stats.blocks.{i}.a.mean"), &a.mean);
            push(format!("stats.blocks.{i}.a.var"), &a.var);
            push(format!("stats.blocks.{i}.b.mean"), &b.mean);
            push(format!("stats.blocks.{i}.b.var"), &b.var);
        }
        push("stats.bn_dec.mean".into(), &self.stats.bn_dec.mean);
        push("stats.bn_dec.var".into(), &self.stats.bn_dec.var);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), crate::io::IoError> {
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        let mut tensors: Vec<crate::io::NamedTensor> = self
            .params
            .flatten()
            .into_iter()
            .map(|e| crate::io::NamedTensor {
                name: e.name,
                shape: e.shape,
                data: e.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect();
        for (name, data) in self.stats_tensors() {
            let shape = vec![data.len()];
            tensors.push(crate::io::NamedTensor { name, shape, data });
        }
        crate::io::write_container(path, CHECKPOINT_MAGIC, &cfg, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Unet<F>, crate::io::IoError> {
        let (cfg_json, tensors) = crate::io::read_container(path, CHECKPOINT_MAGIC)?;
        let cfg: UnetConfig = serde_json::from_str(&cfg_json).map_err(|e| {
            crate::io::IoError::parse(&path.display().to_string(), "config", e.to_string())
        })?;
        let mut rng = crate::util::substream_rng(0, "load", 0);
        let mut net = Unet::<F>::new(cfg, &mut rng).map_err(|e| {
            crate::io::IoError::parse(&path.display().to_string(), "config", e.to_string())
        })?;
        let mut by_name: std::collections::BTreeMap<String, crate::io::NamedTensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        for entry in net.params.flatten_mut() {
            let t = by_name.remove(&entry.name).ok_or_else(|| {
                crate::io::IoError::parse(
                    &path.display().to_string(),
                    &entry.name,
                    "tensor missing",
                )
            })?;
            if t.data.len() != entry.data.len() {
                return Err(crate::io::IoError::parse(
                    &path.display().to_string(),
                    &entry.name,
                    "length mismatch",
                ));
            }
            for (dst, &src) in entry.data.iter_mut().zip(&t.data) {
                *dst = F::from_f64_lossy(src as f64);
            }
        }
        let mut set_state = |name: String, dst: &mut Vec<F>| -> Result<(), crate::io::IoError> {
            let t = by_name.remove(&name).ok_or_else(|| {
                crate::io::IoError::parse(&path.display().to_string(), &name, "tensor missing")
            })?;
            *dst = t
                .data
                .iter()
                .map(|&v| F::from_f64_lossy(v as f64))
                .collect();
            Ok(())
        };
        set_state("stats.bn1.mean".into(), &mut net.stats.bn1.mean)?;
        set_state("stats.bn1.var".into(), &mut net.stats.bn1.var)?;
        set_state("stats.bn2.mean".into(), &mut net.stats.bn2.mean)?;
        set_state("stats.bn2.var".into(), &mut net.stats.bn2.var)?;
        for i in 0..net.stats.blocks.len() {
            set_state(
                format!("stats.blocks.{i}.a.mean"),
                &mut net.stats.blocks[i].0.mean,
            )?;
            set_state(
                format!("stats.blocks.{i}.a.var"),
                &mut net.stats.blocks[i].0.var,
            )?;
            set_state(
                format!("stats.blocks.{i}.b.mean"),
                &mut net.stats.blocks[i].1.mean,
            )?;
            set_state(
                format!("stats.blocks.{i}.b.var"),
                &mut net.stats.blocks[i].1.var,
            )?;
        }
        set_state("stats.bn_dec.mean".into(), &mut net.stats.bn_dec.mean)?;
        set_state("stats.bn_dec.var".into(), &mut net.stats.bn_dec.var)?;
        Ok(net)
    }
}

fn add_conv<F: Scalar>(dst: &mut ConvParams<F>, src: &ConvParams<F>) {
    for (a, b) in dst.w.iter_mut().zip(&src.w) {
        *a += *b;
    }
    for (a, b) in dst.b.iter_mut().zip(&src.b) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::substream_rng;
    use rand::Rng;

    fn random_batch(n: usize, ch: usize, dims: Dims3, seed: u64) -> Batch<f64> {
        let mut rng = substream_rng(seed, "unet-test", 0);
        let mut b = Batch::zeros(n, ch, dims);
        for v in &mut b.data {
            *v = rng.random_range(-1.0..1.0);
        }
        b
    }

    fn tiny_net(seed: u64) -> Unet<f64> {
        let mut rng = substream_rng(seed, "init", 0);
        Unet::new(UnetConfig::tiny(), &mut rng).unwrap()
    }

    #[test]
    fn output_dims_and_range_are_preserved() {
        let net = tiny_net(1);
        let x = random_batch(2, 1, (8, 6, 4), 2);
        let (y, cache) = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dims, x.dims);
        assert_eq!(y.ch, 1);
        for &v in &y.data {
            assert!((-1.0..=1.0).contains(&v));
        }
        assert!(cache.is_some());
    }

    #[test]
    fn channel_counts_for_ps_and_refine_variants() {
        // vanilla = 1; +PS with two partials = 3; +PS+R = 4.
        let vanilla = UnetConfig::default();
        assert_eq!(vanilla.in_channels, 1);
        vanilla.validate().unwrap();
        let ps = UnetConfig {
            in_channels: 3,
            ps_channels: 2,
            ..UnetConfig::default()
        };
        assert_eq!(ps.in_channels, 3);
        ps.validate().unwrap();
        let ps_r = UnetConfig {
            in_channels: 4,
            ps_channels: 2,
            refine: true,
            ..UnetConfig::default()
        };
        assert_eq!(ps_r.in_channels, 4);
        ps_r.validate().unwrap();
        assert!(UnetConfig {
            in_channels: 2,
            ..UnetConfig::default()
        }
        .validate()
        .is_err());
        let mut rng = substream_rng(3, "init", 0);
        let cfg = UnetConfig {
            in_channels: 4,
            ps_channels: 2,
            refine: true,
            ..UnetConfig::tiny()
        };
        let net = Unet::<f64>::new(cfg, &mut rng).unwrap();
        let x = random_batch(1, 4, (4, 4, 4), 4);
        net.forward(&x, Mode::Train).unwrap();
        let bad = random_batch(1, 2, (4, 4, 4), 5);
        assert!(matches!(
            net.forward(&bad, Mode::Train),
            Err(UnetError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn odd_dims_are_rejected() {
        let net = tiny_net(6);
        let x = random_batch(1, 1, (5, 4, 4), 7);
        assert!(matches!(
            net.forward(&x, Mode::Train),
            Err(UnetError::OddDims(_))
        ));
    }

    #[test]
    fn eval_mode_is_deterministic_and_uses_running_stats() {
        let mut net = tiny_net(8);
        let x = random_batch(2, 1, (4, 4, 4), 9);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        net.update_running_stats(&cache.unwrap());
        let (a, c1) = net.forward(&x, Mode::Eval).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval).unwrap();
        assert!(c1.is_none());
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn saturated_gates_reduce_to_plain_residual_block() {
        // f32 rounding makes sigmoid(20) equal 1.0 exactly.
        let mut rng = substream_rng(10, "init", 0);
        let mut net = Unet::<f32>::new(UnetConfig::tiny(), &mut rng).unwrap();
        for blk in &mut net.params.blocks {
            blk.se.w1.data.iter_mut().for_each(|v| *v = 0.0);
            blk.se.b1.iter_mut().for_each(|v| *v = 0.0);
            blk.se.w2.data.iter_mut().for_each(|v| *v = 0.0);
            blk.se.b2.iter_mut().for_each(|v| *v = 20.0);
        }
        let x = {
            let mut rng = substream_rng(11, "x", 0);
            let mut b = Batch::<f32>::zeros(1, 1, (4, 4, 4));
            for v in &mut b.data {
                *v = rng.random_range(-1.0..1.0);
            }
            b
        };
        let (y_gated, cache) = net.forward(&x, Mode::Train).unwrap();
        let cache = cache.unwrap();
        for bc in &cache.blocks {
            for &g in &bc.se.gate.data {
                assert_eq!(g, 1.0f32);
            }
        }

        // Reference: same parameters with the SE scaling skipped entirely.
        // With unit gates the block must match bit for bit, which we verify
        // by recomputing the block arithmetic from the cache.
        for bc in &cache.blocks {
            let mut expect = bc.se.input.clone(); // post-bn_b tensor
            for (e, &skip) in expect.data.iter_mut().zip(&bc.input.data) {
                *e += skip;
            }
            for v in &mut expect.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            assert_eq!(expect.data, bc.out.data);
        }
        let _ = y_gated;
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let net = tiny_net(12);
        let x = random_batch(2, 1, (4, 4, 4), 13);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        for bc in &cache.unwrap().blocks {
            for &g in &bc.se.gate.data {
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn pre_pool_activations_are_translation_equivariant() {
        let net = tiny_net(14);
        let dims = (6, 6, 6);
        let x = random_batch(1, 1, dims, 15);
        let mut shifted = Batch::zeros(1, 1, dims);
        let (n1, n2, n3) = dims;
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    shifted.slice_mut(0, 0)[(((i + 1) % n1) * n2 + j) * n3 + k] =
                        x.slice(0, 0)[(i * n2 + j) * n3 + k];
                }
            }
        }
        let (_, ca) = net.forward(&x, Mode::Train).unwrap();
        let (_, cb) = net.forward(&shifted, Mode::Train).unwrap();
        let (ra, rb) = (ca.unwrap().r2, cb.unwrap().r2);
        for c in 0..ra.ch {
            for i in 0..n1 {
                for j in 0..n2 {
                    for k in 0..n3 {
                        let a = ra.slice(0, c)[(i * n2 + j) * n3 + k];
                        let b = rb.slice(0, c)[(((i + 1) % n1) * n2 + j) * n3 + k];
                        assert!((a - b).abs() < 1e-9, "channel {c} at ({i},{j},{k})");
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval_outputs() {
        let mut net = tiny_net(16);
        let x = random_batch(2, 1, (4, 4, 4), 17);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        net.update_running_stats(&cache.unwrap());
        let path = std::env::temp_dir().join(format!("crysforge-unet-{}.crys", std::process::id()));
        net.save(&path).unwrap();
        let loaded = Unet::<f64>::load(&path).unwrap();
        std::fs::remove_file(&path).ok();
        let (a, _) = net.forward(&x, Mode::Eval).unwrap();
        let (b, _) = loaded.forward(&x, Mode::Eval).unwrap();
        for (x1, x2) in a.data.iter().zip(&b.data) {
            assert!((x1 - x2).abs() < 1e-6);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let net = tiny_net(18);
        let x = random_batch(2, 1, (8, 8, 8), 19);
        let target = random_batch(2, 1, (8, 8, 8), 20);

        let loss = |net: &Unet<f64>| -> f64 {
            let (y, _) = net.forward(&x, Mode::Train).unwrap();
            let n = y.data.len() as f64;
            y.data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        };

        let (y, cache) = net.forward(&x, Mode::Train).unwrap();
        let cache = cache.unwrap();
        let n = y.data.len() as f64;
        let mut d_out = y.clone();
        for (d, (&a, &b)) in d_out.data.iter_mut().zip(y.data.iter().zip(&target.data)) {
            *d = 2.0 * (a - b) / n;
        }
        let grads = net.backward(&cache, &d_out);

        let analytic = grads.flatten();
        let mut worst = 0.0f64;
        for (t_idx, entry) in net.params.flatten().iter().enumerate() {
            let len = entry.data.len();
            let picks: Vec<usize> = [0, len / 2, len - 1]
                .into_iter()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for &i in &picks {
                let mut perturbed = Unet {
                    cfg: net.cfg.clone(),
                    params: net.params.clone(),
                    stats: net.stats.clone(),
                };
                let h = 1e-5 * (1.0 + entry.data[i].abs());
                perturbed.params.flatten_mut()[t_idx].data[i] = entry.data[i] + h;
                let up = loss(&perturbed);
                perturbed.params.flatten_mut()[t_idx].data[i] = entry.data[i] - h;
                let down = loss(&perturbed);
                let fd = (up - down) / (2.0 * h);
                let an = analytic[t_idx].data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                if (fd - an).abs() > 1e-8 {
                    worst = worst.max(rel);
                }
                assert!(
                    rel <= 1e-4 || (fd - an).abs() <= 1e-8,
                    "{}[{}]: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.3e})",
                    entry.name,
                    i
                );
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
