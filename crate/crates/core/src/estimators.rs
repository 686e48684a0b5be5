//! Channel estimation and blockage prediction models with their baselines,
//! training loops and evaluation metrics.
//!
//! Channel estimators work in a reference-normalised space: the true channel
//! is divided by the free-space coefficient at the array-mean UE distance
//! `d_ref`, so targets are `O(1)` and only the across-array variation has to
//! be learned. `csi_forward` undoes the normalisation from the features.
//!
//! Blockage predictors output the probability that each UE is *blocked*
//! (`1 - b_k`).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{los_channel, ComplexVector};
use crate::error::{invalid, Error, Result};
use crate::geometry::{geometric_features, ArrayGeometry, GeometricFeatures, Position3};
use crate::neural::layers::{bce_loss, mse_loss, relu, relu_backward, sigmoid, sigmoid_backward};
use crate::neural::{Adam, Conv1d, EncoderBlock, EncoderCache, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor};
use crate::scenario::{Aabb, FrameSequence, LabeledSample};

/// Network with a hand-written backward pass over its own parameter store.
pub trait Network {
    type Input: ?Sized;
    type Cache;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, x: &Self::Input) -> Result<(Tensor, Self::Cache)>;
    /// Accumulates parameter gradients for upstream gradient `dy`.
    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 16, learning_rate: 1e-3 }
    }
}

/// Per-epoch mean training loss; entry 0 is the loss at initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.loss_curve[0]
    }

    pub fn last(&self) -> f64 {
        *self.loss_curve.last().expect("curve holds the initial loss")
    }
}

fn sample_loss(loss: Loss, pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    match loss {
        Loss::Mse => mse_loss(pred, target),
        Loss::Bce => bce_loss(pred, target, 1e-7),
    }
}

/// Mean loss of `net` over the whole set without touching gradients.
pub fn evaluate_loss<N: Network>(net: &N, inputs: &[&N::Input], targets: &[Tensor], loss: Loss) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let (y, _) = net.forward(x)?;
        total += sample_loss(loss, &y, t).0;
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Mini-batch Adam on the mean per-sample loss. Aborts on a non-finite loss
/// or gradient.
pub fn fit<N: Network, R: Rng>(
    net: &mut N,
    inputs: &[&N::Input],
    targets: &[Tensor],
    loss: Loss,
    tc: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(invalid("training set must be nonempty with one target per input"));
    }
    if tc.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let mut curve = vec![evaluate_loss(net, inputs, targets, loss)?];
    let mut adam = Adam::new(net.params(), tc.learning_rate);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            net.params_mut().zero_grads();
            for &i in batch {
                let (y, cache) = net.forward(inputs[i])?;
                let (l, dy) = sample_loss(loss, &y, &targets[i]);
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, sample {i}")));
                }
                total += l;
                net.backward(&cache, &dy);
            }
            net.params_mut().scale_grads(1.0 / batch.len() as f64);
            if !net.params().grads_finite() {
                return Err(Error::Diverged(format!("non-finite gradient at epoch {epoch}")));
            }
            adam.step(net.params_mut());
        }
        curve.push(total / inputs.len() as f64);
    }
    Ok(TrainReport { loss_curve: curve })
}

/// `||est - truth||^2 / ||truth||^2`.
pub fn nmse(est: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(invalid("estimate and truth differ in length"));
    }
    let den: f64 = truth.iter().map(|v| v.norm_sqr()).sum();
    if !(den > 0.0) {
        return Err(invalid("truth has zero energy"));
    }
    Ok(est.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / den)
}

/// Free-space coefficient at the mean element distance; the normalisation
/// reference shared by targets and estimates.
pub fn reference_coefficient(features: &GeometricFeatures, lambda: f64) -> Complex64 {
    let d = features.rows.iter().map(|r| r[0]).sum::<f64>() / features.len() as f64;
    Complex64::from_polar(lambda / (4.0 * PI * d), -2.0 * PI * d / lambda)
}

/// Normalised channel as `[1, 2N]` reals: real parts, then imaginary parts.
pub fn normalized_target(features: &GeometricFeatures, channel: &[Complex64], lambda: f64) -> Tensor {
    let r = reference_coefficient(features, lambda);
    let n = channel.len();
    let mut data = vec![0.0; 2 * n];
    for (i, h) in channel.iter().enumerate() {
        let t = h / r;
        data[i] = t.re;
        data[n + i] = t.im;
    }
    Tensor::from_vec(&[1, 2 * n], data).expect("shape")
}

fn denormalize(features: &GeometricFeatures, out: &Tensor, lambda: f64) -> ComplexVector {
    let r = reference_coefficient(features, lambda);
    let n = out.cols() / 2;
    let d = out.data();
    (0..n).map(|i| Complex64::new(d[i], d[n + i]) * r).collect()
}

/// Per-column scale applied after removing each sample's token mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub scale: [f64; 3],
}

impl Default for FeatureScaler {
    fn default() -> Self {
        Self { scale: [1.0; 3] }
    }
}

fn token_means(f: &GeometricFeatures) -> [f64; 3] {
    let mut m = [0.0; 3];
    for r in &f.rows {
        for c in 0..3 {
            m[c] += r[c];
        }
    }
    m.map(|v| v / f.len() as f64)
}

impl FeatureScaler {
    /// Root-mean-square of the centred features per column.
    pub fn fit(samples: &[&GeometricFeatures]) -> Self {
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for f in samples {
            let m = token_means(f);
            for r in &f.rows {
                for c in 0..3 {
                    acc[c] += (r[c] - m[c]).powi(2);
                }
            }
            count += f.len();
        }
        let scale = acc.map(|s| {
            let rms = (s / count.max(1) as f64).sqrt();
            if rms > 0.0 {
                rms
            } else {
                1.0
            }
        });
        Self { scale }
    }

    pub fn apply(&self, f: &GeometricFeatures) -> Tensor {
        let m = token_means(f);
        let mut data = Vec::with_capacity(3 * f.len());
        for r in &f.rows {
            for c in 0..3 {
                data.push((r[c] - m[c]) / self.scale[c]);
            }
        }
        Tensor::from_vec(&[f.len(), 3], data).expect("shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsiModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub tokens: usize,
}

impl Default for CsiModelConfig {
    fn default() -> Self {
        Self { d_model: 32, layers: 2, heads: 2, d_k: 16, d_v: 16, tokens: 16 }
    }
}

impl CsiModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.tokens == 0 {
            return Err(invalid("CSI model dimensions must be positive"));
        }
        if self.heads * self.d_k != self.d_model || self.heads * self.d_v != self.d_model {
            return Err(invalid("heads * d_k and heads * d_v must equal d_model"));
        }
        Ok(())
    }
}

/// Token embedding, learnable positional table, pre-norm encoder stack,
/// final layer norm, mean pooling over tokens and a `2N` linear head.
#[derive(Debug, Clone)]
pub struct CsiTransformer {
    pub cfg: CsiModelConfig,
    pub scaler: FeatureScaler,
    pub lambda: f64,
    ps: ParamStore,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    head: Linear,
}

pub struct CsiCache {
    x: Tensor,
    blocks: Vec<EncoderCache>,
    ln: crate::neural::layers::LayerNormCache,
    pooled: Tensor,
}

impl CsiTransformer {
    pub fn new<R: Rng>(cfg: CsiModelConfig, lambda: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let d = cfg.d_model;
        let embed = Linear::new(&mut ps, "csi.embed", 3, d, rng);
        let pos = ps.add_normal("csi.pos", &[cfg.tokens, d], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&mut ps, &format!("csi.block{i}"), d, cfg.heads, rng))
            .collect();
        let ln = LayerNorm::new(&mut ps, "csi.ln", d);
        let head = Linear::new(&mut ps, "csi.head", d, 2 * cfg.tokens, rng);
        Ok(Self { cfg, scaler: FeatureScaler::default(), lambda, ps, embed, pos, blocks, ln, head })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn prepare(&self, f: &GeometricFeatures) -> Result<Tensor> {
        if f.len() != self.cfg.tokens {
            return Err(invalid(format!("expected {} tokens, got {}", self.cfg.tokens, f.len())));
        }
        Ok(self.scaler.apply(f))
    }
}

impl Network for CsiTransformer {
    type Input = Tensor;
    type Cache = CsiCache;

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.ps
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, CsiCache)> {
        if x.rows() != self.cfg.tokens || x.cols() != 3 {
            return Err(invalid(format!("expected [{}, 3] token features, got {:?}", self.cfg.tokens, x.shape())));
        }
        let mut h = self.embed.forward(&self.ps, x);
        h.add_assign(self.ps.get(self.pos));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&self.ps, &h);
            caches.push(c);
            h = next;
        }
        let (normed, ln) = self.ln.forward(&self.ps, &h);
        let pooled = normed.mean_rows();
        let y = self.head.forward(&self.ps, &pooled);
        Ok((y, CsiCache { x: x.clone(), blocks: caches, ln, pooled }))
    }

    fn backward(&mut self, c: &CsiCache, dy: &Tensor) {
        let ps = &mut self.ps;
        let dpooled = self.head.backward(ps, &c.pooled, dy);
        let t = self.cfg.tokens;
        let mut dnormed = Tensor::zeros(&[t, self.cfg.d_model]);
        for i in 0..t {
            dnormed.row_mut(i).iter_mut().zip(dpooled.data()).for_each(|(o, g)| *o = g / t as f64);
        }
        let mut dh = self.ln.backward(ps, &c.ln, &dnormed);
        for (b, cache) in self.blocks.iter().zip(&c.blocks).rev() {
            dh = b.backward(ps, cache, &dh);
        }
        ps.accumulate(self.pos, &dh);
        self.embed.backward(ps, &c.x, &dh);
    }
}

/// Channel estimate for one UE from its geometric features.
pub fn csi_forward(features: &GeometricFeatures, model: &CsiTransformer) -> Result<ComplexVector> {
    let x = model.prepare(features)?;
    let (y, _) = model.forward(&x)?;
    Ok(denormalize(features, &y, model.lambda))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub features: GeometricFeatures,
    pub channel: ComplexVector,
}

/// UEs drawn uniformly in `region`; the truth is the LoS channel from `bs`.
pub fn csi_dataset<R: Rng>(bs: &ArrayGeometry, region: &Aabb, n: usize, lambda: f64, rng: &mut R) -> Result<Vec<CsiSample>> {
    let (lo, hi) = (region.min, region.max);
    let mut draw = |a: f64, b: f64| if a < b { rng.gen_range(a..b) } else { a };
    (0..n)
        .map(|_| {
            let ue = Position3::new(draw(lo.x, hi.x), draw(lo.y, hi.y), draw(lo.z, hi.z));
            Ok(CsiSample { features: geometric_features(bs, ue)?, channel: los_channel(bs, ue, lambda)? })
        })
        .collect()
}

/// Common interface of the transformer and CNN channel estimators.
pub trait CsiEstimator: Network<Input = Tensor> {
    fn scaler_mut(&mut self) -> &mut FeatureScaler;
    fn prepare_features(&self, f: &GeometricFeatures) -> Result<Tensor>;
    fn wavelength(&self) -> f64;

    fn estimate(&self, f: &GeometricFeatures) -> Result<ComplexVector> {
        let (y, _) = self.forward(&self.prepare_features(f)?)?;
        Ok(denormalize(f, &y, self.wavelength()))
    }
}

impl CsiEstimator for CsiTransformer {
    fn scaler_mut(&mut self) -> &mut FeatureScaler {
        &mut self.scaler
    }

    fn prepare_features(&self, f: &GeometricFeatures) -> Result<Tensor> {
        self.prepare(f)
    }

    fn wavelength(&self) -> f64 {
        self.lambda
    }
}

/// Fits the feature scaler on `data`, then minimises the per-sample squared
/// error of the normalised `2N`-real target.
pub fn train_csi<M: CsiEstimator, R: Rng>(
    model: &mut M,
    data: &[CsiSample],
    tc: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(invalid("empty CSI dataset"));
    }
    *model.scaler_mut() = FeatureScaler::fit(&data.iter().map(|s| &s.features).collect::<Vec<_>>());
    let lambda = model.wavelength();
    let inputs = data.iter().map(|s| model.prepare_features(&s.features)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = data.iter().map(|s| normalized_target(&s.features, &s.channel, lambda)).collect();
    let refs: Vec<&Tensor> = inputs.iter().collect();
    fit(model, &refs, &targets, Loss::Mse, tc, rng)
}

/// Mean per-sample NMSE of `model` on `data`.
pub fn mean_nmse<M: CsiEstimator>(model: &M, data: &[CsiSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        total += nmse(&model.estimate(&s.features)?, &s.channel)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Mean NMSE when the features are perturbed at `snr_db` before estimation.
pub fn mean_nmse_noisy<M: CsiEstimator, R: Rng>(model: &M, data: &[CsiSample], snr_db: f64, rng: &mut R) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let noisy = noisy_feature_injection(&s.features, snr_db, rng);
        let (y, _) = model.forward(&model.prepare_features(&noisy)?)?;
        let est = denormalize(&s.features, &y, model.wavelength());
        total += nmse(&est, &s.channel)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Adds zero-mean Gaussian noise per feature column whose power is the
/// column's across-token (centred) power divided by the linear SNR.
/// `+inf` dB returns the features unchanged.
pub fn noisy_feature_injection<R: Rng>(f: &GeometricFeatures, snr_db: f64, rng: &mut R) -> GeometricFeatures {
    if snr_db == f64::INFINITY {
        return f.clone();
    }
    let m = token_means(f);
    let mut power = [0.0; 3];
    for r in &f.rows {
        for c in 0..3 {
            power[c] += (r[c] - m[c]).powi(2);
        }
    }
    let snr = 10f64.powf(snr_db / 10.0);
    let std = power.map(|p| (p / f.len() as f64 / snr).sqrt());
    let rows = f
        .rows
        .iter()
        .map(|r| {
            let mut o = *r;
            for c in 0..3 {
                let z: f64 = StandardNormal.sample(rng);
                o[c] += std[c] * z;
            }
            o
        })
        .collect();
    GeometricFeatures { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub tokens: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { filters: vec![8, 16, 32], kernel: 3, hidden: 64, tokens: 16 }
    }
}

/// 1-D convolutions over the antenna-token axis, ReLU after each, then a
/// two-layer dense head on the flattened feature map.
#[derive(Debug, Clone)]
pub struct CnnCsi {
    pub cfg: CnnConfig,
    pub scaler: FeatureScaler,
    pub lambda: f64,
    ps: ParamStore,
    convs: Vec<Conv1d>,
    head: Mlp,
}

pub struct CnnCache {
    cols: Vec<Tensor>,
    pre: Vec<Tensor>,
    head: crate::neural::layers::MlpCache,
}

impl CnnCsi {
    pub fn new<R: Rng>(cfg: CnnConfig, lambda: f64, rng: &mut R) -> Result<Self> {
        if cfg.filters.is_empty() || cfg.kernel % 2 == 0 || cfg.tokens == 0 {
            return Err(invalid("CNN needs at least one layer, an odd kernel and tokens"));
        }
        let mut ps = ParamStore::new();
        let mut c_in = 3;
        let mut convs = Vec::with_capacity(cfg.filters.len());
        for (i, &c) in cfg.filters.iter().enumerate() {
            convs.push(Conv1d::new(&mut ps, &format!("cnn.conv{i}"), c_in, c, cfg.kernel, rng));
            c_in = c;
        }
        let head = Mlp::new(&mut ps, "cnn.head", &[cfg.tokens * c_in, cfg.hidden, 2 * cfg.tokens], rng);
        Ok(Self { cfg, scaler: FeatureScaler::default(), lambda, ps, convs, head })
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }
}

impl Network for CnnCsi {
    type Input = Tensor;
    type Cache = CnnCache;

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.ps
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, CnnCache)> {
        if x.rows() != self.cfg.tokens || x.cols() != 3 {
            return Err(invalid(format!("expected [{}, 3] token features, got {:?}", self.cfg.tokens, x.shape())));
        }
        let mut h = x.clone();
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let (z, col) = c.forward(&self.ps, &h);
            h = relu(&z);
            cols.push(col);
            pre.push(z);
        }
        let flat = h.reshape(&[1, self.cfg.tokens * self.convs.last().map_or(3, |c| c.c_out)])?;
        let (y, head) = self.head.forward(&self.ps, &flat);
        Ok((y, CnnCache { cols, pre, head }))
    }

    fn backward(&mut self, c: &CnnCache, dy: &Tensor) {
        let ps = &mut self.ps;
        let dflat = self.head.backward(ps, &c.head, dy);
        let last = self.convs.last().map_or(3, |l| l.c_out);
        let mut g = dflat.reshape(&[self.cfg.tokens, last]).expect("shape");
        for i in (0..self.convs.len()).rev() {
            g = relu_backward(&c.pre[i], &g);
            g = self.convs[i].backward(ps, &c.cols[i], &g);
        }
    }
}

impl CsiEstimator for CnnCsi {
    fn scaler_mut(&mut self) -> &mut FeatureScaler {
        &mut self.scaler
    }

    fn prepare_features(&self, f: &GeometricFeatures) -> Result<Tensor> {
        if f.len() != self.cfg.tokens {
            return Err(invalid(format!("expected {} tokens, got {}", self.cfg.tokens, f.len())));
        }
        Ok(self.scaler.apply(f))
    }

    fn wavelength(&self) -> f64 {
        self.lambda
    }
}

pub fn cnn_csi_forward(features: &GeometricFeatures, model: &CnnCsi) -> Result<ComplexVector> {
    model.estimate(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_hidden: Vec<usize>,
    /// Input channels per patch: frames times image channels.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output index `k` is UE `k` (marker intensity order).
    pub num_ues: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 2,
            heads: 2,
            patch: 4,
            mlp_hidden: vec![64, 32],
            channels: 10,
            height: 32,
            width: 32,
            num_ues: 2,
        }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(invalid(format!(
                "{}x{} frames are not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(invalid("embed_dim must split evenly across heads"));
        }
        if self.channels == 0 || self.num_ues == 0 {
            return Err(invalid("channels and num_ues must be positive"));
        }
        Ok(())
    }
}

/// Splits `F x H x W` frames into `N_p` row-major patches of `F * P^2` values,
/// channel-major within a patch.
pub fn patchify(frames: &FrameSequence, patch: usize) -> Result<Tensor> {
    let (f, h, w) = (frames.frames, frames.height, frames.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("{h}x{w} frames are not divisible into {patch}-pixel patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let width = f * patch * patch;
    let mut data = Vec::with_capacity(ph * pw * width);
    for pr in 0..ph {
        for pc in 0..pw {
            for ch in 0..f {
                let fr = frames.frame(ch);
                for dy in 0..patch {
                    let row = (pr * patch + dy) * w + pc * patch;
                    data.extend_from_slice(&fr[row..row + patch]);
                }
            }
        }
    }
    Tensor::from_vec(&[ph * pw, width], data)
}

/// Patch embedding, class token, positional embeddings, encoder blocks,
/// layer norm and an MLP head with sigmoid outputs on the class token.
#[derive(Debug, Clone)]
pub struct VitLite {
    pub cfg: VitConfig,
    ps: ParamStore,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    head: Mlp,
}

pub struct VitCache {
    patches: Tensor,
    blocks: Vec<EncoderCache>,
    ln: crate::neural::layers::LayerNormCache,
    head: crate::neural::layers::MlpCache,
    cls_out: Tensor,
    probs: Tensor,
    tokens: usize,
}

impl VitLite {
    pub fn new<R: Rng>(cfg: VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let d = cfg.embed_dim;
        let embed = Linear::new(&mut ps, "vit.embed", cfg.channels * cfg.patch * cfg.patch, d, rng);
        let cls = ps.add_normal("vit.cls", &[1, d], 0.02, rng);
        let pos = ps.add_normal("vit.pos", &[cfg.num_patches() + 1, d], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&mut ps, &format!("vit.block{i}"), d, cfg.heads, rng))
            .collect();
        let ln = LayerNorm::new(&mut ps, "vit.ln", d);
        let mut sizes = vec![d];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push(cfg.num_ues);
        let head = Mlp::new(&mut ps, "vit.head", &sizes, rng);
        Ok(Self { cfg, ps, embed, cls, pos, blocks, ln, head })
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn embed(&self) -> &Linear {
        &self.embed
    }
}

impl Network for VitLite {
    type Input = FrameSequence;
    type Cache = VitCache;

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.ps
    }

    fn forward(&self, frames: &FrameSequence) -> Result<(Tensor, VitCache)> {
        let c = &self.cfg;
        if (frames.frames, frames.height, frames.width) != (c.channels, c.height, c.width) {
            return Err(invalid(format!(
                "expected {}x{}x{} frames, got {}x{}x{}",
                c.channels, c.height, c.width, frames.frames, frames.height, frames.width
            )));
        }
        let patches = patchify(frames, c.patch)?;
        let emb = self.embed.forward(&self.ps, &patches);
        let mut h = Tensor::vstack(&[self.ps.get(self.cls), &emb]);
        h.add_assign(self.ps.get(self.pos));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, bc) = b.forward(&self.ps, &h);
            caches.push(bc);
            h = next;
        }
        let tokens = h.rows();
        let cls_out = h.row_slice(0, 1);
        let (normed, ln) = self.ln.forward(&self.ps, &cls_out);
        let (logits, head) = self.head.forward(&self.ps, &normed);
        let probs = sigmoid(&logits);
        Ok((probs.clone(), VitCache { patches, blocks: caches, ln, head, cls_out, probs, tokens }))
    }

    fn backward(&mut self, c: &VitCache, dy: &Tensor) {
        let ps = &mut self.ps;
        let dlogits = sigmoid_backward(&c.probs, dy);
        let dnormed = self.head.backward(ps, &c.head, &dlogits);
        let dcls = self.ln.backward(ps, &c.ln, &dnormed);
        let mut dh = Tensor::zeros(&[c.tokens, self.cfg.embed_dim]);
        dh.row_mut(0).copy_from_slice(dcls.data());
        debug_assert_eq!(c.cls_out.cols(), self.cfg.embed_dim);
        for (b, cache) in self.blocks.iter().zip(&c.blocks).rev() {
            dh = b.backward(ps, cache, &dh);
        }
        ps.accumulate(self.pos, &dh);
        ps.accumulate(self.cls, &dh.row_slice(0, 1));
        self.embed.backward(ps, &c.patches, &dh.row_slice(1, c.tokens - 1));
    }
}

/// Vanilla transformer over whole frames: each flattened frame is a token,
/// learnable positional table, encoder blocks, mean pooling, layer norm and
/// the same MLP/sigmoid head.
#[derive(Debug, Clone)]
pub struct FrameTransformer {
    pub cfg: VitConfig,
    ps: ParamStore,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    head: Mlp,
}

pub struct FrameCache {
    tokens: Tensor,
    blocks: Vec<EncoderCache>,
    ln: crate::neural::layers::LayerNormCache,
    head: crate::neural::layers::MlpCache,
    probs: Tensor,
}

impl FrameTransformer {
    pub fn new<R: Rng>(cfg: VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let d = cfg.embed_dim;
        let embed = Linear::new(&mut ps, "ftx.embed", cfg.height * cfg.width, d, rng);
        let pos = ps.add_normal("ftx.pos", &[cfg.channels, d], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&mut ps, &format!("ftx.block{i}"), d, cfg.heads, rng))
            .collect();
        let ln = LayerNorm::new(&mut ps, "ftx.ln", d);
        let mut sizes = vec![d];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push(cfg.num_ues);
        let head = Mlp::new(&mut ps, "ftx.head", &sizes, rng);
        Ok(Self { cfg, ps, embed, pos, blocks, ln, head })
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }
}

impl Network for FrameTransformer {
    type Input = FrameSequence;
    type Cache = FrameCache;

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.ps
    }

    fn forward(&self, frames: &FrameSequence) -> Result<(Tensor, FrameCache)> {
        let c = &self.cfg;
        if (frames.frames, frames.height, frames.width) != (c.channels, c.height, c.width) {
            return Err(invalid("frame sequence does not match the model configuration"));
        }
        let tokens = Tensor::from_vec(&[frames.frames, frames.height * frames.width], frames.data.clone())?;
        let mut h = self.embed.forward(&self.ps, &tokens);
        h.add_assign(self.ps.get(self.pos));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, bc) = b.forward(&self.ps, &h);
            caches.push(bc);
            h = next;
        }
        let pooled = h.mean_rows();
        let (normed, ln) = self.ln.forward(&self.ps, &pooled);
        let (logits, head) = self.head.forward(&self.ps, &normed);
        let probs = sigmoid(&logits);
        Ok((probs.clone(), FrameCache { tokens, blocks: caches, ln, head, probs }))
    }

    fn backward(&mut self, c: &FrameCache, dy: &Tensor) {
        let ps = &mut self.ps;
        let dlogits = sigmoid_backward(&c.probs, dy);
        let dnormed = self.head.backward(ps, &c.head, &dlogits);
        let dpooled = self.ln.backward(ps, &c.ln, &dnormed);
        let t = c.tokens.rows();
        let mut dh = Tensor::zeros(&[t, self.cfg.embed_dim]);
        for i in 0..t {
            dh.row_mut(i).iter_mut().zip(dpooled.data()).for_each(|(o, g)| *o = g / t as f64);
        }
        for (b, cache) in self.blocks.iter().zip(&c.blocks).rev() {
            dh = b.backward(ps, cache, &dh);
        }
        ps.accumulate(self.pos, &dh);
        self.embed.backward(ps, &c.tokens, &dh);
    }
}

/// Per-UE blockage probabilities in `[0, 1]`.
pub trait BlockagePredictor: Network<Input = FrameSequence> {
    fn predict(&self, frames: &FrameSequence) -> Result<Vec<f64>> {
        Ok(self.forward(frames)?.0.into_data())
    }
}

impl BlockagePredictor for VitLite {}
impl BlockagePredictor for FrameTransformer {}

pub fn vit_forward(frames: &FrameSequence, model: &VitLite) -> Result<Vec<f64>> {
    model.predict(frames)
}

pub fn transformer_blockage_baseline(frames: &FrameSequence, model: &FrameTransformer) -> Result<Vec<f64>> {
    model.predict(frames)
}

/// Blocked-indicator targets `1 - b_k` as a `[1, K]` tensor.
pub fn blocked_targets(sample: &LabeledSample) -> Tensor {
    let data = sample.labels.iter().map(|&b| 1.0 - f64::from(b)).collect();
    Tensor::from_vec(&[1, sample.labels.len()], data).expect("shape")
}

/// Minimises the mean BCE between predicted and actual blockage.
pub fn train_blockage<M: BlockagePredictor, R: Rng>(
    model: &mut M,
    data: &[LabeledSample],
    tc: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(invalid("empty blockage dataset"));
    }
    let inputs: Vec<&FrameSequence> = data.iter().map(|s| &s.frames).collect();
    let targets: Vec<Tensor> = data.iter().map(blocked_targets).collect();
    fit(model, &inputs, &targets, Loss::Bce, tc, rng)
}

pub fn train_vit<R: Rng>(model: &mut VitLite, data: &[LabeledSample], tc: &TrainConfig, rng: &mut R) -> Result<TrainReport> {
    train_blockage(model, data, tc, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of `probs >= threshold` against binary `labels`
/// (1 = positive). Empty denominators give 0.
pub fn classification_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationReport> {
    if probs.len() != labels.len() {
        return Err(invalid("probabilities and labels differ in length"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ClassificationReport { precision, recall, f1 })
}

/// Evaluates a predictor on samples; positives are blocked UEs.
pub fn blockage_report<M: BlockagePredictor>(model: &M, data: &[LabeledSample]) -> Result<ClassificationReport> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for s in data {
        probs.extend(model.predict(&s.frames)?);
        labels.extend(s.labels.iter().map(|&b| 1 - b));
    }
    classification_metrics(&probs, &labels, 0.5)
}

/// Median lead (frames) over `events`: for an event at frame `e` the lead is
/// `e - s`, where `s` starts the run of frames at or above `threshold` that
/// is still active at `e`. A missed event contributes 0.
pub fn lead_time(probs: &[f64], events: &[usize], threshold: f64) -> Result<f64> {
    if events.is_empty() {
        return Err(invalid("no events"));
    }
    let mut leads: Vec<f64> = Vec::with_capacity(events.len());
    for &e in events {
        if e >= probs.len() {
            return Err(invalid(format!("event frame {e} beyond series of {}", probs.len())));
        }
        let mut s = e;
        if probs[e] >= threshold {
            while s > 0 && probs[s - 1] >= threshold {
                s -= 1;
            }
        }
        leads.push((e - s) as f64);
    }
    leads.sort_by(f64::total_cmp);
    let n = leads.len();
    Ok(if n % 2 == 1 { leads[n / 2] } else { 0.5 * (leads[n / 2 - 1] + leads[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_upa, wavelength};
    use crate::seed::substream;

    fn lambda() -> f64 {
        wavelength(3.5e9)
    }

    fn small_set(n: usize) -> (ArrayGeometry, Vec<CsiSample>) {
        let bs = build_upa(4, 4, lambda() / 2.0, Position3::ORIGIN).unwrap();
        let region = Aabb::new(Position3::new(5.0, -25.0, 0.0), Position3::new(55.0, 25.0, 1.0)).unwrap();
        let data = csi_dataset(&bs, &region, n, lambda(), &mut substream(1, "world")).unwrap();
        (bs, data)
    }

    #[test]
    fn nmse_examples() {
        let t = vec![Complex64::new(1.0, -2.0), Complex64::new(0.5, 0.3)];
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert!((nmse(&[Complex64::new(0.0, 0.0); 2], &t).unwrap() - 1.0).abs() < 1e-15);
        let twice: Vec<_> = t.iter().map(|v| v * 2.0).collect();
        assert!((nmse(&twice, &t).unwrap() - 1.0).abs() < 1e-15);
        let c = Complex64::new(0.3, 0.4);
        let scaled: Vec<_> = t.iter().map(|v| v * c).collect();
        assert!((nmse(&scaled, &t).unwrap() - (c - 1.0).norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips() {
        let (_, data) = small_set(3);
        for s in &data {
            let t = normalized_target(&s.features, &s.channel, lambda());
            let back = denormalize(&s.features, &t, lambda());
            assert!(nmse(&back, &s.channel).unwrap() < 1e-24);
            assert!(t.data().iter().all(|v| v.abs() < 1.5));
        }
    }

    #[test]
    fn zero_head_gives_zero_estimate() {
        let (_, data) = small_set(1);
        let mut m = CsiTransformer::new(CsiModelConfig::default(), lambda(), &mut substream(0, "init")).unwrap();
        let head = m.head().clone();
        m.params_mut().get_mut(head.w).fill(0.0);
        m.params_mut().get_mut(head.b).fill(0.0);
        assert!(csi_forward(&data[0].features, &m).unwrap().iter().all(|v| v.norm() == 0.0));

        let mut c = CnnCsi::new(CnnConfig::default(), lambda(), &mut substream(0, "init")).unwrap();
        let last = c.head().layers.last().unwrap().clone();
        c.params_mut().get_mut(last.w).fill(0.0);
        c.params_mut().get_mut(last.b).fill(0.0);
        assert!(cnn_csi_forward(&data[0].features, &c).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn token_count_mismatch_is_rejected() {
        let m = CsiTransformer::new(CsiModelConfig::default(), lambda(), &mut substream(0, "init")).unwrap();
        let f = GeometricFeatures { rows: vec![[1.0, 0.0, 0.0]; 5] };
        assert!(matches!(csi_forward(&f, &m), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pooling_ignores_joint_token_and_position_shuffle() {
        let (_, data) = small_set(1);
        let mut m = CsiTransformer::new(CsiModelConfig::default(), lambda(), &mut substream(2, "init")).unwrap();
        let x = m.prepare(&data[0].features).unwrap();
        let (y, _) = m.forward(&x).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pos = m.params().get(m.pos).clone();
        let ppos = Tensor::from_rows(&perm.iter().map(|&i| pos.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pid = m.pos;
        *m.params_mut().get_mut(pid) = ppos;
        let (py, _) = m.forward(&px).unwrap();
        for (a, b) in y.data().iter().zip(py.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn untrained_models_are_deterministic() {
        let (_, data) = small_set(1);
        let a = CsiTransformer::new(CsiModelConfig::default(), lambda(), &mut substream(5, "init")).unwrap();
        let b = CsiTransformer::new(CsiModelConfig::default(), lambda(), &mut substream(5, "init")).unwrap();
        assert_eq!(csi_forward(&data[0].features, &a).unwrap(), csi_forward(&data[0].features, &b).unwrap());
    }

    #[test]
    fn zero_epochs_keep_parameters() {
        let (_, data) = small_set(4);
        let mut m = CsiTransformer::new(CsiModelConfig::default(), lambda(), &mut substream(3, "init")).unwrap();
        let before = m.params().flat_values();
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let rep = train_csi(&mut m, &data, &tc, &mut substream(3, "data-split")).unwrap();
        assert_eq!(rep.loss_curve.len(), 1);
        assert_eq!(m.params().flat_values(), before);
    }

    #[test]
    fn single_sample_overfits() {
        let (_, data) = small_set(1);
        let cfg = CsiModelConfig { d_model: 16, layers: 1, heads: 2, d_k: 8, d_v: 8, tokens: 16 };
        let mut m = CsiTransformer::new(cfg, lambda(), &mut substream(4, "init")).unwrap();
        let tc = TrainConfig { epochs: 500, batch_size: 1, learning_rate: 3e-3 };
        let rep = train_csi(&mut m, &data, &tc, &mut substream(4, "data-split")).unwrap();
        assert!(rep.loss_curve.iter().all(|v| v.is_finite()));
        assert!(rep.last() < 1e-3 * rep.initial(), "{} vs {}", rep.last(), rep.initial());
    }

    #[test]
    fn noise_injection_scaling() {
        let (_, data) = small_set(1);
        let f = &data[0].features;
        assert_eq!(&noisy_feature_injection(f, f64::INFINITY, &mut substream(0, "x")), f);
        // at 0 dB the perturbation power matches the centred feature power
        let mut rng = substream(0, "x");
        let (mut noise, mut signal) = (0.0, 0.0);
        let m = token_means(f);
        for _ in 0..400 {
            let g = noisy_feature_injection(f, 0.0, &mut rng);
            for (a, b) in g.rows.iter().zip(&f.rows) {
                noise += (a[0] - b[0]).powi(2);
                signal += (b[0] - m[0]).powi(2);
            }
        }
        assert!((noise / signal - 1.0).abs() < 0.1, "{}", noise / signal);
    }

    fn tiny_vit() -> VitConfig {
        VitConfig { embed_dim: 8, layers: 1, heads: 2, patch: 4, mlp_hidden: vec![8], channels: 2, height: 8, width: 8, num_ues: 2 }
    }

    #[test]
    fn vit_zero_input_zero_head_is_half() {
        let mut m = VitLite::new(tiny_vit(), &mut substream(1, "init")).unwrap();
        let last = m.head().layers.last().unwrap().clone();
        m.params_mut().get_mut(last.w).fill(0.0);
        m.params_mut().get_mut(last.b).fill(0.0);
        let p = vit_forward(&FrameSequence::zeros(2, 8, 8), &m).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn vit_rejects_indivisible_grid() {
        let cfg = VitConfig { height: 10, ..tiny_vit() };
        assert!(matches!(VitLite::new(cfg, &mut substream(1, "init")), Err(Error::InvalidArgument(_))));
        let m = VitLite::new(tiny_vit(), &mut substream(1, "init")).unwrap();
        assert!(vit_forward(&FrameSequence::zeros(2, 10, 8), &m).is_err());
    }

    #[test]
    fn vit_extra_zero_channel_is_inert() {
        let base = VitLite::new(tiny_vit(), &mut substream(6, "init")).unwrap();
        let mut wide = VitLite::new(VitConfig { channels: 3, ..tiny_vit() }, &mut substream(7, "init")).unwrap();
        for id in base.params().ids() {
            let name = base.params().name(id).to_string();
            let wid = wide.params().id(&name).unwrap();
            let src = base.params().get(id).clone();
            let dst = wide.params_mut().get_mut(wid);
            if name == "vit.embed.w" {
                dst.fill(0.0);
                dst.data_mut()[..src.len()].copy_from_slice(src.data());
            } else {
                *dst = src;
            }
        }
        let mut frames = FrameSequence::zeros(2, 8, 8);
        frames.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 / 7.0);
        let mut ext = FrameSequence::zeros(3, 8, 8);
        ext.data[..128].copy_from_slice(&frames.data);
        let a = vit_forward(&frames, &base).unwrap();
        let b = vit_forward(&ext, &wide).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
            assert!(*x > 0.0 && *x < 1.0);
        }
    }

    #[test]
    fn classification_examples() {
        let r = classification_metrics(&[0.9, 0.1, 0.8], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = classification_metrics(&[1.0; 4], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lead_time_examples() {
        let step = [0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(lead_time(&step, &[3], 0.5).unwrap(), 0.0);
        let ramp = [0.0, 0.1, 0.2, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0];
        assert_eq!(lead_time(&ramp, &[8], 0.5).unwrap(), 5.0);
        assert!((5.0 / 6.5 * 1000.0 - 769.0_f64).abs() < 1.0);
        assert_eq!(lead_time(&[0.0, 0.0], &[1], 0.5).unwrap(), 0.0);
    }
}
