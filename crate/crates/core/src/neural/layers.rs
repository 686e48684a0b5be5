//! Differentiable layers with hand-derived backward passes.
//!
//! Every `backward` accumulates parameter gradients into the `ParamStore`
//! and returns the gradient with respect to the layer input.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = ps.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = ps.add_uniform(&format!("{name}.b"), &[1, d_out], d_in, rng);
        Self { w, b, d_in, d_out }
    }

    /// Linear layer starting from all-zero weights and bias.
    pub fn zeroed(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add_zeros(&format!("{name}.w"), &[d_in, d_out]);
        let b = ps.add_zeros(&format!("{name}.b"), &[1, d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = x.matmul(ps.get(self.w));
        let b = ps.get(self.b).data();
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        y
    }

    pub fn backward(&self, ps: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        ps.accumulate(self.w, &x.t_matmul(dy));
        let db = sum_rows(dy);
        ps.accumulate(self.b, &db);
        dy.matmul_t(ps.get(self.w))
    }
}

pub fn sum_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[1, x.cols()]);
    for i in 0..x.rows() {
        out.data_mut().iter_mut().zip(x.row(i)).for_each(|(o, v)| *o += v);
    }
    out
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0));
        let shift = ps.add_zeros(&format!("{name}.shift"), &[1, d]);
        Self { gain, shift, eps: 1e-5 }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        let (xhat, inv_std) = normalize_rows(x, self.eps);
        let g = ps.get(self.gain).data();
        let s = ps.get(self.shift).data();
        let mut y = xhat.clone();
        for i in 0..y.rows() {
            for ((v, gg), ss) in y.row_mut(i).iter_mut().zip(g).zip(s) {
                *v = *v * gg + ss;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let d = dy.cols();
        let mut dgain = Tensor::zeros(&[1, d]);
        for i in 0..dy.rows() {
            for ((acc, a), b) in dgain.data_mut().iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
                *acc += a * b;
            }
        }
        ps.accumulate(self.gain, &dgain);
        ps.accumulate(self.shift, &sum_rows(dy));
        let g = ps.get(self.gain).data().to_vec();
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..dy.rows() {
            let xh = cache.xhat.row(i);
            let dxh: Vec<f64> = dy.row(i).iter().zip(&g).map(|(a, b)| a * b).collect();
            let sum_d: f64 = dxh.iter().sum();
            let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
            let inv = cache.inv_std[i];
            let df = d as f64;
            for ((o, &dh), &x) in dx.row_mut(i).iter_mut().zip(&dxh).zip(xh) {
                *o = inv / df * (df * dh - sum_d - x * sum_dx);
            }
        }
        dx
    }
}

/// Per-row zero-mean, unit-variance normalisation; returns the normalised
/// rows and each row's inverse standard deviation.
pub fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    y
}

/// Backward of `softmax_rows` given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, a), b) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *o = a * (b - dot);
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward of `relu` given its input `x`.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x.data().iter().zip(dy.data()).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data).expect("shape")
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of `sigmoid` given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
    Tensor::from_vec(y.shape(), data).expect("shape")
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Backward of `tanh` given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&t, &g)| g * (1.0 - t * t)).collect();
    Tensor::from_vec(y.shape(), data).expect("shape")
}

/// Mean over rows of the squared row error, `sum ||p_k - t_k||^2 / K`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let k = pred.rows().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let e = p - t;
        loss += e * e;
        *g = 2.0 * e / k;
    }
    (loss / k, grad)
}

/// Binary cross-entropy with an additive stability constant inside the
/// logarithms, averaged over all entries.
pub fn bce_loss(pred: &Tensor, label: &Tensor, eps: f64) -> (f64, Tensor) {
    let n = pred.len().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(label.data()) {
        loss -= y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln();
        *g = -(y / (p + eps) - (1.0 - y) / (1.0 - p + eps)) / n;
    }
    (loss / n, grad)
}

/// 1-D convolution over the row (token) axis, stride 1, zero "same" padding.
/// Weights are laid out `[kernel * c_in, c_out]` with tap-major rows.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = kernel * c_in;
        let w = ps.add_uniform(&format!("{name}.w"), &[fan_in, c_out], fan_in, rng);
        let b = ps.add_uniform(&format!("{name}.b"), &[1, c_out], fan_in, rng);
        Self { w, b, kernel, c_in, c_out }
    }

    fn im2col(&self, x: &Tensor) -> Tensor {
        let t = x.rows();
        let pad = self.kernel / 2;
        let mut cols = Tensor::zeros(&[t, self.kernel * self.c_in]);
        for i in 0..t {
            for j in 0..self.kernel {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let dst = &mut cols.row_mut(i)[j * self.c_in..(j + 1) * self.c_in];
                dst.copy_from_slice(x.row(src as usize));
            }
        }
        cols
    }

    /// Returns the output and the unfolded input used by `backward`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
        let cols = self.im2col(x);
        let mut y = cols.matmul(ps.get(self.w));
        let b = ps.get(self.b).data();
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        (y, cols)
    }

    pub fn backward(&self, ps: &mut ParamStore, cols: &Tensor, dy: &Tensor) -> Tensor {
        ps.accumulate(self.w, &cols.t_matmul(dy));
        ps.accumulate(self.b, &sum_rows(dy));
        let dcols = dy.matmul_t(ps.get(self.w));
        let t = dy.rows();
        let pad = self.kernel / 2;
        let mut dx = Tensor::zeros(&[t, self.c_in]);
        for i in 0..t {
            for j in 0..self.kernel {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let g = &dcols.row(i)[j * self.c_in..(j + 1) * self.c_in];
                dx.row_mut(src as usize).iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        dx
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(ps, &h);
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = relu(&z);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &MlpCache, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = relu_backward(&cache.pre[i], &g);
            }
            g = self.layers[i].backward(ps, &cache.inputs[i], &g);
        }
        g
    }
}
