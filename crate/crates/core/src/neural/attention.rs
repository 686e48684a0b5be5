//! Multi-head self-attention and the pre-norm encoder block.

use rand::Rng;

use super::layers::{relu, relu_backward, softmax_rows, softmax_rows_backward, LayerNorm, LayerNormCache, Linear};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Mhsa {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

#[derive(Debug, Clone)]
pub struct MhsaCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<Tensor>,
    concat: Tensor,
}

impl MhsaCache {
    /// Attention weights of each head, `[T, T]`.
    pub fn attention(&self) -> &[Tensor] {
        &self.attn
    }
}

impl Mhsa {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must split evenly across heads");
        let d_k = d_model / heads;
        let wq = ps.add_uniform(&format!("{name}.wq"), &[d_model, heads * d_k], d_model, rng);
        let wk = ps.add_uniform(&format!("{name}.wk"), &[d_model, heads * d_k], d_model, rng);
        let wv = ps.add_uniform(&format!("{name}.wv"), &[d_model, heads * d_k], d_model, rng);
        let wo = ps.add_uniform(&format!("{name}.wo"), &[heads * d_k, d_model], heads * d_k, rng);
        Self { wq, wk, wv, wo, heads, d_k, d_v: d_k }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, MhsaCache) {
        let q = x.matmul(ps.get(self.wq));
        let k = x.matmul(ps.get(self.wk));
        let v = x.matmul(ps.get(self.wv));
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut concat = Tensor::zeros(&[x.rows(), self.heads * self.d_v]);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_slice(h * self.d_k, self.d_k);
            let kh = k.col_slice(h * self.d_k, self.d_k);
            let vh = v.col_slice(h * self.d_v, self.d_v);
            let mut s = qh.matmul_t(&kh);
            s.scale(scale);
            let a = softmax_rows(&s);
            concat.add_col_slice(h * self.d_v, &a.matmul(&vh));
            attn.push(a);
        }
        let y = concat.matmul(ps.get(self.wo));
        (y, MhsaCache { x: x.clone(), q, k, v, attn, concat })
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &MhsaCache, dy: &Tensor) -> Tensor {
        ps.accumulate(self.wo, &c.concat.t_matmul(dy));
        let dconcat = dy.matmul_t(ps.get(self.wo));
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut dq = Tensor::zeros(c.q.shape());
        let mut dk = Tensor::zeros(c.k.shape());
        let mut dv = Tensor::zeros(c.v.shape());
        for h in 0..self.heads {
            let qh = c.q.col_slice(h * self.d_k, self.d_k);
            let kh = c.k.col_slice(h * self.d_k, self.d_k);
            let vh = c.v.col_slice(h * self.d_v, self.d_v);
            let a = &c.attn[h];
            let dh = dconcat.col_slice(h * self.d_v, self.d_v);
            let da = dh.matmul_t(&vh);
            dv.add_col_slice(h * self.d_v, &a.t_matmul(&dh));
            let mut ds = softmax_rows_backward(a, &da);
            ds.scale(scale);
            dq.add_col_slice(h * self.d_k, &ds.matmul(&kh));
            dk.add_col_slice(h * self.d_k, &ds.t_matmul(&qh));
        }
        ps.accumulate(self.wq, &c.x.t_matmul(&dq));
        ps.accumulate(self.wk, &c.x.t_matmul(&dk));
        ps.accumulate(self.wv, &c.x.t_matmul(&dv));
        let mut dx = dq.matmul_t(ps.get(self.wq));
        dx.add_assign(&dk.matmul_t(ps.get(self.wk)));
        dx.add_assign(&dv.matmul_t(ps.get(self.wv)));
        dx
    }
}

/// `x + MHSA(LN(x))` followed by `x + FFN(LN(x))`, FFN width `4 d_model`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    ln1: LayerNormCache,
    attn: MhsaCache,
    ln2: LayerNormCache,
    ln2_out: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl EncoderCache {
    pub fn attention(&self) -> &[Tensor] {
        self.attn.attention()
    }
}

impl EncoderBlock {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            attn: Mhsa::new(ps, &format!("{name}.attn"), d_model, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            ff1: Linear::new(ps, &format!("{name}.ff1"), d_model, 4 * d_model, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), 4 * d_model, d_model, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, EncoderCache) {
        let (n1, ln1) = self.ln1.forward(ps, x);
        let (a, attn) = self.attn.forward(ps, &n1);
        let h = x.add(&a);
        let (n2, ln2) = self.ln2.forward(ps, &h);
        let hidden_pre = self.ff1.forward(ps, &n2);
        let hidden = relu(&hidden_pre);
        let y = h.add(&self.ff2.forward(ps, &hidden));
        (y, EncoderCache { ln1, attn, ln2, ln2_out: n2, hidden_pre, hidden })
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &EncoderCache, dy: &Tensor) -> Tensor {
        let dhidden = self.ff2.backward(ps, &c.hidden, dy);
        let dpre = relu_backward(&c.hidden_pre, &dhidden);
        let dn2 = self.ff1.backward(ps, &c.ln2_out, &dpre);
        let mut dh = self.ln2.backward(ps, &c.ln2, &dn2);
        dh.add_assign(dy);
        let dn1 = self.attn.backward(ps, &c.attn, &dh);
        let mut dx = self.ln1.backward(ps, &c.ln1, &dn1);
        dx.add_assign(&dh);
        dx
    }
}
