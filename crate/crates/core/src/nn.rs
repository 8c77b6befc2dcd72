//! Transformer constituents: linear, layer norm, multi-head self-attention
//! and the feed-forward sublayer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Fills `t` with i.i.d. samples from `U(−bound, bound)`.
pub fn fill_uniform<R: Rng + ?Sized>(t: &mut Tensor, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
    }
}

/// `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.weight` and `{prefix}.bias`, zero-filled.
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.register_zeros(format!("{prefix}.weight"), &[out_dim, in_dim]);
        let bias = store.register_zeros(format!("{prefix}.bias"), &[out_dim]);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.in_dim {
            return Err(Error::shape("linear", g.shape(x), &[self.out_dim, self.in_dim]));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul_nt(x, w)?;
        g.add_row(xw, b)
    }

    /// PyTorch-default initialization: weight and bias from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn kaiming_uniform_init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        fill_uniform(store.value_mut(self.weight), bound, rng);
        fill_uniform(store.value_mut(self.bias), bound, rng);
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    /// Registers `{prefix}.gain` (ones) and `{prefix}.bias` (zeros).
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.register_ones(format!("{prefix}.gain"), &[dim]);
        let bias = store.register_zeros(format!("{prefix}.bias"), &[dim]);
        LayerNorm {
            gain,
            bias,
            dim,
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Bidirectional multi-head self-attention with a fused QKV projection laid
/// out as `[q | k | v]`.
#[derive(Clone, Debug)]
pub struct MhsaLayer {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MhsaLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(MhsaLayer {
            qkv: Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, &format!("{prefix}.proj"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Scaled dot-product attention over a fused `N×3D` QKV activation;
    /// returns the concatenated head outputs (`N×D`) before projection.
    pub fn attention(&self, g: &mut Graph<'_>, qkv: Var) -> Result<Var> {
        let (_, w) = g.value(qkv).dims2()?;
        if w != 3 * self.dim {
            return Err(Error::shape("attention", g.shape(qkv), &[3 * self.dim]));
        }
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * hd, (h + 1) * hd)?;
            let k = g.slice_cols(qkv, self.dim + h * hd, self.dim + (h + 1) * hd)?;
            let v = g.slice_cols(qkv, 2 * self.dim + h * hd, 2 * self.dim + (h + 1) * hd)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, 1)?;
            heads.push(g.matmul(weights, v)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat_cols(&heads)
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, x)?;
        let ctx = self.attention(g, qkv)?;
        self.proj.forward(g, ctx)
    }

    pub fn kaiming_uniform_init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.qkv.kaiming_uniform_init(store, rng);
        self.proj.kaiming_uniform_init(store, rng);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.qkv.param_ids(), self.proj.param_ids()].concat()
    }
}

/// `fc2(GELU(fc1(x)))` with a fixed 4× expansion.
#[derive(Clone, Debug)]
pub struct FfnLayer {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FfnLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        FfnLayer {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, 4 * dim),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), 4 * dim, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn kaiming_uniform_init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.fc1.kaiming_uniform_init(store, rng);
        self.fc2.kaiming_uniform_init(store, rng);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.fc1.param_ids(), self.fc2.param_ids()].concat()
    }
}
