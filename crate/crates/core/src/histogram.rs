//! One-dimensional soft histogram layer.
//!
//! Each token is projected onto `B` bin channels by a learned 1×1
//! projection. A radial basis function turns the distance to each bin center
//! into a membership `y_b = exp(−γ_b²·(v_b − μ_b)²)`, memberships are
//! normalized across bins with a small `ε` in the denominator, and the
//! normalized responses are average-pooled along the sequence into
//! `L = D/B` segments per bin. The `B×L` summary is flattened bin-major into a
//! `D`-vector and replicated onto every token, so the output can be added to
//! the residual stream.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::fill_uniform;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const HIST_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct HistogramLayer {
    pub bins: usize,
    pub dim: usize,
    /// First 1×1 convolution weight, `B×D`.
    pub proj: ParamId,
    /// Bin centers μ (bias of the first convolution), length `B`.
    pub centers: ParamId,
    /// Bin widths γ (grouped second convolution, no bias), length `B`.
    pub widths: ParamId,
    pub eps: f64,
}

impl HistogramLayer {
    /// Registers `{prefix}hist.proj`, `{prefix}hist.centers` and
    /// `{prefix}hist.widths`, zero-filled.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, bins: usize) -> Result<Self> {
        if bins == 0 || dim % bins != 0 {
            return Err(Error::Config(format!(
                "histogram bins ({bins}) must divide the feature width ({dim})"
            )));
        }
        Ok(HistogramLayer {
            bins,
            dim,
            proj: store.register_zeros(format!("{prefix}hist.proj"), &[bins, dim]),
            centers: store.register_zeros(format!("{prefix}hist.centers"), &[bins]),
            widths: store.register_zeros(format!("{prefix}hist.widths"), &[bins]),
            eps: HIST_EPS,
        })
    }

    /// Segments per bin channel after pooling.
    pub fn pool_len(&self) -> usize {
        self.dim / self.bins
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.proj, self.centers, self.widths]
    }

    pub fn param_count(&self) -> usize {
        histogram_param_count(self.dim, self.bins)
    }

    /// Projection weight and centers from `U(−1/√D, 1/√D)`, widths from
    /// `U(−1, 1)` (the grouped convolution has fan-in 1).
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.dim as f64).sqrt();
        fill_uniform(store.value_mut(self.proj), bound, rng);
        fill_uniform(store.value_mut(self.centers), bound, rng);
        fill_uniform(store.value_mut(self.widths), 1.0, rng);
    }

    /// `v[n,b] = Σ_d W[b,d]·x[n,d]`; centers are not added here.
    pub fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.dim {
            return Err(Error::shape("hist_project", g.shape(x), &[self.bins, self.dim]));
        }
        let w = g.param(self.proj);
        g.matmul_nt(x, w)
    }

    /// RBF membership `exp(−(γ_b·(v − μ_b))²)`.
    pub fn rbf(&self, g: &mut Graph<'_>, v: Var) -> Result<Var> {
        let (n, b) = g.value(v).dims2()?;
        if b != self.bins {
            return Err(Error::shape("hist_rbf", g.shape(v), &[self.bins]));
        }
        let mu = g.param(self.centers);
        let gamma = g.param(self.widths);
        let mu = g.broadcast_axis(mu, 0, n)?;
        let gamma = g.broadcast_axis(gamma, 0, n)?;
        let diff = g.sub(v, mu)?;
        let scaled = g.mul(diff, gamma)?;
        let sq = g.square(scaled)?;
        let neg = g.neg(sq)?;
        g.exp(neg)
    }

    /// `r̂[n,b] = y[n,b] / (Σ_b' y[n,b'] + ε)`.
    pub fn normalize(&self, g: &mut Graph<'_>, y: Var) -> Result<Var> {
        let (_, b) = g.value(y).dims2()?;
        let total = g.sum_axis(y, 1)?;
        let denom = g.add_scalar(total, self.eps)?;
        let denom = g.broadcast_axis(denom, 1, b)?;
        g.div(y, denom)
    }

    /// Adaptive average pooling of each bin channel to `L` segments, flattened
    /// bin-major and replicated onto all `N` rows.
    pub fn pool_broadcast(&self, g: &mut Graph<'_>, r: Var) -> Result<Var> {
        let (n, b) = g.value(r).dims2()?;
        if b != self.bins {
            return Err(Error::shape("hist_pool_broadcast", g.shape(r), &[self.bins]));
        }
        let l = self.pool_len();
        let pool = g.constant(pooling_matrix(n, l));
        let pooled = g.matmul(pool, r)?; // L×B
        let by_bin = g.transpose(pooled)?; // B×L
        let flat = g.reshape(by_bin, &[self.dim])?;
        g.broadcast_axis(flat, 0, n)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let v = self.project(g, x)?;
        let y = self.rbf(g, v)?;
        let r = self.normalize(g, y)?;
        self.pool_broadcast(g, r)
    }
}

pub fn histogram_param_count(dim: usize, bins: usize) -> usize {
    bins * dim + 2 * bins
}

/// Adaptive-pooling windows `[⌊l·N/L⌋, ⌈(l+1)·N/L⌉)` for `l ∈ [0, L)`.
pub fn pool_windows(n: usize, l: usize) -> Vec<(usize, usize)> {
    (0..l)
        .map(|i| ((i * n) / l, ((i + 1) * n).div_ceil(l)))
        .collect()
}

/// `L×N` averaging matrix whose row `l` holds `1/len` over window `l`.
pub fn pooling_matrix(n: usize, l: usize) -> Tensor {
    let mut p = Tensor::zeros(&[l, n]);
    for (row, (start, end)) in pool_windows(n, l).into_iter().enumerate() {
        let w = 1.0 / (end - start) as f64;
        for col in start..end {
            p.data_mut()[row * n + col] = w;
        }
    }
    p
}
