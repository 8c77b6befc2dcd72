//! Parameter-efficient tuning modules: bottleneck adapter, LoRA on the
//! query projection, SSF scale/shift, and the histogram layer, plus the
//! configuration that selects between them and the shared/non-shared
//! instance layout.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::histogram::{histogram_param_count, HistogramLayer};
use crate::nn::{fill_uniform, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Bottleneck adapter `up(GELU(down(x)))`, zero-initialized on the up side.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rate: usize) -> Result<Self> {
        let hidden = adapter_hidden(dim, rate)?;
        Ok(Adapter {
            down: Linear::new(store, &format!("{prefix}adapter.down"), dim, hidden),
            up: Linear::new(store, &format!("{prefix}adapter.up"), hidden, dim),
        })
    }

    pub fn hidden(&self) -> usize {
        self.down.out_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.down.kaiming_uniform_init(store, rng);
        store.value_mut(self.up.weight).data_mut().fill(0.0);
        store.value_mut(self.up.bias).data_mut().fill(0.0);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.gelu(h)?;
        self.up.forward(g, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.down.param_ids(), self.up.param_ids()].concat()
    }
}

/// Bottleneck width `D / rate`, at least 1.
pub fn adapter_hidden(dim: usize, rate: usize) -> Result<usize> {
    if rate == 0 {
        return Err(Error::Config("adapter reduction rate must be positive".into()));
    }
    Ok((dim / rate).max(1))
}

pub fn adapter_param_count(dim: usize, rate: usize) -> Result<usize> {
    let h = adapter_hidden(dim, rate)?;
    Ok(2 * dim * h + h + dim)
}

/// Low-rank increment `(α/r)·(x·Aᵀ)·Bᵀ` on the query slice of the fused
/// QKV projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `r×D`
    pub a: ParamId,
    /// `D×r`
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dim: usize,
}

pub const LORA_ALPHA: f64 = 1.0;

impl LoraAdapter {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::Config(format!("LoRA rank must be in 1..={dim}, got {rank}")));
        }
        Ok(LoraAdapter {
            a: store.register_zeros(format!("{prefix}lora.a"), &[rank, dim]),
            b: store.register_zeros(format!("{prefix}lora.b"), &[dim, rank]),
            rank,
            alpha: LORA_ALPHA,
            dim,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// A from `U(−1/√D, 1/√D)`, B zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        fill_uniform(store.value_mut(self.a), 1.0 / (self.dim as f64).sqrt(), rng);
        store.value_mut(self.b).data_mut().fill(0.0);
    }

    /// The increment to add to the query projection output.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.dim {
            return Err(Error::shape("lora", g.shape(x), &[self.rank, self.dim]));
        }
        let a = g.param(self.a);
        let b = g.param(self.b);
        let xa = g.matmul_nt(x, a)?;
        let inc = g.matmul_nt(xa, b)?;
        g.scale(inc, self.scaling())
    }

    /// `W_q + (α/r)·B·A`.
    pub fn merge(&self, store: &ParamStore, w_q: &Tensor) -> Result<Tensor> {
        if w_q.shape() != [self.dim, self.dim] {
            return Err(Error::shape("lora_merge", w_q.shape(), &[self.dim, self.dim]));
        }
        let ba = store.value(self.b).matmul(store.value(self.a))?;
        let s = self.scaling();
        let data = w_q.data().iter().zip(ba.data()).map(|(w, d)| w + s * d).collect();
        Tensor::new(w_q.shape().to_vec(), data)
    }

    /// Folds the increment into the query rows of a fused `3D×D` weight.
    pub fn merge_into_qkv(&self, store: &ParamStore, qkv_weight: &Tensor) -> Result<Tensor> {
        if qkv_weight.shape() != [3 * self.dim, self.dim] {
            return Err(Error::shape("lora_merge", qkv_weight.shape(), &[3 * self.dim, self.dim]));
        }
        let w_q = qkv_weight.slice_rows(0, self.dim)?;
        let merged = self.merge(store, &w_q)?;
        let mut out = qkv_weight.clone();
        out.data_mut()[..self.dim * self.dim].copy_from_slice(merged.data());
        Ok(out)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }
}

/// Insertion points for SSF inside an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsfSite {
    Ln1,
    Qkv,
    Proj,
    Ln2,
    Fc1,
    Fc2,
}

impl SsfSite {
    pub const ALL: [SsfSite; 6] = [
        SsfSite::Ln1,
        SsfSite::Qkv,
        SsfSite::Proj,
        SsfSite::Ln2,
        SsfSite::Fc1,
        SsfSite::Fc2,
    ];

    /// Width of the activation at this site for residual width `dim`.
    pub fn width(self, dim: usize) -> usize {
        match self {
            SsfSite::Qkv => 3 * dim,
            SsfSite::Fc1 => 4 * dim,
            _ => dim,
        }
    }

    /// Whether the preceding operation is a linear layer the scale/shift can
    /// be folded into.
    pub fn follows_linear(self) -> bool {
        !matches!(self, SsfSite::Ln1 | SsfSite::Ln2)
    }

    pub fn name(self) -> &'static str {
        match self {
            SsfSite::Ln1 => "ln1",
            SsfSite::Qkv => "qkv",
            SsfSite::Proj => "proj",
            SsfSite::Ln2 => "ln2",
            SsfSite::Fc1 => "fc1",
            SsfSite::Fc2 => "fc2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SsfSite::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown SSF insertion point {s:?}")))
    }
}

/// Element-wise `scale ⊙ x + shift` over the trailing axis.
#[derive(Clone, Debug)]
pub struct SsfLayer {
    pub scale: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl SsfLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        SsfLayer {
            scale: store.register_ones(format!("{prefix}.scale"), &[dim]),
            shift: store.register_zeros(format!("{prefix}.shift"), &[dim]),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.value_mut(self.scale).data_mut().fill(1.0);
        store.value_mut(self.shift).data_mut().fill(0.0);
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (n, d) = g.value(x).dims2()?;
        if d != self.dim {
            return Err(Error::shape("ssf", g.shape(x), &[self.dim]));
        }
        let scale = g.param(self.scale);
        let shift = g.param(self.shift);
        let scale = g.broadcast_axis(scale, 0, n)?;
        let shift = g.broadcast_axis(shift, 0, n)?;
        let y = g.mul(x, scale)?;
        g.add(y, shift)
    }

    /// Folds this layer into the linear it follows: weight rows scaled by
    /// `scale`, bias mapped to `scale ⊙ b + shift`.
    pub fn merge(&self, store: &ParamStore, linear: &Linear) -> Result<(Tensor, Tensor)> {
        if linear.out_dim != self.dim {
            return Err(Error::shape("ssf_merge", &[linear.out_dim, linear.in_dim], &[self.dim]));
        }
        let scale = store.value(self.scale).data();
        let shift = store.value(self.shift).data();
        let mut w = store.value(linear.weight).clone();
        for (r, row) in w.data_mut().chunks_exact_mut(linear.in_dim).enumerate() {
            row.iter_mut().for_each(|v| *v *= scale[r]);
        }
        let b = store.value(linear.bias);
        let bias = b
            .data()
            .iter()
            .enumerate()
            .map(|(r, v)| scale[r] * v + shift[r])
            .collect();
        Ok((w, Tensor::vector(bias)))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.scale, self.shift]
    }
}

/// The SSF layers of one block (or of the shared instance).
#[derive(Clone, Debug)]
pub struct SsfBundle {
    pub layers: Vec<(SsfSite, SsfLayer)>,
}

impl SsfBundle {
    pub fn get(&self, site: SsfSite) -> Option<&SsfLayer> {
        self.layers.iter().find(|(s, _)| *s == site).map(|(_, l)| l)
    }

    /// Applies the layer at `site` if present.
    pub fn apply(&self, site: SsfSite, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self.get(site) {
            Some(l) => l.apply(g, x),
            None => Ok(x),
        }
    }

    /// Refuses sites that follow a LayerNorm; otherwise delegates to
    /// [`SsfLayer::merge`].
    pub fn merge(&self, site: SsfSite, store: &ParamStore, linear: &Linear) -> Result<(Tensor, Tensor)> {
        if !site.follows_linear() {
            return Err(Error::Merge(format!(
                "SSF at {} follows a LayerNorm, not a linear layer",
                site.name()
            )));
        }
        let layer = self
            .get(site)
            .ok_or_else(|| Error::Merge(format!("no SSF layer at {}", site.name())))?;
        layer.merge(store, linear)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    ParallelMhsa,
    ParallelFfn,
    Both,
}

impl Placement {
    pub fn at_mhsa(self) -> bool {
        matches!(self, Placement::ParallelMhsa | Placement::Both)
    }

    pub fn at_ffn(self) -> bool {
        matches!(self, Placement::ParallelFfn | Placement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Method {
    FullFinetune,
    LinearProbe,
    Adapter { rate: usize },
    Hpt { bins: usize, placement: Placement },
    Lora { rank: usize },
    Ssf { insertions: Vec<SsfSite> },
}

impl Method {
    pub fn kind(&self) -> &'static str {
        match self {
            Method::FullFinetune => "full",
            Method::LinearProbe => "probe",
            Method::Adapter { .. } => "adapter",
            Method::Hpt { .. } => "hpt",
            Method::Lora { .. } => "lora",
            Method::Ssf { .. } => "ssf",
        }
    }

    /// Whether the method adds modules beyond the backbone and head.
    pub fn has_modules(&self) -> bool {
        !matches!(self, Method::FullFinetune | Method::LinearProbe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FullFinetune => write!(f, "full fine-tune"),
            Method::LinearProbe => write!(f, "linear probe"),
            Method::Adapter { rate } => write!(f, "adapter({rate})"),
            Method::Hpt { bins, placement } => write!(f, "hpt({bins}, {placement:?})"),
            Method::Lora { rank } => write!(f, "lora({rank})"),
            Method::Ssf { insertions } => {
                let names: Vec<_> = insertions.iter().map(|s| s.name()).collect();
                write!(f, "ssf({})", names.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PetlConfig {
    pub method: Method,
    pub shared: bool,
}

impl PetlConfig {
    pub fn new(method: Method, shared: bool) -> Self {
        PetlConfig { method, shared }
    }

    /// Checks method parameters against the residual width.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match &self.method {
            Method::Adapter { rate } => adapter_hidden(dim, *rate).map(|_| ()),
            Method::Hpt { bins, .. } => {
                if *bins == 0 || dim % bins != 0 {
                    Err(Error::Config(format!(
                        "histogram bins ({bins}) must divide the feature width ({dim})"
                    )))
                } else {
                    Ok(())
                }
            }
            Method::Lora { rank } => {
                if *rank == 0 || *rank > dim {
                    Err(Error::Config(format!("LoRA rank must be in 1..={dim}, got {rank}")))
                } else {
                    Ok(())
                }
            }
            Method::Ssf { insertions } => {
                if insertions.is_empty() {
                    Err(Error::Config("SSF needs at least one insertion point".into()))
                } else {
                    Ok(())
                }
            }
            Method::FullFinetune | Method::LinearProbe => Ok(()),
        }
    }

    /// Closed-form parameter count of one module instance.
    pub fn module_param_count(&self, dim: usize) -> Result<usize> {
        self.validate(dim)?;
        Ok(match &self.method {
            Method::Adapter { rate } => adapter_param_count(dim, *rate)?,
            Method::Hpt { bins, .. } => histogram_param_count(dim, *bins),
            Method::Lora { rank } => 2 * dim * rank,
            Method::Ssf { insertions } => insertions.iter().map(|s| 2 * s.width(dim)).sum(),
            Method::FullFinetune | Method::LinearProbe => 0,
        })
    }

    /// Closed-form count of all module parameters across `blocks` blocks.
    pub fn total_param_count(&self, dim: usize, blocks: usize) -> Result<usize> {
        let per = self.module_param_count(dim)?;
        Ok(if self.shared { per } else { per * blocks })
    }
}

/// One PETL module instance.
#[derive(Clone, Debug)]
pub enum PetlBranch {
    Adapter(Adapter),
    Hpt {
        layer: HistogramLayer,
        placement: Placement,
    },
    Lora(LoraAdapter),
    Ssf(SsfBundle),
}

impl PetlBranch {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            PetlBranch::Adapter(a) => a.param_ids(),
            PetlBranch::Hpt { layer, .. } => layer.param_ids().to_vec(),
            PetlBranch::Lora(l) => l.param_ids().to_vec(),
            PetlBranch::Ssf(b) => b.layers.iter().flat_map(|(_, l)| l.param_ids()).collect(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            PetlBranch::Adapter(a) => a.init(store, rng),
            PetlBranch::Hpt { layer, .. } => layer.init(store, rng),
            PetlBranch::Lora(l) => l.init(store, rng),
            PetlBranch::Ssf(b) => b.layers.iter().for_each(|(_, l)| l.init(store)),
        }
    }

    pub fn as_ssf(&self) -> Option<&SsfBundle> {
        match self {
            PetlBranch::Ssf(b) => Some(b),
            _ => None,
        }
    }
}

/// The module instances attached to an encoder: one shared instance or one
/// per block.
#[derive(Clone, Debug, Default)]
pub struct PetlSet {
    pub instances: Vec<PetlBranch>,
    pub shared: bool,
}

impl PetlSet {
    pub fn for_block(&self, block: usize) -> Option<&PetlBranch> {
        if self.shared {
            self.instances.first()
        } else {
            self.instances.get(block)
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.instances.iter().flat_map(PetlBranch::param_ids).collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for inst in &self.instances {
            inst.init(store, rng);
        }
    }
}

/// Registers the module instances for `config`. Shared instances are named
/// without a block prefix (`hist.proj`); per-block ones as
/// `blocks.{i}.hist.proj`.
pub fn instantiate_petl(
    store: &mut ParamStore,
    config: &PetlConfig,
    dim: usize,
    num_blocks: usize,
) -> Result<PetlSet> {
    if num_blocks == 0 {
        return Err(Error::Config("at least one block is required".into()));
    }
    config.validate(dim)?;
    if !config.method.has_modules() {
        return Ok(PetlSet {
            instances: Vec::new(),
            shared: config.shared,
        });
    }
    let count = if config.shared { 1 } else { num_blocks };
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let prefix = if config.shared {
            String::new()
        } else {
            format!("blocks.{i}.")
        };
        let branch = match &config.method {
            Method::Adapter { rate } => PetlBranch::Adapter(Adapter::new(store, &prefix, dim, *rate)?),
            Method::Hpt { bins, placement } => PetlBranch::Hpt {
                layer: HistogramLayer::new(store, &prefix, dim, *bins)?,
                placement: *placement,
            },
            Method::Lora { rank } => PetlBranch::Lora(LoraAdapter::new(store, &prefix, dim, *rank)?),
            Method::Ssf { insertions } => PetlBranch::Ssf(SsfBundle {
                layers: insertions
                    .iter()
                    .map(|&site| {
                        let name = format!("{prefix}ssf.{}", site.name());
                        (site, SsfLayer::new(store, &name, site.width(dim)))
                    })
                    .collect(),
            }),
            Method::FullFinetune | Method::LinearProbe => unreachable!(),
        };
        instances.push(branch);
    }
    Ok(PetlSet {
        instances,
        shared: config.shared,
    })
}

/// Sorted, de-duplicated insertion set.
pub fn normalize_sites(mut sites: Vec<SsfSite>) -> Vec<SsfSite> {
    sites.sort();
    sites.dedup();
    sites
}

/// Flat, serializable form of [`PetlConfig`] (the `method` table of a run
/// configuration).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertions: Option<Vec<SsfSite>>,
    #[serde(default)]
    pub shared: bool,
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec {
            kind: "hpt".into(),
            rate: None,
            bins: Some(8),
            rank: None,
            placement: Some(Placement::ParallelMhsa),
            insertions: None,
            shared: true,
        }
    }
}

impl MethodSpec {
    pub fn to_config(&self) -> Result<PetlConfig> {
        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| Error::Config(format!("method {:?} requires `{key}`", self.kind)))
        };
        let method = match self.kind.as_str() {
            "full" | "full_finetune" => Method::FullFinetune,
            "probe" | "linear_probe" => Method::LinearProbe,
            "adapter" => Method::Adapter {
                rate: need(self.rate, "rate")?,
            },
            "hpt" => Method::Hpt {
                bins: need(self.bins, "bins")?,
                placement: self.placement.unwrap_or(Placement::ParallelMhsa),
            },
            "lora" => Method::Lora {
                rank: need(self.rank, "rank")?,
            },
            "ssf" => Method::Ssf {
                insertions: normalize_sites(self.insertions.clone().unwrap_or_else(|| SsfSite::ALL.to_vec())),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown method {other:?} (expected full, probe, adapter, hpt, lora or ssf)"
                )))
            }
        };
        Ok(PetlConfig::new(method, self.shared))
    }

    pub fn from_config(config: &PetlConfig) -> Self {
        let mut spec = MethodSpec {
            kind: config.method.kind().into(),
            rate: None,
            bins: None,
            rank: None,
            placement: None,
            insertions: None,
            shared: config.shared,
        };
        match &config.method {
            Method::Adapter { rate } => spec.rate = Some(*rate),
            Method::Hpt { bins, placement } => {
                spec.bins = Some(*bins);
                spec.placement = Some(*placement);
            }
            Method::Lora { rank } => spec.rank = Some(*rank),
            Method::Ssf { insertions } => spec.insertions = Some(insertions.clone()),
            Method::FullFinetune | Method::LinearProbe => {}
        }
        spec
    }
}
