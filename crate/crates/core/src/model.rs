//! Pre-norm transformer encoder with optional PETL branches, mean-pooled
//! classification head, feature capture, checkpoints and reparameterized
//! merging.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FfnLayer, LayerNorm, Linear, MhsaLayer};
use crate::param::{ParamId, ParamStore};
use crate::petl::{instantiate_petl, Method, MethodSpec, PetlBranch, PetlConfig, PetlSet, SsfBundle, SsfSite};
use crate::tensor::Tensor;

/// Standard deviation of the positional table at initialization.
pub const POS_INIT_STD: f64 = 0.02;

/// Factor applied to the Kaiming draws of each block's residual-branch output
/// layers (`mhsa.proj`, `ffn.fc2`), LayerScale style.
pub const BRANCH_INIT_SCALE: f64 = 0.1;

pub const CHECKPOINT_PARAMS: &str = "params.tarc";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Raw features per input frame.
    pub features: usize,
    /// Rows of the positional table.
    pub max_len: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Desk-scale default used for training.
    pub fn toy() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            blocks: 4,
            features: 16,
            max_len: 32,
            classes: 4,
        }
    }

    /// ViT-Base widths, for parameter audits only.
    pub fn full_scale(classes: usize) -> Self {
        ModelConfig {
            dim: 768,
            heads: 12,
            blocks: 12,
            features: 128,
            max_len: 1214,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("features", self.features),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

/// One pre-norm block: `Z = X + MHSA(LN₁X)`, `Y = Z + FFN(LN₂Z)`, with PETL
/// branches spliced in at their insertion points.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub mhsa: MhsaLayer,
    pub ln2: LayerNorm,
    pub ffn: FfnLayer,
}

fn site(ssf: Option<&SsfBundle>, s: SsfSite, g: &mut Graph<'_>, x: Var) -> Result<Var> {
    match ssf {
        Some(bundle) => bundle.apply(s, g, x),
        None => Ok(x),
    }
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, index: usize, dim: usize, heads: usize) -> Result<Self> {
        let p = format!("blocks.{index}");
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{p}.ln1"), dim),
            mhsa: MhsaLayer::new(store, &format!("{p}.mhsa"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{p}.ln2"), dim),
            ffn: FfnLayer::new(store, &format!("{p}.ffn"), dim),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.param_ids().to_vec();
        ids.extend(self.mhsa.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.ffn.param_ids());
        ids
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, branch: Option<&PetlBranch>) -> Result<Var> {
        let ssf = branch.and_then(PetlBranch::as_ssf);
        let d = self.mhsa.dim;

        let h = self.ln1.forward(g, x)?;
        let h = site(ssf, SsfSite::Ln1, g, h)?;
        let mut qkv = self.mhsa.qkv.forward(g, h)?;
        if let Some(PetlBranch::Lora(lora)) = branch {
            let q = g.slice_cols(qkv, 0, d)?;
            let inc = lora.forward(g, h)?;
            let q = g.add(q, inc)?;
            let kv = g.slice_cols(qkv, d, 3 * d)?;
            qkv = g.concat_cols(&[q, kv])?;
        }
        let qkv = site(ssf, SsfSite::Qkv, g, qkv)?;
        let ctx = self.mhsa.attention(g, qkv)?;
        let a = self.mhsa.proj.forward(g, ctx)?;
        let a = site(ssf, SsfSite::Proj, g, a)?;
        let mut z = g.add(x, a)?;
        match branch {
            Some(PetlBranch::Adapter(adapter)) => {
                let inc = adapter.forward(g, h)?;
                z = g.add(z, inc)?;
            }
            Some(PetlBranch::Hpt { layer, placement }) if placement.at_mhsa() => {
                let inc = layer.forward(g, h)?;
                z = g.add(z, inc)?;
            }
            _ => {}
        }

        let h2 = self.ln2.forward(g, z)?;
        let h2 = site(ssf, SsfSite::Ln2, g, h2)?;
        let f = self.ffn.fc1.forward(g, h2)?;
        let f = site(ssf, SsfSite::Fc1, g, f)?;
        let f = g.gelu(f)?;
        let f = self.ffn.fc2.forward(g, f)?;
        let f = site(ssf, SsfSite::Fc2, g, f)?;
        let mut out = g.add(z, f)?;
        if let Some(PetlBranch::Hpt { layer, placement }) = branch {
            if placement.at_ffn() {
                let inc = layer.forward(g, h2)?;
                out = g.add(out, inc)?;
            }
        }
        Ok(out)
    }
}

/// Encoder plus its parameter store.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub petl_config: PetlConfig,
    pub store: ParamStore,
    pub input_proj: Linear,
    /// `max_len×D`
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub head_norm: LayerNorm,
    pub head: Linear,
    pub petl: PetlSet,
}

impl EncoderModel {
    /// Registers every parameter (zero-filled, LayerNorm gains at one). Call
    /// [`EncoderModel::init`] before use.
    pub fn new(config: ModelConfig, petl_config: PetlConfig) -> Result<Self> {
        Self::with_store(ParamStore::new(), config, petl_config)
    }

    /// Parameter names, extents and freezing without any values, for
    /// audits. Such a model cannot be evaluated.
    pub fn layout(config: ModelConfig, petl_config: PetlConfig) -> Result<Self> {
        let mut m = Self::with_store(ParamStore::layout_only(), config, petl_config)?;
        m.freeze_base();
        Ok(m)
    }

    fn with_store(mut store: ParamStore, config: ModelConfig, petl_config: PetlConfig) -> Result<Self> {
        config.validate()?;
        petl_config.validate(config.dim)?;
        let d = config.dim;
        let input_proj = Linear::new(&mut store, "embed.proj", config.features, d);
        let pos_embed = store.register_zeros("embed.pos", &[config.max_len, d]);
        let blocks = (0..config.blocks)
            .map(|i| EncoderBlock::new(&mut store, i, d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = LayerNorm::new(&mut store, "head.norm", d);
        let head = Linear::new(&mut store, "head.linear", d, config.classes);
        let petl = instantiate_petl(&mut store, &petl_config, d, config.blocks)?;
        Ok(EncoderModel {
            config,
            petl_config,
            store,
            input_proj,
            pos_embed,
            blocks,
            head_norm,
            head,
            petl,
        })
    }

    /// Builds and initializes a model with [`EncoderModel::init`], then
    /// applies the method's freezing rule.
    pub fn build(config: ModelConfig, petl_config: PetlConfig, backbone_seed: u64, seed: u64) -> Result<Self> {
        let mut m = EncoderModel::new(config, petl_config)?;
        m.init(backbone_seed, seed);
        m.freeze_base();
        Ok(m)
    }

    /// Backbone weights are drawn from `backbone_seed` so every method and run
    /// seed shares the same frozen encoder; PETL modules and the head are drawn
    /// from `seed`. The input projection has a zero bias and the residual
    /// branch outputs are scaled by [`BRANCH_INIT_SCALE`].
    pub fn init(&mut self, backbone_seed: u64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(backbone_seed);
        self.input_proj.kaiming_uniform_init(&mut self.store, &mut rng);
        self.store.value_mut(self.input_proj.bias).data_mut().fill(0.0);
        let normal = Normal::new(0.0, POS_INIT_STD).expect("valid std");
        for v in self.store.value_mut(self.pos_embed).data_mut() {
            *v = normal.sample(&mut rng);
        }
        for b in &self.blocks {
            for ln in [&b.ln1, &b.ln2] {
                self.store.value_mut(ln.gain).data_mut().fill(1.0);
                self.store.value_mut(ln.bias).data_mut().fill(0.0);
            }
            b.mhsa.kaiming_uniform_init(&mut self.store, &mut rng);
            b.ffn.kaiming_uniform_init(&mut self.store, &mut rng);
            for id in [b.mhsa.proj.weight, b.mhsa.proj.bias, b.ffn.fc2.weight, b.ffn.fc2.bias] {
                self.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= BRANCH_INIT_SCALE);
            }
        }
        self.store.value_mut(self.head_norm.gain).data_mut().fill(1.0);
        self.store.value_mut(self.head_norm.bias).data_mut().fill(0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.petl.init(&mut self.store, &mut rng);
        self.head.kaiming_uniform_init(&mut self.store, &mut rng);
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        [self.head_norm.param_ids(), self.head.param_ids()].concat()
    }

    /// Full fine-tune trains everything; linear probe trains the head; other
    /// methods train their modules and the head.
    pub fn freeze_base(&mut self) {
        match self.petl_config.method {
            Method::FullFinetune => self.store.set_all_trainable(true),
            _ => {
                self.store.set_all_trainable(false);
                let mut ids = self.head_param_ids();
                ids.extend(self.petl.param_ids());
                for id in ids {
                    self.store.set_trainable(id, true);
                }
            }
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.is_trainable(id)).collect()
    }

    /// Token embeddings `frames·Wᵀ + b + pos[0..N]`.
    pub fn embed(&self, g: &mut Graph<'_>, frames: &Tensor) -> Result<Var> {
        let (n, f) = frames.dims2()?;
        if f != self.config.features {
            return Err(Error::shape("embed", frames.shape(), &[n, self.config.features]));
        }
        if n > self.config.max_len {
            return Err(Error::SequenceLength {
                len: n,
                max: self.config.max_len,
            });
        }
        let x = g.constant(frames.clone());
        let e = self.input_proj.forward(g, x)?;
        let pos = g.param(self.pos_embed);
        let pos = g.slice_rows(pos, 0, n)?;
        g.add(e, pos)
    }

    /// Logits `[C]` for one `N×F` sequence. When `capture` is given, each
    /// block's output is pushed onto it.
    pub fn forward(&self, g: &mut Graph<'_>, frames: &Tensor, mut capture: Option<&mut Vec<Var>>) -> Result<Var> {
        let mut x = self.embed(g, frames)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, self.petl.for_block(i))?;
            if let Some(c) = capture.as_deref_mut() {
                c.push(x);
            }
        }
        let x = self.head_norm.forward(g, x)?;
        let pooled = g.mean_axis(x, 0)?;
        let pooled = g.reshape(pooled, &[1, self.config.dim])?;
        let logits = self.head.forward(g, pooled)?;
        g.reshape(logits, &[self.config.classes])
    }

    pub fn logits(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, frames, None)?;
        Ok(g.value(out).clone())
    }

    /// Logits together with every block's `N×D` output.
    pub fn capture_features(&self, frames: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new(&self.store);
        let mut vars = Vec::with_capacity(self.blocks.len());
        let out = self.forward(&mut g, frames, Some(&mut vars))?;
        let feats = vars.into_iter().map(|v| g.value(v).clone()).collect();
        Ok((g.value(out).clone(), feats))
    }

    /// Saves `params.tarc` and `manifest.json` under `dir`. `run` is echoed
    /// verbatim into the manifest.
    pub fn save_checkpoint(&self, dir: &Path, run: Option<serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.write_archive(&dir.join(CHECKPOINT_PARAMS))?;
        let manifest = CheckpointManifest {
            format_version: 1,
            model: self.config.clone(),
            method: MethodSpec::from_config(&self.petl_config),
            run,
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let petl = manifest.method.to_config()?;
        let mut m = EncoderModel::new(manifest.model.clone(), petl)?;
        m.store.load_archive(&dir.join(CHECKPOINT_PARAMS))?;
        m.freeze_base();
        Ok((m, manifest))
    }

    /// Folds LoRA and SSF branches into the base weights and returns an
    /// equivalent model with no branches. SSF layers after a LayerNorm are
    /// folded into that LayerNorm's affine parameters. Adapter and histogram
    /// branches are not mergeable.
    pub fn merged(&self) -> Result<EncoderModel> {
        match &self.petl_config.method {
            Method::Lora { .. } | Method::Ssf { .. } | Method::LinearProbe | Method::FullFinetune => {}
            m => return Err(Error::Merge(format!("{m} is not a reparameterizable branch"))),
        }
        let mut out = EncoderModel::new(self.config.clone(), PetlConfig::new(Method::LinearProbe, false))?;
        for (id, p) in out.store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            let src = self
                .store
                .id(&p)
                .ok_or_else(|| Error::Architecture(format!("missing parameter {p}")))?;
            out.store.set_value(id, self.store.value(src).clone())?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            let target = out.blocks[i].clone();
            match self.petl.for_block(i) {
                Some(PetlBranch::Lora(lora)) => {
                    let w = lora.merge_into_qkv(&self.store, self.store.value(block.mhsa.qkv.weight))?;
                    out.store.set_value(target.mhsa.qkv.weight, w)?;
                }
                Some(PetlBranch::Ssf(bundle)) => {
                    for (s, layer) in &bundle.layers {
                        let (src, dst) = match s {
                            SsfSite::Ln1 => {
                                fold_into_layer_norm(&self.store, layer, &block.ln1, &mut out.store, &target.ln1)?;
                                continue;
                            }
                            SsfSite::Ln2 => {
                                fold_into_layer_norm(&self.store, layer, &block.ln2, &mut out.store, &target.ln2)?;
                                continue;
                            }
                            SsfSite::Qkv => (&block.mhsa.qkv, &target.mhsa.qkv),
                            SsfSite::Proj => (&block.mhsa.proj, &target.mhsa.proj),
                            SsfSite::Fc1 => (&block.ffn.fc1, &target.ffn.fc1),
                            SsfSite::Fc2 => (&block.ffn.fc2, &target.ffn.fc2),
                        };
                        let (w, b) = bundle.merge(*s, &self.store, src)?;
                        out.store.set_value(dst.weight, w)?;
                        out.store.set_value(dst.bias, b)?;
                    }
                }
                _ => {}
            }
        }
        out.freeze_base();
        Ok(out)
    }
}

fn fold_into_layer_norm(
    src_store: &ParamStore,
    layer: &crate::petl::SsfLayer,
    src: &LayerNorm,
    dst_store: &mut ParamStore,
    dst: &LayerNorm,
) -> Result<()> {
    let scale = src_store.value(layer.scale).data();
    let shift = src_store.value(layer.shift).data();
    let gain: Vec<f64> = src_store
        .value(src.gain)
        .data()
        .iter()
        .zip(scale)
        .map(|(g, s)| s * g)
        .collect();
    let bias: Vec<f64> = src_store
        .value(src.bias)
        .data()
        .iter()
        .zip(scale.iter().zip(shift))
        .map(|(b, (s, t))| s * b + t)
        .collect();
    dst_store.set_value(dst.gain, Tensor::vector(gain))?;
    dst_store.set_value(dst.bias, Tensor::vector(bias))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub method: MethodSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autograd::{gelu, grad_check};
    use crate::nn::fill_uniform;
    use crate::petl::Placement;

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            blocks: 2,
            features: 3,
            max_len: 6,
            classes: 3,
        }
    }

    fn frames(seed: u64, n: usize, f: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[n, f]);
        fill_uniform(&mut t, 1.0, &mut rng);
        t
    }

    fn perturb_all(m: &mut EncoderModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            for v in m.store.value_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    // ---- loop-based reference ------------------------------------------

    type Mat = Vec<Vec<f64>>;

    fn rows(t: &Tensor) -> Mat {
        let (n, d) = t.dims2().unwrap();
        (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
    }

    fn lin(x: &Mat, s: &ParamStore, l: &Linear) -> Mat {
        let w = s.value(l.weight);
        let b = s.value(l.bias).data();
        x.iter()
            .map(|r| {
                (0..l.out_dim)
                    .map(|o| b[o] + (0..l.in_dim).map(|i| w.at2(o, i) * r[i]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(x: &Mat, s: &ParamStore, l: &LayerNorm) -> Mat {
        let gain = s.value(l.gain).data();
        let bias = s.value(l.bias).data();
        x.iter()
            .map(|r| {
                let d = r.len() as f64;
                let mu = r.iter().sum::<f64>() / d;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + l.eps).sqrt() * gain[j] + bias[j])
                    .collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn attention(qkv: &Mat, d: usize, heads: usize) -> Mat {
        let n = qkv.len();
        let hd = d / heads;
        let mut out = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|k| qkv[i][h * hd + k] * qkv[j][d + h * hd + k]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..hd {
                    out[i][h * hd + k] = (0..n).map(|j| e[j] / z * qkv[j][2 * d + h * hd + k]).sum();
                }
            }
        }
        out
    }

    fn hist(x: &Mat, s: &ParamStore, h: &crate::histogram::HistogramLayer) -> Mat {
        let n = x.len();
        let (b, d) = (h.bins, h.dim);
        let l = d / b;
        let w = s.value(h.proj);
        let mu = s.value(h.centers).data();
        let gamma = s.value(h.widths).data();
        let r: Mat = x
            .iter()
            .map(|row| {
                let y: Vec<f64> = (0..b)
                    .map(|k| {
                        let v: f64 = (0..d).map(|j| w.at2(k, j) * row[j]).sum();
                        (-(gamma[k] * (v - mu[k])).powi(2)).exp()
                    })
                    .collect();
                let total: f64 = y.iter().sum();
                y.iter().map(|v| v / (total + h.eps)).collect()
            })
            .collect();
        let mut flat = vec![0.0; d];
        for k in 0..b {
            for seg in 0..l {
                let start = seg * n / l;
                let end = ((seg + 1) * n).div_ceil(l);
                flat[k * l + seg] = (start..end).map(|t| r[t][k]).sum::<f64>() / (end - start) as f64;
            }
        }
        vec![flat; n]
    }

    fn reference_block(x: &Mat, s: &ParamStore, b: &EncoderBlock, branch: Option<&PetlBranch>) -> Mat {
        let d = b.mhsa.dim;
        let h = ln(x, s, &b.ln1);
        let qkv = lin(&h, s, &b.mhsa.qkv);
        let a = lin(&attention(&qkv, d, b.mhsa.heads), s, &b.mhsa.proj);
        let mut z = add(x, &a);
        if let Some(PetlBranch::Hpt { layer, placement }) = branch {
            if placement.at_mhsa() {
                z = add(&z, &hist(&h, s, layer));
            }
        }
        let h2 = ln(&z, s, &b.ln2);
        let f = lin(&h2, s, &b.ffn.fc1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = lin(&f, s, &b.ffn.fc2);
        let mut out = add(&z, &f);
        if let Some(PetlBranch::Hpt { layer, placement }) = branch {
            if placement.at_ffn() {
                out = add(&out, &hist(&h2, s, layer));
            }
        }
        out
    }

    fn max_diff(a: &Tensor, b: &Mat) -> f64 {
        a.data()
            .iter()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn hpt(bins: usize, placement: Placement, shared: bool) -> PetlConfig {
        PetlConfig::new(Method::Hpt { bins, placement }, shared)
    }

    // ---- tests ---------------------------------------------------------

    #[test]
    fn block_matches_loop_reference() {
        for placement in [Placement::ParallelMhsa, Placement::ParallelFfn, Placement::Both] {
            let cfg = ModelConfig {
                dim: 8,
                heads: 2,
                blocks: 1,
                features: 3,
                max_len: 4,
                classes: 2,
            };
            let mut m = EncoderModel::new(cfg, hpt(4, placement, true)).unwrap();
            m.init(1, 2);
            perturb_all(&mut m, 3);
            let x = frames(4, 3, 8);
            let mut g = Graph::new(&m.store);
            let xv = g.constant(x.clone());
            let y = m.blocks[0].forward(&mut g, xv, m.petl.for_block(0)).unwrap();
            let r = reference_block(&rows(&x), &m.store, &m.blocks[0], m.petl.for_block(0));
            assert!(max_diff(g.value(y), &r) < 1e-12, "{placement:?}");
        }
    }

    #[test]
    fn plain_block_and_zeroed_histogram_agree() {
        let mut m = EncoderModel::new(small(), hpt(4, Placement::Both, true)).unwrap();
        m.init(1, 2);
        let x = frames(5, 4, 8);
        let mut g = Graph::new(&m.store);
        let xv = g.constant(x.clone());
        let plain = m.blocks[0].forward(&mut g, xv, None).unwrap();
        let plain_val = g.value(plain).clone();
        let r = reference_block(&rows(&x), &m.store, &m.blocks[0], None);
        assert!(max_diff(&plain_val, &r) < 1e-12);
        drop(g);

        let mut g = Graph::new(&m.store);
        let xv = g.constant(x.clone());
        let with = m.blocks[0].forward(&mut g, xv, m.petl.for_block(0)).unwrap();
        assert!(g.value(with).max_abs_diff(&plain_val) > 0.0);
        drop(g);

        // huge widths drive every membership to exactly zero
        let PetlBranch::Hpt { layer, .. } = m.petl.instances[0].clone() else {
            unreachable!()
        };
        m.store.value_mut(layer.widths).data_mut().fill(1e100);
        let mut g = Graph::new(&m.store);
        let xv = g.constant(x);
        let zeroed = m.blocks[0].forward(&mut g, xv, m.petl.for_block(0)).unwrap();
        assert_eq!(g.value(zeroed), &plain_val);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = EncoderModel::build(small(), PetlConfig::new(Method::LinearProbe, false), 1, 2).unwrap();
        let h = m.head.clone();
        m.store.value_mut(h.weight).data_mut().fill(0.0);
        m.store.value_mut(h.bias).data_mut().fill(0.0);
        for seed in 0..3 {
            let out = m.logits(&frames(seed, 5, 3)).unwrap();
            assert_eq!(out.shape(), &[3]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_composition() {
        let cfg = ModelConfig {
            blocks: 1,
            ..small()
        };
        let mut m = EncoderModel::build(cfg, PetlConfig::new(Method::LinearProbe, false), 3, 4).unwrap();
        perturb_all(&mut m, 9);
        let x = frames(6, 5, 3);
        let mut e = lin(&rows(&x), &m.store, &m.input_proj);
        let pos = m.store.value(m.pos_embed);
        for (i, r) in e.iter_mut().enumerate() {
            for (j, v) in r.iter_mut().enumerate() {
                *v += pos.at2(i, j);
            }
        }
        let y = reference_block(&e, &m.store, &m.blocks[0], None);
        let y = ln(&y, &m.store, &m.head_norm);
        let mean: Vec<f64> = (0..8).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / y.len() as f64).collect();
        let expect = lin(&vec![mean], &m.store, &m.head);
        let got = m.logits(&x).unwrap();
        assert!(max_diff(&got, &expect) < 1e-12);
    }

    #[test]
    fn row_permutation_invariance_without_positions() {
        let mut m = EncoderModel::build(small(), hpt(8, Placement::Both, false), 1, 2).unwrap();
        let pos = m.pos_embed;
        m.store.value_mut(pos).data_mut().fill(0.0);
        let x = frames(7, 5, 3);
        let mut perm = x.clone();
        let order = [3, 0, 4, 1, 2];
        for (dst, &src) in order.iter().enumerate() {
            perm.data_mut()[dst * 3..dst * 3 + 3].copy_from_slice(x.row(src));
        }
        let a = m.logits(&x).unwrap();
        let b = m.logits(&perm).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn sequence_length_and_feature_checks() {
        let m = EncoderModel::build(small(), PetlConfig::new(Method::LinearProbe, false), 1, 2).unwrap();
        assert!(matches!(
            m.logits(&frames(1, 7, 3)),
            Err(Error::SequenceLength { len: 7, max: 6 })
        ));
        assert!(m.logits(&frames(1, 6, 3)).is_ok());
        assert!(m.logits(&frames(1, 4, 2)).is_err());
    }

    #[test]
    fn capture_does_not_perturb() {
        let m = EncoderModel::build(small(), hpt(4, Placement::ParallelMhsa, true), 1, 2).unwrap();
        let x = frames(8, 4, 3);
        let (logits, feats) = m.capture_features(&x).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(logits, m.logits(&x).unwrap());

        let mut g = Graph::new(&m.store);
        let e = m.embed(&mut g, &x).unwrap();
        let b0 = m.blocks[0].forward(&mut g, e, m.petl.for_block(0)).unwrap();
        assert_eq!(g.value(b0), &feats[0]);
    }

    #[test]
    fn freezing_rules() {
        let probe = EncoderModel::build(small(), PetlConfig::new(Method::LinearProbe, false), 1, 2).unwrap();
        let head: usize = probe.head_param_ids().iter().map(|&id| probe.store.value(id).numel()).sum();
        assert_eq!(head, 2 * 8 + 8 * 3 + 3);
        assert_eq!(probe.store.count(true), head);

        let full = EncoderModel::build(small(), PetlConfig::new(Method::FullFinetune, false), 1, 2).unwrap();
        assert_eq!(full.store.count(true), full.store.count(false));

        let h = EncoderModel::build(small(), hpt(4, Placement::ParallelMhsa, true), 1, 2).unwrap();
        assert_eq!(h.store.count(true), head + 4 * 8 + 8);
        let h = EncoderModel::build(small(), hpt(4, Placement::ParallelMhsa, false), 1, 2).unwrap();
        assert_eq!(h.store.count(true), head + 2 * (4 * 8 + 8));
    }

    #[test]
    fn full_scale_counts() {
        let m = EncoderModel::new(ModelConfig::full_scale(4), hpt(16, Placement::ParallelMhsa, true)).unwrap();
        let mut m = m;
        m.freeze_base();
        assert_eq!(m.store.count(true), 12_320 + 4_612);
        let per_block = 2 * 768 * 2 + (768 * 2304 + 2304) + (768 * 768 + 768) + (768 * 3072 + 3072) + (3072 * 768 + 768);
        assert_eq!(per_block, 7_087_872);
    }

    #[test]
    fn zero_init_branches_reproduce_baseline() {
        let base = EncoderModel::build(small(), PetlConfig::new(Method::LinearProbe, false), 11, 12).unwrap();
        let x = frames(13, 5, 3);
        let want = base.logits(&x).unwrap();
        for method in [
            Method::Adapter { rate: 2 },
            Method::Lora { rank: 2 },
            Method::Ssf {
                insertions: SsfSite::ALL.to_vec(),
            },
        ] {
            for shared in [true, false] {
                let mut m = EncoderModel::build(small(), PetlConfig::new(method.clone(), shared), 11, 12).unwrap();
                // the head comes from the run seed after PETL init; copy it
                for id in base.head_param_ids() {
                    let name = base.store.get(id).name.clone();
                    let dst = m.store.id(&name).unwrap();
                    m.store.set_value(dst, base.store.value(id).clone()).unwrap();
                }
                assert_eq!(m.logits(&x).unwrap(), want, "{method}");
            }
        }
    }

    #[test]
    fn lora_and_ssf_merge_preserve_logits() {
        for (method, shared) in [
            (Method::Lora { rank: 2 }, true),
            (Method::Lora { rank: 3 }, false),
            (
                Method::Ssf {
                    insertions: SsfSite::ALL.to_vec(),
                },
                false,
            ),
            (
                Method::Ssf {
                    insertions: vec![SsfSite::Ln1, SsfSite::Qkv],
                },
                true,
            ),
        ] {
            let mut m = EncoderModel::build(small(), PetlConfig::new(method.clone(), shared), 1, 2).unwrap();
            perturb_all(&mut m, 17);
            let merged = m.merged().unwrap();
            assert!(merged.store.count(false) < m.store.count(false));
            assert!(merged.petl.instances.is_empty());
            let x = frames(18, 6, 3);
            let d = m.logits(&x).unwrap().max_abs_diff(&merged.logits(&x).unwrap());
            assert!(d < 1e-9, "{method}: {d}");
        }
        let m = EncoderModel::build(small(), hpt(4, Placement::Both, true), 1, 2).unwrap();
        assert!(matches!(m.merged(), Err(Error::Merge(_))));
    }

    #[test]
    fn shared_histogram_at_both_points_accumulates() {
        // Gradient of the shared module equals the sum over its two uses,
        // computed with two independent copies carrying the same values.
        let cfg = ModelConfig {
            blocks: 1,
            ..small()
        };
        let mut shared = EncoderModel::build(cfg.clone(), hpt(4, Placement::Both, true), 1, 2).unwrap();
        perturb_all(&mut shared, 5);
        let x = frames(6, 4, 3);
        let mut g = Graph::new(&shared.store);
        let logits = shared.forward(&mut g, &x, None).unwrap();
        let loss = g.cross_entropy(logits, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        let PetlBranch::Hpt { layer, .. } = &shared.petl.instances[0] else {
            unreachable!()
        };
        let total = grads.get(layer.proj).unwrap().clone();

        // split: a store with two histogram layers, one per insertion point
        let mut store = shared.store.clone();
        let a = crate::histogram::HistogramLayer::new(&mut store, "split_a.", 8, 4).unwrap();
        let b = crate::histogram::HistogramLayer::new(&mut store, "split_b.", 8, 4).unwrap();
        for (dst, src) in a.param_ids().iter().chain(b.param_ids().iter()).zip(layer.param_ids().iter().cycle()) {
            let v = store.value(*src).clone();
            store.set_value(*dst, v).unwrap();
            store.set_trainable(*dst, true);
        }
        let mut g = Graph::new(&store);
        let block = &shared.blocks[0];
        let e = shared.embed(&mut g, &x).unwrap();
        let h = block.ln1.forward(&mut g, e).unwrap();
        let y_plain_mhsa = block.mhsa.forward(&mut g, h).unwrap();
        let mut z = g.add(e, y_plain_mhsa).unwrap();
        let ha = a.forward(&mut g, h).unwrap();
        z = g.add(z, ha).unwrap();
        let h2 = block.ln2.forward(&mut g, z).unwrap();
        let f = block.ffn.forward(&mut g, h2).unwrap();
        let mut out = g.add(z, f).unwrap();
        let hb = b.forward(&mut g, h2).unwrap();
        out = g.add(out, hb).unwrap();
        let out = shared.head_norm.forward(&mut g, out).unwrap();
        let pooled = g.mean_axis(out, 0).unwrap();
        let pooled = g.reshape(pooled, &[1, 8]).unwrap();
        let l = shared.head.forward(&mut g, pooled).unwrap();
        let l = g.reshape(l, &[3]).unwrap();
        let loss = g.cross_entropy(l, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        let sum: Vec<f64> = grads
            .get(a.proj)
            .unwrap()
            .data()
            .iter()
            .zip(grads.get(b.proj).unwrap().data())
            .map(|(p, q)| p + q)
            .collect();
        let d = total
            .data()
            .iter()
            .zip(&sum)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn model_loss_grad_check() {
        let cfg = ModelConfig {
            dim: 4,
            heads: 2,
            blocks: 2,
            features: 2,
            max_len: 3,
            classes: 2,
        };
        let mut m = EncoderModel::build(cfg, hpt(2, Placement::Both, true), 1, 2).unwrap();
        perturb_all(&mut m, 3);
        let x = frames(4, 3, 2);
        let ids: Vec<_> = m.store.ids().collect();
        let model = m.clone();
        let report = grad_check(&mut m.store, &ids, 1e-5, |g| {
            let logits = model.forward(g, &x, None)?;
            g.cross_entropy(logits, 1)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = EncoderModel::build(small(), hpt(4, Placement::ParallelFfn, false), 1, 2).unwrap();
        perturb_all(&mut m, 8);
        m.save_checkpoint(dir.path(), Some(serde_json::json!({"note": "x"}))).unwrap();
        let (back, manifest) = EncoderModel::load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.run.unwrap()["note"], "x");
        let x = frames(2, 4, 3);
        assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
        assert_eq!(back.store.count(true), m.store.count(true));

        let other = EncoderModel::build(small(), hpt(8, Placement::ParallelFfn, false), 1, 2).unwrap();
        let mut other = other;
        assert!(matches!(
            other.store.load_archive(&dir.path().join(CHECKPOINT_PARAMS)),
            Err(Error::Architecture(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = EncoderModel::build(small(), hpt(4, Placement::Both, true), 5, 6).unwrap();
        let b = EncoderModel::build(small(), hpt(4, Placement::Both, true), 5, 6).unwrap();
        let x = frames(1, 6, 3);
        assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
        let c = EncoderModel::build(small(), hpt(4, Placement::Both, true), 5, 7).unwrap();
        assert_ne!(a.logits(&x).unwrap(), c.logits(&x).unwrap());
    }

    #[test]
    fn layout_matches_allocated_store() {
        let methods = [
            Method::LinearProbe,
            Method::FullFinetune,
            Method::Adapter { rate: 4 },
            Method::Lora { rank: 2 },
            Method::Hpt { bins: 4, placement: Placement::Both },
        ];
        for method in methods {
            for shared in [true, false] {
                let petl = PetlConfig::new(method.clone(), shared);
                let full = EncoderModel::build(small(), petl.clone(), 0, 0).unwrap();
                let layout = EncoderModel::layout(small(), petl).unwrap();
                assert!(layout.store.is_layout_only());
                assert_eq!(layout.store.count(true), full.store.count(true), "{method:?}");
                assert_eq!(layout.store.count(false), full.store.count(false), "{method:?}");
                let names = |m: &EncoderModel| m.store.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>();
                assert_eq!(names(&layout), names(&full));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let layout = EncoderModel::layout(small(), PetlConfig::new(Method::LinearProbe, true)).unwrap();
        assert!(layout.store.write_archive(&dir.path().join("p.tarc")).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig { heads: 3, ..small() };
        assert!(EncoderModel::new(bad, PetlConfig::new(Method::LinearProbe, false)).is_err());
        let bad = ModelConfig { classes: 1, ..small() };
        assert!(EncoderModel::new(bad, PetlConfig::new(Method::LinearProbe, false)).is_err());
        assert!(EncoderModel::new(small(), hpt(3, Placement::Both, true)).is_err());
    }
}
