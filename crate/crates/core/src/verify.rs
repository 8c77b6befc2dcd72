//! Gradient checks over every layer family at small extents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{grad_check, grad_check_corrupted, Graph, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::histogram::HistogramLayer;
use crate::model::{EncoderModel, ModelConfig};
use crate::nn::{fill_uniform, FfnLayer, LayerNorm, Linear, MhsaLayer};
use crate::param::{ParamId, ParamStore};
use crate::petl::{Adapter, LoraAdapter, Method, PetlConfig, Placement, SsfLayer};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

pub const FAMILIES: [&str; 10] = [
    "linear",
    "layer_norm",
    "mhsa",
    "ffn",
    "adapter",
    "lora",
    "ssf",
    "hist_forward",
    "block",
    "model_loss",
];

#[derive(Clone, Debug, Serialize)]
pub struct FamilyCheck {
    pub family: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub pass: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    fill_uniform(&mut t, 1.0, rng);
    t
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

/// Scalar readout `Σ y ⊙ R` with a fixed random `R`.
fn readout(g: &mut Graph<'_>, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check<F>(store: &mut ParamStore, corrupt: bool, f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let report = if corrupt {
        grad_check_corrupted(store, &ids, DEFAULT_STEP, f)?
    } else {
        grad_check(store, &ids, DEFAULT_STEP, f)?
    };
    Ok((report.max_rel_error, report.coordinates))
}

fn family(name: &str, seed: u64, corrupt: bool) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    match name {
        "linear" => {
            let l = Linear::new(&mut s, "l", 4, 3);
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[5, 4]), random(&mut rng, &[5, 3]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, xv)?;
                readout(g, y, &r)
            })
        }
        "layer_norm" => {
            let l = LayerNorm::new(&mut s, "ln", 5);
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[3, 5]), random(&mut rng, &[3, 5]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, xv)?;
                readout(g, y, &r)
            })
        }
        "mhsa" => {
            let l = MhsaLayer::new(&mut s, "attn", 4, 2)?;
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, xv)?;
                readout(g, y, &r)
            })
        }
        "ffn" => {
            let l = FfnLayer::new(&mut s, "ffn", 3);
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, xv)?;
                readout(g, y, &r)
            })
        }
        "adapter" => {
            let l = Adapter::new(&mut s, "", 6, 2)?;
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[3, 6]), random(&mut rng, &[3, 6]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, xv)?;
                readout(g, y, &r)
            })
        }
        "lora" => {
            let l = LoraAdapter::new(&mut s, "", 4, 2)?;
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, xv)?;
                readout(g, y, &r)
            })
        }
        "ssf" => {
            let l = SsfLayer::new(&mut s, "ssf", 4);
            let w = Linear::new(&mut s, "w", 3, 4);
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[3, 3]), random(&mut rng, &[3, 4]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = w.forward(g, xv)?;
                let y = l.apply(g, y)?;
                readout(g, y, &r)
            })
        }
        "hist_forward" => {
            let h = HistogramLayer::new(&mut s, "", 6, 3)?;
            let w = Linear::new(&mut s, "pre", 6, 6);
            randomize(&mut s, &mut rng);
            let (x, r) = (random(&mut rng, &[5, 6]), random(&mut rng, &[5, 6]));
            check(&mut s, corrupt, |g| {
                let xv = g.constant(x.clone());
                let y = w.forward(g, xv)?;
                let y = h.forward(g, y)?;
                readout(g, y, &r)
            })
        }
        "block" | "model_loss" => {
            let cfg = ModelConfig {
                dim: 4,
                heads: 2,
                blocks: 2,
                features: 3,
                max_len: 4,
                classes: 3,
            };
            let method = Method::Hpt {
                bins: 2,
                placement: Placement::Both,
            };
            let mut m = EncoderModel::new(cfg, PetlConfig::new(method, true))?;
            randomize(&mut m.store, &mut rng);
            let x = random(&mut rng, &[4, 3]);
            let r = random(&mut rng, &[4, 4]);
            let model = m.clone();
            if name == "block" {
                check(&mut m.store, corrupt, |g| {
                    let e = model.embed(g, &x)?;
                    let y = model.blocks[0].forward(g, e, model.petl.for_block(0))?;
                    readout(g, y, &r)
                })
            } else {
                check(&mut m.store, corrupt, |g| {
                    let logits = model.forward(g, &x, None)?;
                    g.cross_entropy(logits, 2)
                })
            }
        }
        other => unreachable!("unknown family {other}"),
    }
}

/// Runs every family. With `corrupt`, matmul backward is deliberately
/// wrong so the suite must fail.
pub fn grad_check_families(seed: u64, corrupt: bool) -> Result<Vec<FamilyCheck>> {
    FAMILIES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let (err, coords) = family(name, seed.wrapping_add(i as u64), corrupt)?;
            Ok(FamilyCheck {
                family: name.into(),
                max_rel_error: err,
                coordinates: coords,
                pass: err < GRAD_TOLERANCE,
            })
        })
        .collect()
}
