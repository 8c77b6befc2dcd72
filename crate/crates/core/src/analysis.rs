//! Parameter audits against published table values, linear CKA and
//! layer-wise similarity reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::petl::{Method, PetlConfig, Placement, SsfSite};
use crate::tensor::Tensor;

/// Relative tolerance when comparing against published parameter counts.
pub const PUBLISHED_TOLERANCE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub module: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishedReference {
    pub table: String,
    pub row: String,
    pub dataset: String,
    pub reference: f64,
    /// `(measured − reference) / reference`.
    pub relative_delta: f64,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamAudit {
    pub method: String,
    pub shared: bool,
    pub rows: Vec<AuditRow>,
    pub trainable: usize,
    pub frozen: usize,
    /// Sum over `rows`: trainable only, or everything, per the request.
    pub counted: usize,
    /// Closed-form PETL module count (all instances).
    pub module_closed_form: usize,
    /// Closed-form classifier head count (`head.norm` + `head.linear`).
    pub head_closed_form: usize,
    pub published: Option<PublishedReference>,
}

impl ParamAudit {
    /// Count of PETL module parameters found by walking the store.
    pub fn module_count(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r.module.as_str(), "hist" | "adapter" | "lora" | "ssf"))
            .map(|r| r.count)
            .sum()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("module,count\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.module, r.count);
        }
        let _ = writeln!(out, "total,{}", self.counted);
        out
    }

    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = self
            .rows
            .iter()
            .map(|r| (r.module.clone(), r.count.to_string()))
            .collect();
        rows.push(("total".into(), self.counted.to_string()));
        rows.push(("trainable".into(), self.trainable.to_string()));
        rows.push(("frozen".into(), self.frozen.to_string()));
        rows.push((
            "closed form".into(),
            format!("{} + head {}", self.module_closed_form, self.head_closed_form),
        ));
        if let Some(p) = &self.published {
            rows.push((
                format!("reference {} ({})", p.table, p.dataset),
                format!("{} ({:+.1}%)", human(p.reference), 100.0 * p.relative_delta),
            ));
        }
        aligned(&["module", "count"], &rows)
    }
}

/// Module family of a registered parameter name.
pub fn module_of(name: &str) -> &'static str {
    for (key, family) in [
        ("hist.", "hist"),
        ("adapter.", "adapter"),
        ("lora.", "lora"),
        ("ssf.", "ssf"),
    ] {
        if name.starts_with(key) || name.contains(&format!(".{key}")) {
            return family;
        }
    }
    if name.starts_with("embed.") {
        "embed"
    } else if name.starts_with("head.") {
        "head"
    } else if name.starts_with("blocks.") {
        "blocks"
    } else {
        "other"
    }
}

/// `LN(D)` + `Linear(D→C)`.
pub fn head_param_count(dim: usize, classes: usize) -> usize {
    2 * dim + dim * classes + classes
}

/// Walks the store and sums extents per module family.
pub fn count_params(model: &EncoderModel, trainable_only: bool) -> Result<ParamAudit> {
    let order = ["embed", "blocks", "hist", "adapter", "lora", "ssf", "head", "other"];
    let mut counts = [0usize; 8];
    let (mut trainable, mut frozen) = (0, 0);
    for (_, p) in model.store.iter() {
        let n = p.numel();
        if p.trainable {
            trainable += n;
        } else {
            frozen += n;
        }
        if trainable_only && !p.trainable {
            continue;
        }
        let idx = order.iter().position(|&m| m == module_of(&p.name)).expect("known family");
        counts[idx] += n;
    }
    let rows: Vec<AuditRow> = order
        .iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(m, c)| AuditRow {
            module: m.to_string(),
            count: c,
        })
        .collect();
    let c = &model.config;
    Ok(ParamAudit {
        method: model.petl_config.method.to_string(),
        shared: model.petl_config.shared,
        counted: rows.iter().map(|r| r.count).sum(),
        rows,
        trainable,
        frozen,
        module_closed_form: model.petl_config.total_param_count(c.dim, c.blocks)?,
        head_closed_form: head_param_count(c.dim, c.classes),
        published: None,
    })
}

/// One published parameter count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishedColumn {
    pub dataset: &'static str,
    pub classes: usize,
    pub params: f64,
}

/// A named table row with its method and published counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub table: &'static str,
    pub row: &'static str,
    #[serde(skip)]
    pub config: PetlConfig,
    pub columns: Vec<PublishedColumn>,
}

fn two(deepship: f64, other: f64) -> Vec<PublishedColumn> {
    vec![
        PublishedColumn {
            dataset: "DeepShip",
            classes: 4,
            params: deepship,
        },
        PublishedColumn {
            dataset: "ShipsEar/VTUAD",
            classes: 5,
            params: other,
        },
    ]
}

fn vtuad(v: f64) -> Vec<PublishedColumn> {
    vec![PublishedColumn {
        dataset: "VTUAD",
        classes: 5,
        params: v,
    }]
}

/// Every published row at full scale.
pub fn presets() -> Vec<Preset> {
    let hpt = |bins| Method::Hpt {
        bins,
        placement: Placement::ParallelMhsa,
    };
    let ssf = |sites: &[SsfSite]| Method::Ssf {
        insertions: sites.to_vec(),
    };
    let p = |name, table, row, method, shared, columns| Preset {
        name,
        table,
        row,
        config: PetlConfig::new(method, shared),
        columns,
    };
    use SsfSite::*;
    vec![
        p("table1-full", "Table 1", "Full fine tune", Method::FullFinetune, true, two(86.9e6, 86.9e6)),
        p("table1-probe", "Table 1", "Linear probe", Method::LinearProbe, true, two(4.9e3, 5.6e3)),
        p("table1-adapter256", "Table 1", "Adapter (256)", Method::Adapter { rate: 256 }, true, two(10.2e3, 11.0e3)),
        p("table1-adapter128", "Table 1", "Adapter (128)", Method::Adapter { rate: 128 }, true, two(14.9e3, 15.6e3)),
        p("table1-adapter64", "Table 1", "Adapter (64)", Method::Adapter { rate: 64 }, true, two(24.1e3, 24.8e3)),
        p("table1-hpt4", "Table 1", "HPT (4)", hpt(4), true, two(7.9e3, 8.7e3)),
        p("table1-hpt8", "Table 1", "HPT (8)", hpt(8), true, two(11.0e3, 11.8e3)),
        p("table1-hpt16", "Table 1", "HPT (16)", hpt(16), true, two(17.2e3, 18.0e3)),
        p("table2-probe", "Table 2", "Linear probe", Method::LinearProbe, false, vtuad(5.6e3)),
        p("table2-adapter256", "Table 2", "Adapter (256)", Method::Adapter { rate: 256 }, false, vtuad(70.2e3)),
        p("table2-adapter128", "Table 2", "Adapter (128)", Method::Adapter { rate: 128 }, false, vtuad(125.0e3)),
        p("table2-adapter64", "Table 2", "Adapter (64)", Method::Adapter { rate: 64 }, false, vtuad(236.0e3)),
        p("table2-hpt4", "Table 2", "HPT (4)", hpt(4), false, vtuad(42.6e3)),
        p("table2-hpt8", "Table 2", "HPT (8)", hpt(8), false, vtuad(79.6e3)),
        p("table2-hpt16", "Table 2", "HPT (16)", hpt(16), false, vtuad(153.0e3)),
        p("table3-lora6", "Table 3", "LoRA rank of 6", Method::Lora { rank: 6 }, true, two(14.1e3, 14.9e3)),
        p("table3-lora12", "Table 3", "LoRA rank of 12", Method::Lora { rank: 12 }, true, two(23.3e3, 24.1e3)),
        p("table3-ssf-ln", "Table 3", "SSF LayerNorm", ssf(&[Ln1]), true, two(6.4e3, 7.2e3)),
        p("table3-ssf-mhsa", "Table 3", "SSF MHSA", ssf(&[Ln1, Qkv, Proj]), true, two(12.5e3, 13.3e3)),
        p(
            "table3-ssf-mhsa-ffn",
            "Table 3",
            "SSF MHSA & FFN",
            ssf(&SsfSite::ALL),
            true,
            two(21.8e3, 22.5e3),
        ),
        p("table3-hpt4", "Table 3", "4 bins MHSA", hpt(4), true, two(7.9e3, 8.7e3)),
        p("table3-hpt8", "Table 3", "8 bins MHSA", hpt(8), true, two(11.0e3, 11.8e3)),
        p("table3-hpt16", "Table 3", "16 bins MHSA", hpt(16), true, two(17.2e3, 18.0e3)),
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = presets().iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })
}

/// Audits a preset at full scale, one audit per published column.
pub fn audit_preset(preset: &Preset) -> Result<Vec<ParamAudit>> {
    preset
        .columns
        .iter()
        .map(|col| {
            let model = EncoderModel::layout(ModelConfig::full_scale(col.classes), preset.config.clone())?;
            let mut audit = count_params(&model, true)?;
            let delta = (audit.trainable as f64 - col.params) / col.params;
            audit.published = Some(PublishedReference {
                table: preset.table.into(),
                row: preset.row.into(),
                dataset: col.dataset.into(),
                reference: col.params,
                relative_delta: delta,
                within_tolerance: delta.abs() <= PUBLISHED_TOLERANCE,
            });
            Ok(audit)
        })
        .collect()
}

/// `12.3K`, `86.1M` style rendering.
pub fn human(n: f64) -> String {
    if n >= 1e6 {
        format!("{:.1}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

fn center_columns(x: &Tensor) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..m).map(|i| x.at2(i, j)).sum::<f64>() / m as f64;
        for i in 0..m {
            out.data_mut()[i * d + j] -= mean;
        }
    }
    Ok(out)
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear CKA `‖AᵀB‖²_F / (‖AᵀA‖_F·‖BᵀB‖_F)` on column-centered inputs.
/// Returns 0 when either side has no variance.
pub fn cka_linear(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ma, _) = a.dims2()?;
    let (mb, _) = b.dims2()?;
    if ma != mb {
        return Err(Error::shape("cka_linear", a.shape(), b.shape()));
    }
    if ma < 2 {
        return Err(Error::Config("CKA needs at least two rows".into()));
    }
    let a = center_columns(a)?;
    let b = center_columns(b)?;
    let at = a.transpose()?;
    let bt = b.transpose()?;
    let cross = frobenius_sq(&at.matmul(&b)?);
    let aa = frobenius_sq(&at.matmul(&a)?).sqrt();
    let bb = frobenius_sq(&bt.matmul(&b)?).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / (aa * bb)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    /// One score per block, in block order.
    pub scores: Vec<f64>,
}

impl SimilarityReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("block,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", crate::train::fmt_sig9(*s));
        }
        out
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, String)> = self
            .scores
            .iter()
            .enumerate()
            .map(|(i, s)| (i.to_string(), format!("{s:.6}")))
            .collect();
        aligned(&["block", "score"], &rows)
    }
}

/// Token-mean features of every block for every probe input: one `M×D`
/// matrix per block.
pub fn block_features(model: &EncoderModel, probe: &[Tensor]) -> Result<Vec<Tensor>> {
    let (m, d, blocks) = (probe.len(), model.config.dim, model.config.blocks);
    let mut mats = vec![Tensor::zeros(&[m.max(1), d]); blocks];
    for (row, frames) in probe.iter().enumerate() {
        let (_, feats) = model.capture_features(frames)?;
        for (b, f) in feats.iter().enumerate() {
            let (n, _) = f.dims2()?;
            let dst = &mut mats[b].data_mut()[row * d..(row + 1) * d];
            for t in 0..n {
                dst.iter_mut().zip(f.row(t)).for_each(|(o, v)| *o += v);
            }
            dst.iter_mut().for_each(|o| *o /= n as f64);
        }
    }
    Ok(mats)
}

/// Per-block linear CKA between two models on a shared probe set.
pub fn similarity_report(candidate: &EncoderModel, reference: &EncoderModel, probe: &[Tensor]) -> Result<SimilarityReport> {
    let (c, r) = (&candidate.config, &reference.config);
    if c.blocks != r.blocks || c.dim != r.dim {
        return Err(Error::Architecture(format!(
            "candidate has {} blocks of width {}, reference {} blocks of width {}",
            c.blocks, c.dim, r.blocks, r.dim
        )));
    }
    let a = block_features(candidate, probe)?;
    let b = block_features(reference, probe)?;
    let scores = a
        .iter()
        .zip(&b)
        .map(|(x, y)| cka_linear(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityReport { scores })
}

/// Two-column table with right-aligned values.
pub fn aligned(header: &[&str; 2], rows: &[(String, String)]) -> String {
    let w0 = rows.iter().map(|r| r.0.chars().count()).chain([header[0].len()]).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.chars().count()).chain([header[1].len()]).max().unwrap_or(0);
    let mut out = format!("{:<w0$}  {:>w1$}\n", header[0], header[1]);
    for (a, b) in rows {
        let _ = writeln!(out, "{a:<w0$}  {b:>w1$}");
    }
    out
}
