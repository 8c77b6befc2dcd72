//! Training harness: AdamW, early stopping on validation loss, evaluation and
//! run reports.

mod data;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    class_moments, gen_synthetic, ClassMoments, DatasetBundle, DatasetManifest, GeneratorSpec, Split,
    DATASET_MAGIC, DATASET_MANIFEST, DATASET_VERSION, SPLIT_NAMES,
};
pub use optim::{restore, snapshot, stopping_epoch, AdamW, AdamWConfig, EarlyStopper, StopSignal};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::petl::Method;

pub const PETL_LR: f64 = 1e-3;
pub const FULL_FINETUNE_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: PETL_LR,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default learning rate for `method`.
    pub fn default_lr(method: &Method) -> f64 {
        match method {
            Method::FullFinetune => FULL_FINETUNE_LR,
            _ => PETL_LR,
        }
    }

    pub fn for_method(method: &Method) -> Self {
        TrainConfig {
            lr: Self::default_lr(method),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("train.batch_size and train.max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0 and adam_eps > 0".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub shared: bool,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub trainable_params: usize,
    pub wall_seconds: f64,
}

impl RunReport {
    /// `epoch,train_loss,val_loss,val_acc` with 9 significant digits.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.epoch,
                fmt_sig9(e.train_loss),
                fmt_sig9(e.val_loss),
                fmt_sig9(e.val_acc)
            );
        }
        out
    }
}

/// `printf("%.9g")`.
pub fn fmt_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and top-1 accuracy over a split, in index order.
pub fn evaluate(model: &EncoderModel, split: &Split) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation split has no samples".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (frames, &label) in split.frames.iter().zip(&split.labels) {
        let mut g = Graph::new(&model.store);
        let logits = model.forward(&mut g, frames, None)?;
        let l = g.cross_entropy(logits, label)?;
        loss += g.value(l).item().expect("scalar loss");
        if argmax(g.value(logits).data()) == label {
            correct += 1;
        }
    }
    let m = split.len() as f64;
    Ok((loss / m, correct as f64 / m))
}

/// One optimizer step on a mini-batch; returns the summed sample losses.
fn train_batch(model: &mut EncoderModel, opt: &mut AdamW, split: &Split, batch: &[usize]) -> Result<f64> {
    let grads = {
        let mut g = Graph::new(&model.store);
        let mut total = None;
        for &i in batch {
            let logits = model.forward(&mut g, &split.frames[i], None)?;
            let l = g.cross_entropy(logits, split.labels[i])?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        let sum = g.value(total).item().expect("scalar loss");
        let mean = g.scale(total, 1.0 / batch.len() as f64)?;
        (g.backward(mean)?, sum)
    };
    opt.step(&mut model.store, &grads.0)?;
    Ok(grads.1)
}

/// Trains the model's trainable parameters with early stopping on the
/// validation loss, restores the best epoch and evaluates on the test split.
pub fn train(model: &mut EncoderModel, data: &DatasetBundle, cfg: &TrainConfig) -> Result<RunReport> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut EncoderModel,
    data: &DatasetBundle,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunReport> {
    cfg.validate()?;
    for (name, split) in SPLIT_NAMES.iter().zip([&data.train, &data.val, &data.test]) {
        if split.is_empty() {
            return Err(Error::EmptySplit(format!("{name} split has no samples")));
        }
        if split.classes != model.config.classes {
            return Err(Error::Config(format!(
                "{name} split has {} classes, model expects {}",
                split.classes, model.config.classes
            )));
        }
    }
    let start = Instant::now();
    let ids = model.trainable_ids();
    let mut opt = AdamW::new(cfg.adamw());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = snapshot(&model.store, &ids);
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            sum += train_batch(model, &mut opt, &data.train, batch)?;
        }
        let (val_loss, val_acc) = evaluate(model, &data.val)?;
        let record = EpochRecord {
            epoch,
            train_loss: sum / data.train.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&record);
        epochs.push(record);
        match stopper.observe(val_loss) {
            StopSignal::Improved => best = snapshot(&model.store, &ids),
            StopSignal::Wait => {}
            StopSignal::Stop => break,
        }
    }
    restore(&mut model.store, &best);
    let (test_loss, test_accuracy) = evaluate(model, &data.test)?;
    Ok(RunReport {
        method: model.petl_config.method.to_string(),
        shared: model.petl_config.shared,
        seed: cfg.seed,
        stop_epoch: epochs.len(),
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best(),
        epochs,
        test_loss,
        test_accuracy,
        trainable_params: model.store.count(true),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
