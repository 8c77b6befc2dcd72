//! Datasets: the synthetic zero-mean mixture generator and the `PTDS` split
//! file format.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_f64s, read_u32, read_u64, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"PTDS";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.json";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// One split: `M` sequences of shape `N×F` with labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub classes: usize,
    pub seq_len: usize,
    pub features: usize,
    pub frames: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(classes: usize, seq_len: usize, features: usize) -> Self {
        Split {
            classes,
            seq_len,
            features,
            frames: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, frames: Tensor, label: usize) -> Result<()> {
        if frames.shape() != [self.seq_len, self.features] {
            return Err(Error::shape("split_push", frames.shape(), &[self.seq_len, self.features]));
        }
        if label >= self.classes {
            return Err(Error::LabelRange {
                label,
                classes: self.classes,
            });
        }
        self.frames.push(frames);
        self.labels.push(label);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        for v in [self.len(), self.seq_len, self.features] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        for f in &self.frames {
            for v in f.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Split> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "dataset magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Magic {
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(r, "dataset version")?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let classes = read_u32(r, "dataset class count")? as usize;
        let m = read_u64(r, "dataset sample count")? as usize;
        let n = read_u64(r, "dataset sequence length")? as usize;
        let f = read_u64(r, "dataset feature count")? as usize;
        if n == 0 || f == 0 || classes == 0 {
            return Err(Error::Format(format!("degenerate dataset header C={classes} N={n} F={f}")));
        }
        let mut labels = Vec::with_capacity(m.min(1 << 20));
        for _ in 0..m {
            let l = read_u32(r, "dataset labels")? as usize;
            if l >= classes {
                return Err(Error::LabelRange { label: l, classes });
            }
            labels.push(l);
        }
        let mut split = Split::new(classes, n, f);
        for label in labels {
            let data = read_f64s(r, n * f, "dataset frames")?;
            split.push(Tensor::new(vec![n, f], data)?, label)?;
        }
        Ok(split)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Split> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Split::read_from(&mut BufReader::new(file))
    }

    /// Per-class count of samples.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Synthetic dataset parameters. Class `c` draws every frame value from the
/// equal-weight mixture `±δ_c + N(0, σ²)` with `δ_c = delta_base + c·delta_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seq_len: usize,
    pub features: usize,
    pub delta_base: f64,
    pub delta_step: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            classes: 4,
            train_per_class: 200,
            val_per_class: 100,
            test_per_class: 100,
            seq_len: 32,
            features: 16,
            delta_base: 0.5,
            delta_step: 0.5,
            sigma: 0.2,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.seq_len == 0 || self.features == 0 {
            return Err(Error::Config("seq_len and features must be positive".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("every split needs at least one sample per class".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        if !(self.delta_base.is_finite() && self.delta_step.is_finite()) {
            return Err(Error::Config("delta parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn delta(&self, class: usize) -> f64 {
        self.delta_base + class as f64 * self.delta_step
    }
}

/// Per-class moments measured at generation time over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub class: usize,
    pub delta: f64,
    pub values: usize,
    pub mean: f64,
    /// `3·sqrt(δ² + σ²)/sqrt(values)`.
    pub mean_bound: f64,
    pub second_moment: f64,
    pub expected_second_moment: f64,
    /// Standard error of the second moment, `sqrt(Var(x²)/values)`.
    pub second_moment_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: Option<GeneratorSpec>,
    pub classes: usize,
    pub seq_len: usize,
    pub features: usize,
    pub split_sizes: [usize; 3],
    #[serde(default)]
    pub moments: Vec<ClassMoments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub manifest: DatasetManifest,
}

impl DatasetBundle {
    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }

    /// Writes `train.ptds`, `val.ptds`, `test.ptds` and `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in SPLIT_NAMES.iter().zip([&self.train, &self.val, &self.test]) {
            split.write_file(&dir.join(format!("{name}.ptds")))?;
        }
        let path = dir.join(DATASET_MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let read = |name: &str| Split::read_file(&dir.join(format!("{name}.ptds")));
        let bundle = DatasetBundle {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
            manifest,
        };
        for s in [&bundle.train, &bundle.val, &bundle.test] {
            if (s.classes, s.seq_len, s.features)
                != (bundle.manifest.classes, bundle.manifest.seq_len, bundle.manifest.features)
            {
                return Err(Error::Format(format!(
                    "split header (C={}, N={}, F={}) disagrees with the manifest",
                    s.classes, s.seq_len, s.features
                )));
            }
        }
        Ok(bundle)
    }
}

/// Generates train/val/test splits. Sample order within each split is a
/// seeded shuffle of the class-ordered draws.
pub fn gen_synthetic(spec: &GeneratorSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (n, f) = (spec.seq_len, spec.features);
    let mut make = |per_class: usize| -> Result<Split> {
        let mut samples = Vec::with_capacity(per_class * spec.classes);
        for c in 0..spec.classes {
            let delta = spec.delta(c);
            for _ in 0..per_class {
                let data: Vec<f64> = (0..n * f)
                    .map(|_| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        sign * delta + noise.sample(&mut rng)
                    })
                    .collect();
                samples.push((Tensor::new(vec![n, f], data)?, c));
            }
        }
        samples.shuffle(&mut rng);
        let mut split = Split::new(spec.classes, n, f);
        for (t, c) in samples {
            split.push(t, c)?;
        }
        Ok(split)
    };
    let train = make(spec.train_per_class)?;
    let val = make(spec.val_per_class)?;
    let test = make(spec.test_per_class)?;
    let moments = class_moments(&train, spec);
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        generator: Some(spec.clone()),
        classes: spec.classes,
        seq_len: n,
        features: f,
        split_sizes: [train.len(), val.len(), test.len()],
        moments,
    };
    Ok(DatasetBundle {
        train,
        val,
        test,
        manifest,
    })
}

/// Empirical mean and second moment per class with their sampling bounds.
pub fn class_moments(split: &Split, spec: &GeneratorSpec) -> Vec<ClassMoments> {
    (0..split.classes)
        .map(|c| {
            let mut count = 0usize;
            let (mut s1, mut s2) = (0.0, 0.0);
            for (t, _) in split.frames.iter().zip(&split.labels).filter(|(_, &l)| l == c) {
                for &v in t.data() {
                    s1 += v;
                    s2 += v * v;
                    count += 1;
                }
            }
            let delta = spec.delta(c);
            let sig2 = spec.sigma * spec.sigma;
            let var = delta * delta + sig2;
            // x = ±δ + ε: E[x⁴] = δ⁴ + 6δ²σ² + 3σ⁴
            let fourth = delta.powi(4) + 6.0 * delta * delta * sig2 + 3.0 * sig2 * sig2;
            let m = count.max(1) as f64;
            ClassMoments {
                class: c,
                delta,
                values: count,
                mean: s1 / m,
                mean_bound: 3.0 * var.sqrt() / m.sqrt(),
                second_moment: s2 / m,
                expected_second_moment: var,
                second_moment_se: ((fourth - var * var) / m).sqrt(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorSpec {
        GeneratorSpec {
            classes: 3,
            train_per_class: 20,
            val_per_class: 5,
            test_per_class: 5,
            seq_len: 8,
            features: 4,
            seed: 3,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn split_round_trip_is_bit_identical() {
        let b = gen_synthetic(&tiny()).unwrap();
        let mut bytes = Vec::new();
        b.train.write_to(&mut bytes).unwrap();
        let back = Split::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, b.train);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 24 + 60 * 4 + 60 * 32 * 8);
    }

    #[test]
    fn truncation_magic_and_labels_are_distinct_errors() {
        let b = gen_synthetic(&tiny()).unwrap();
        let mut bytes = Vec::new();
        b.val.write_to(&mut bytes).unwrap();
        for cut in [3, 20, 40, bytes.len() - 1] {
            assert!(matches!(Split::read_from(&mut &bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match Split::read_from(&mut bad.as_slice()) {
            Err(Error::Magic { expected, .. }) => assert_eq!(expected, "PTDS"),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Split::read_from(&mut bad.as_slice()), Err(Error::Version { found: 9, .. })));
        let mut bad = bytes.clone();
        bad[36..40].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Split::read_from(&mut bad.as_slice()),
            Err(Error::LabelRange { label: 7, classes: 3 })
        ));
    }

    #[test]
    fn fixed_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&tiny()).unwrap().write_dir(a.path()).unwrap();
        gen_synthetic(&tiny()).unwrap().write_dir(b.path()).unwrap();
        for name in ["train.ptds", "val.ptds", "test.ptds", "manifest.json"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let back = DatasetBundle::read_dir(a.path()).unwrap();
        assert_eq!(back, gen_synthetic(&tiny()).unwrap());
        assert_eq!(back.manifest.generator.unwrap(), tiny());
    }

    #[test]
    fn balanced_disjoint_splits() {
        let b = gen_synthetic(&tiny()).unwrap();
        assert_eq!(b.train.class_counts(), vec![20; 3]);
        assert_eq!(b.val.class_counts(), vec![5; 3]);
        assert_eq!(b.manifest.split_sizes, [60, 15, 15]);
        for t in &b.test.frames {
            assert!(!b.train.frames.contains(t));
        }
    }

    #[test]
    fn class_means_vanish_and_second_moments_separate() {
        let b = gen_synthetic(&GeneratorSpec::default()).unwrap();
        let m = &b.manifest.moments;
        assert_eq!(m.len(), 4);
        for c in m {
            assert!(c.mean.abs() <= c.mean_bound, "{c:?}");
            assert!((c.second_moment - c.expected_second_moment).abs() < 4.0 * c.second_moment_se, "{c:?}");
        }
        for w in m.windows(2) {
            let gap = w[1].second_moment - w[0].second_moment;
            assert!(gap > 4.0 * (w[0].second_moment_se + w[1].second_moment_se));
        }
        assert!((m[0].expected_second_moment - 0.29).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        let one = GeneratorSpec {
            classes: 1,
            ..tiny()
        };
        assert!(matches!(gen_synthetic(&one), Err(Error::Config(_))));
        let neg = GeneratorSpec {
            sigma: -1.0,
            ..tiny()
        };
        assert!(gen_synthetic(&neg).is_err());
        let b = gen_synthetic(&tiny()).unwrap();
        assert!(b.split("holdout").is_err());
    }
}
