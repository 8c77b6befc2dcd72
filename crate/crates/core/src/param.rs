//! Named parameters: the unit of freezing, counting, checkpointing and
//! optimization.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_u32, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Present only on trainable parameters after a backward pass.
    pub grad: Option<Tensor>,
    numel: usize,
}

impl Parameter {
    /// Element count; also defined in layout-only stores.
    pub fn numel(&self) -> usize {
        self.numel
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    layout_only: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that records names and extents but allocates no values, for
    /// auditing full-size models. Values read back as empty tensors.
    pub fn layout_only() -> Self {
        ParamStore {
            layout_only: true,
            ..Self::default()
        }
    }

    pub fn is_layout_only(&self) -> bool {
        self.layout_only
    }

    /// Registers a zero-filled parameter.
    pub fn register_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.register_full(name, shape, 0.0)
    }

    /// Registers a parameter filled with ones.
    pub fn register_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.register_full(name, shape, 1.0)
    }

    fn register_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let numel = shape.iter().product();
        let tensor = if self.layout_only {
            Tensor::zeros(&[0])
        } else {
            Tensor::full(shape, value)
        };
        self.insert(name.into(), tensor, numel)
    }

    /// Registers a new trainable parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let numel = value.numel();
        self.insert(name.into(), value, numel)
    }

    fn insert(&mut self, name: String, value: Tensor, numel: usize) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
            grad: None,
            numel,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Sets the trainable flag. Freezing drops any gradient buffer.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for i in 0..self.params.len() {
            self.set_trainable(ParamId(i), trainable);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale · grad` into each trainable parameter's gradient buffer,
    /// in parameter order.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let buf = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (dst, src) in buf.data_mut().iter_mut().zip(g.data()) {
                *dst += scale * src;
            }
        }
    }

    pub fn count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.numel)
            .sum()
    }

    /// Writes every parameter as a named-tensor archive: magic `TARC`,
    /// u32 version, u32 entry count, then per entry a u32 name length, the
    /// UTF-8 name and a `TNSR` tensor blob.
    pub fn write_archive(&self, path: &Path) -> Result<()> {
        if self.layout_only {
            return Err(Error::Config("a layout-only store has no values to write".into()));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(ARCHIVE_MAGIC).map_err(io)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())
            .map_err(io)?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(p.name.as_bytes()).map_err(io)?;
            p.value.write_to(&mut w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Loads archive values into the registered parameters of the same
    /// names. Every registered parameter must be present with a matching
    /// shape.
    pub fn load_archive(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = read_archive(&mut BufReader::new(file))?;
        let mut seen = 0;
        for (name, tensor) in entries {
            let id = self.id(&name).ok_or_else(|| {
                Error::Architecture(format!("checkpoint has unknown parameter {name}"))
            })?;
            let current = self.value(id);
            if current.shape() != tensor.shape() {
                return Err(Error::Architecture(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    current.shape()
                )));
            }
            self.params[id.0].value = tensor;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Architecture(format!(
                "checkpoint holds {seen} parameters, model has {}",
                self.params.len()
            )));
        }
        Ok(())
    }
}

pub const ARCHIVE_MAGIC: &[u8; 4] = b"TARC";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "archive magic")?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Magic {
            expected: String::from_utf8_lossy(ARCHIVE_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(r, "archive version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Version {
            expected: ARCHIVE_VERSION,
            found: version,
        });
    }
    let count = read_u32(r, "archive entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r, "archive name length")? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, "archive name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        out.push((name, Tensor::read_from(r)?));
    }
    Ok(out)
}
