//! Binary checkpoints: model tensors, Adam moments, epoch counter and the
//! run configuration, all little-endian.
//!
//! Layout:
//! ```text
//! magic "CLCK" | u32 version | u32 kind_len | kind | u32 classes
//! u64 epoch | u64 adam_step | u32 config_len | config text
//! u32 tensor_count | per tensor: u32 name_len | name | u32 ndims | u32 dims... | f64 values...
//! ```
//! Adam moments are stored as tensors named `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::nn::Module;
use crate::optim::Adam;
use crate::tensor::ParamTensor;

const MAGIC: &[u8; 4] = b"CLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub classes: usize,
    pub epoch: u64,
    pub adam_step: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn named(name: &str, p: &ParamTensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        dims: p.shape().to_vec(),
        values: p.values().to_vec(),
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, opt: &Adam, epoch: u64, config: &RunConfig) -> Self {
        let mut tensors = Vec::new();
        let mut shapes = Vec::new();
        model.visit("", &mut |n, p| {
            tensors.push(named(n, p));
            shapes.push(p.shape().to_vec());
        });
        for (prefix, moments) in [("adam.m", &opt.first), ("adam.v", &opt.second)] {
            for ((name, m), dims) in opt.names.iter().zip(moments).zip(&shapes) {
                tensors.push(NamedTensor {
                    name: format!("{prefix}.{name}"),
                    dims: dims.clone(),
                    values: m.clone(),
                });
            }
        }
        Checkpoint {
            kind: model.kind,
            classes: model.classes,
            epoch,
            adam_step: opt.step,
            config: config.render(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    /// Rebuilds the model and optimizer this checkpoint was captured from.
    pub fn restore(&self) -> Result<(Model, Adam, RunConfig)> {
        let cfg = self.run_config()?;
        let mut model = Model::new(self.kind, &cfg.model, self.classes, 0)?;
        load_into(&mut model, |name| self.tensor(name), true)?;
        let mut opt = Adam::new(&model, cfg.train.weight_decay, cfg.train.decoupled_decay);
        opt.step = self.adam_step;
        for (i, name) in opt.names.clone().iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut opt.first[i]), ("adam.v", &mut opt.second[i])] {
                let key = format!("{prefix}.{name}");
                let t = self
                    .tensor(&key)
                    .ok_or_else(|| Error::Precondition(format!("checkpoint lacks `{key}`")))?;
                if t.values.len() != slot.len() {
                    return Err(Error::Precondition(format!("`{key}` has the wrong size")));
                }
                slot.copy_from_slice(&t.values);
            }
        }
        Ok((model, opt, cfg))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, self.kind.as_str());
        b.extend_from_slice(&(self.classes as u32).to_le_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut b, &t.name);
            b.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let kind_name = r.string()?;
        let kind = ModelKind::parse(&kind_name).ok_or_else(|| format!("unknown model kind `{kind_name}`"))?;
        let classes = r.u32()? as usize;
        let epoch = r.u64()?;
        let adam_step = r.u64()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after tensor table".into());
        }
        Ok(Checkpoint {
            kind,
            classes,
            epoch,
            adam_step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Precondition(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

/// Copies tensors into `model` by name. With `require_all`, every model
/// tensor must be found; otherwise missing names keep their values.
pub fn load_into<'a>(
    model: &mut Model,
    lookup: impl Fn(&str) -> Option<&'a NamedTensor>,
    require_all: bool,
) -> Result<usize> {
    let mut err = None;
    let mut copied = 0;
    model.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match lookup(name) {
            Some(t) if t.dims != p.shape() => {
                err = Some(Error::Precondition(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.dims,
                    p.shape()
                )));
            }
            Some(t) => {
                p.values_mut().copy_from_slice(&t.values);
                copied += 1;
            }
            None if require_all => {
                err = Some(Error::Precondition(format!("checkpoint lacks tensor `{name}`")));
            }
            None => {}
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(copied),
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
    }
}
