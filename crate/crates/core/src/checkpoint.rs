//! Binary checkpoint format.
//!
//! ```text
//! "GASF"  u32 version  u32 len + model config (canonical JSON)
//! repeated until EOF:
//!   u32 len + tensor name   u8 dtype   u8 rank   rank × u32 dims   payload
//! ```
//!
//! All integers and payload elements are little-endian. Parameters are
//! stored under their dotted names. Training state uses reserved names:
//! `meta.iteration` and `optim.step` (rank-0 f64), and `optim.m.<param>` /
//! `optim.v.<param>` for the AdamW moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{DType, Element, Tensor};
use crate::training::OptimState;

pub const MAGIC: &[u8; 4] = b"GASF";
pub const VERSION: u32 = 1;
pub const CLASSIFIER_PREFIX: &str = "decoder.classifier.";

const ITERATION: &str = "meta.iteration";
const OPTIM_STEP: &str = "optim.step";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub model: Model<f32>,
    pub iteration: Option<u64>,
    /// Present only when saved and the parameter layout was loaded unchanged.
    pub optimizer: Option<OptimState>,
    /// True when the classifier was freshly initialized for a new class count.
    pub head_reinitialized: bool,
}

/// How to reconcile the stored model with the caller's expectations.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Target configuration; `None` rebuilds exactly the stored model.
    pub config: Option<ModelConfig>,
    /// Allow a class-count mismatch by reinitializing the classifier.
    pub reinit_head: bool,
    /// Seed for the reinitialized classifier.
    pub seed: u64,
}

fn push_tensor<T: Element>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>, dtype: DType) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype.tag());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
}

/// Serializes a model plus optional training state into checkpoint bytes.
pub fn encode(model: &Model<f32>, iteration: Option<u64>, optimizer: Option<&OptimState>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_json();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    for (_, p) in model.params.iter() {
        push_tensor(&mut buf, &p.name, &p.value, DType::F32);
    }
    if let Some(it) = iteration {
        push_tensor(&mut buf, ITERATION, &Tensor::<f64>::scalar(it as f64), DType::F64);
    }
    if let Some(opt) = optimizer {
        if opt.first.len() != model.params.len() || opt.second.len() != model.params.len() {
            return Err(Error::Input("optimizer state does not match the model parameters".into()));
        }
        push_tensor(&mut buf, OPTIM_STEP, &Tensor::<f64>::scalar(opt.step as f64), DType::F64);
        for ((_, p), (m, v)) in model.params.iter().zip(opt.first.iter().zip(&opt.second)) {
            push_tensor(&mut buf, &format!("{OPTIM_M}{}", p.name), m, DType::F32);
            push_tensor(&mut buf, &format!("{OPTIM_V}{}", p.name), v, DType::F32);
        }
    }
    Ok(buf)
}

/// Writes a checkpoint via a temporary file and rename, so readers never see
/// a half-written file.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, iteration: Option<u64>, optimizer: Option<&OptimState>) -> Result<()> {
    let bytes = encode(model, iteration, optimizer)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_record(r: &mut Reader<'_>) -> Result<Record> {
    let len = r.u32("name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
        .to_string();
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} for `{name}`")))?;
    let rank = r.u8("rank")? as usize;
    let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&c| c > 0)
        .ok_or_else(|| Error::Format(format!("invalid shape {shape:?} for `{name}`")))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let bytes_len = count
        .checked_mul(width)
        .ok_or_else(|| Error::Format(format!("payload of `{name}` overflows")))?;
    let payload = r.take(bytes_len, &format!("payload of `{name}`"))?;
    let values = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Record { name, shape, values })
}

fn scalar_u64(rec: &Record) -> Result<u64> {
    match (rec.shape.as_slice(), rec.values.as_slice()) {
        ([], [v]) if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u64),
        _ => Err(Error::Format(format!("`{}` must be a non-negative integer scalar", rec.name))),
    }
}

/// Parses checkpoint bytes. Nothing is returned unless the whole file is
/// well formed and consistent with the requested configuration.
pub fn decode(bytes: &[u8], opts: &LoadOptions) -> Result<Loaded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic bytes; not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let stored: ModelConfig =
        serde_json::from_str(cfg_text).map_err(|e| Error::Format(format!("config block: {e}")))?;

    let mut records = Vec::new();
    while !r.at_end() {
        records.push(read_record(&mut r)?);
    }

    let target = opts.config.clone().unwrap_or_else(|| stored.clone());
    let class_change = target.num_classes != stored.num_classes;
    if class_change && !opts.reinit_head {
        return Err(Error::config(
            "num_classes",
            format!(
                "checkpoint has {} classes, target has {}; enable head reinitialization to transfer",
                stored.num_classes, target.num_classes
            ),
        ));
    }
    let mut model = Model::<f32>::build(&target, opts.seed)?;
    let mut seen = vec![false; model.params.len()];
    let mut iteration = None;
    let mut step = None;
    let mut first: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
    let mut second: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];

    let mut names = std::collections::HashSet::new();
    for rec in records {
        if !names.insert(rec.name.clone()) {
            return Err(Error::Format(format!("duplicate tensor `{}`", rec.name)));
        }
        if rec.name == ITERATION {
            iteration = Some(scalar_u64(&rec)?);
            continue;
        }
        if rec.name == OPTIM_STEP {
            step = Some(scalar_u64(&rec)?);
            continue;
        }
        let (slot, pname) = if let Some(p) = rec.name.strip_prefix(OPTIM_M) {
            (Some(&mut first), p)
        } else if let Some(p) = rec.name.strip_prefix(OPTIM_V) {
            (Some(&mut second), p)
        } else {
            (None, rec.name.as_str())
        };
        let is_head = pname.starts_with(CLASSIFIER_PREFIX);
        let Some(id) = model.params.find(pname) else {
            if is_head && class_change {
                continue;
            }
            return Err(Error::Format(format!("unexpected tensor `{}`", rec.name)));
        };
        let expected = model.params.get(id).value.shape().to_vec();
        if class_change && is_head {
            continue;
        }
        if rec.shape != expected {
            return Err(Error::config(
                rec.name.clone(),
                format!("stored shape {:?} does not match model shape {expected:?}", rec.shape),
            ));
        }
        let t: Tensor<f32> = Tensor::new(rec.shape, rec.values.iter().map(|&v| v as f32).collect())?;
        match slot {
            Some(s) => s[id.index()] = Some(t),
            None => {
                seen[id.index()] = true;
                *model.params.value_mut(id) = t;
            }
        }
    }
    for ((_, p), &ok) in model.params.iter().zip(&seen) {
        if !ok && !(class_change && p.name.starts_with(CLASSIFIER_PREFIX)) {
            return Err(Error::Format(format!("missing tensor `{}`", p.name)));
        }
    }
    let optimizer = match step {
        Some(step) if !class_change => {
            let first: Option<Vec<_>> = first.into_iter().collect();
            let second: Option<Vec<_>> = second.into_iter().collect();
            match (first, second) {
                (Some(first), Some(second)) => Some(OptimState { step, first, second }),
                _ => return Err(Error::Format("incomplete optimizer state".into())),
            }
        }
        _ => None,
    };
    Ok(Loaded {
        model,
        iteration,
        optimizer,
        head_reinitialized: class_change,
    })
}

pub fn load_checkpoint(path: &Path, opts: &LoadOptions) -> Result<Loaded> {
    let bytes = fs::read(path)?;
    decode(&bytes, opts)
}
