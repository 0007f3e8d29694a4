//! `DCK1` checkpoint container.
//!
//! Layout: magic `DCK1`, u32 tensor count, then per tensor a u16 name
//! length, the ASCII name, a u8 rank, `rank` u32 dims and the f32 payload
//! (all little-endian). Besides the parameters a checkpoint carries the
//! batch-norm running statistics, a `meta.input` tensor holding `[C, P]`
//! and, optionally, Adam moments (`adam.m.*`, `adam.v.*`) plus `adam.step`
//! whose two payload words are the raw low and high halves of the u64 step.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{BnStats, Model, ModelConfig, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCK1";

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Adam first and second moments with the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl AdamMoments {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            step: 0,
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamMoments>,
}

/// Parameter groups found in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Census {
    pub conv: usize,
    pub batch_norm: usize,
    pub linear: usize,
}

pub fn write_tensors(records: &[TensorRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io_at(path, e));
    put(&CHECKPOINT_MAGIC)?;
    put(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        if !r.name.is_ascii() || r.name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("tensor name {:?} is not short ASCII", r.name)));
        }
        if r.dims.len() > u8::MAX as usize || r.numel() != r.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has dims {:?} but {} values",
                r.name,
                r.dims,
                r.data.len()
            )));
        }
        put(&(r.name.len() as u16).to_le_bytes())?;
        put(r.name.as_bytes())?;
        put(&[r.dims.len() as u8])?;
        for d in &r.dims {
            put(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * r.data.len());
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io_at(path, e))?;
    let mut found = [0u8; 4];
    let n = bytes.len().min(4);
    found[..n].copy_from_slice(&bytes[..n]);
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4 };
    let count = cur.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| Error::Config("tensor name is not ASCII".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::DimensionOverflow(format!("tensor {name} dims {dims:?}")))?;
        let data = cur
            .take(numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(TensorRecord { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Config(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

fn param_records(cfg: &ModelConfig, params: &Params<f32>, prefix: &str) -> Vec<TensorRecord> {
    Params::<f32>::specs(cfg)
        .into_iter()
        .zip(params.tensors())
        .map(|((name, dims), t)| TensorRecord::new(format!("{prefix}{name}"), &dims, t.to_vec()))
        .collect()
}

/// Serializes a model (and optionally its optimizer state) to records.
pub fn to_records(model: &Model<f32>, optimizer: Option<&AdamMoments>) -> Vec<TensorRecord> {
    let cfg = &model.config;
    let mut out = vec![TensorRecord::new(
        "meta.input",
        &[2],
        vec![cfg.channels as f32, cfg.patch_size as f32],
    )];
    let mut params = param_records(cfg, &model.params, "");
    // running statistics sit right after their block's bn.bias
    for (i, rs) in model.running.iter().enumerate().rev() {
        let at = 4 * i + 4;
        let c = rs.mean.len();
        params.insert(at, TensorRecord::new(format!("block{}.bn.running_var", i + 1), &[c], rs.var.clone()));
        params.insert(at, TensorRecord::new(format!("block{}.bn.running_mean", i + 1), &[c], rs.mean.clone()));
    }
    out.extend(params);
    if let Some(opt) = optimizer {
        let step = [opt.step as u32, (opt.step >> 32) as u32].map(f32::from_bits);
        out.push(TensorRecord::new("adam.step", &[2], step.to_vec()));
        out.extend(param_records(cfg, &opt.m, "adam.m."));
        out.extend(param_records(cfg, &opt.v, "adam.v."));
    }
    out
}

fn infer_config(map: &HashMap<&str, &TensorRecord>) -> Result<ModelConfig> {
    let meta = map
        .get("meta.input")
        .ok_or_else(|| Error::ShapeMismatch("checkpoint lacks meta.input".into()))?;
    if meta.data.len() != 2 {
        return Err(Error::ShapeMismatch("meta.input must hold [C, P]".into()));
    }
    let mut filters = [0usize; 3];
    for (i, f) in filters.iter_mut().enumerate() {
        let name = format!("block{}.conv.bias", i + 1);
        let t = map
            .get(name.as_str())
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks {name}")))?;
        *f = t.data.len();
    }
    let cfg = ModelConfig {
        channels: meta.data[0] as usize,
        patch_size: meta.data[1] as usize,
        filters,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn fill_params(
    cfg: &ModelConfig,
    map: &HashMap<&str, &TensorRecord>,
    prefix: &str,
) -> Result<Params<f32>> {
    let mut params = Params::<f32>::zeros(cfg);
    for ((name, dims), dst) in Params::<f32>::specs(cfg).into_iter().zip(params.tensors_mut()) {
        let full = format!("{prefix}{name}");
        let t = take(map, &full, &dims)?;
        dst.copy_from_slice(&t.data);
    }
    Ok(params)
}

fn take<'a>(map: &HashMap<&str, &'a TensorRecord>, name: &str, dims: &[usize]) -> Result<&'a TensorRecord> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks tensor {name}")))?;
    let want: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
    if t.dims != want {
        return Err(Error::ShapeMismatch(format!(
            "tensor {name} has shape {:?}, architecture expects {want:?}",
            t.dims
        )));
    }
    Ok(t)
}

/// Rebuilds a checkpoint from records. With `expect` set, every tensor must
/// match that architecture.
pub fn from_records(records: &[TensorRecord], expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let map: HashMap<&str, &TensorRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    if map.len() != records.len() {
        return Err(Error::Config("duplicate tensor names in checkpoint".into()));
    }
    let stored = infer_config(&map)?;
    let cfg = match expect {
        Some(e) if *e != stored => {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {stored:?}, expected {e:?}"
            )))
        }
        Some(e) => *e,
        None => stored,
    };
    let params = fill_params(&cfg, &map, "")?;
    let mut running = Vec::with_capacity(3);
    for (i, &c) in cfg.filters.iter().enumerate() {
        let b = i + 1;
        let mean = take(&map, &format!("block{b}.bn.running_mean"), &[c])?.data.clone();
        let var = take(&map, &format!("block{b}.bn.running_var"), &[c])?.data.clone();
        running.push(BnStats { mean, var });
    }
    let running: [BnStats<f32>; 3] = running.try_into().expect("three blocks");
    let optimizer = match map.get("adam.step") {
        None => None,
        Some(_) => {
            let step = take(&map, "adam.step", &[2])?;
            let [lo, hi] = [step.data[0].to_bits(), step.data[1].to_bits()];
            Some(AdamMoments {
                step: u64::from(lo) | (u64::from(hi) << 32),
                m: fill_params(&cfg, &map, "adam.m.")?,
                v: fill_params(&cfg, &map, "adam.v.")?,
            })
        }
    };
    Ok(Checkpoint {
        model: Model {
            config: cfg,
            params,
            running,
        },
        optimizer,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    optimizer: Option<&AdamMoments>,
) -> Result<()> {
    write_tensors(&to_records(model, optimizer), path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_records(&read_tensors(path)?, None)
}

/// Loads a checkpoint that must match `config` exactly.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Checkpoint> {
    from_records(&read_tensors(path)?, Some(config))
}

/// Counts parameter groups: convolutions, batch norms and linear layers.
pub fn census(records: &[TensorRecord]) -> Census {
    let mut c = Census::default();
    for r in records {
        match r.name.as_str() {
            n if n.starts_with("block") && n.ends_with(".conv.weight") => c.conv += 1,
            n if n.starts_with("block") && n.ends_with(".bn.weight") => c.batch_norm += 1,
            "head.weight" => c.linear += 1,
            _ => {}
        }
    }
    c
}

/// Human-readable tensor listing plus the group census.
pub fn describe(records: &[TensorRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let dims: Vec<String> = r.dims.iter().map(u32::to_string).collect();
        s.push_str(&format!("{:<28} [{}]\n", r.name, dims.join(" x ")));
    }
    let c = census(records);
    s.push_str(&format!(
        "groups: {} conv, {} batch-norm, {} linear\n",
        c.conv, c.batch_norm, c.linear
    ));
    s
}
