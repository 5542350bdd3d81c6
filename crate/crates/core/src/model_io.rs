//! Weights files and run reports.
//!
//! Weights layout, all integers little-endian:
//!
//! ```text
//! magic      5 bytes  "ULSQ1"
//! version    u32
//! arch id    u16 length + UTF-8
//! tensors    u32 count
//! per tensor u16 name length + UTF-8 name, u8 ndim, ndim × u32 dims,
//!            values as f32
//! ```
//!
//! Tensors appear in the network's canonical order (conv1, fire modules,
//! conv10; weight before bias).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{count_trainable_params, ArchId, ArchSpec, Network};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, RocCurve};
use crate::training::EpochLog;

pub const MAGIC: &[u8; 5] = b"ULSQ1";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a network to the weights byte layout.
pub fn encode_weights(network: &Network<f32>) -> Vec<u8> {
    let spec = network.spec();
    let tensors = network.tensors();
    let shapes = spec.tensor_shapes();
    let mut buf = Vec::with_capacity(64 + 4 * network.param_count() + 32 * tensors.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let id = spec.id.as_str().as_bytes();
    buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, values), (_, dims)) in tensors.iter().zip(&shapes) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes the weights file and returns the number of bytes written.
pub fn save_weights(network: &Network<f32>, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = encode_weights(network);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Integrity(format!("file truncated while reading {what}")));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Parses a weights file and rebuilds the named architecture.
pub fn decode_weights(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic, not a weights file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let id_len = r.u16("architecture id length")? as usize;
    let id_str = r.string(id_len, "architecture id")?;
    let arch: ArchId = id_str
        .parse()
        .map_err(|_| Error::Format(format!("unknown architecture {id_str:?}")))?;
    let spec = ArchSpec::for_arch(arch);
    let expected = spec.tensor_shapes();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Integrity(format!(
            "{arch} has {} tensors, file declares {count}",
            expected.len()
        )));
    }
    let mut network = Network::<f32>::zeros(spec.clone())?;
    let mut total = 0usize;
    for (want_name, want_dims) in &expected {
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        if &name != want_name {
            return Err(Error::Integrity(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let ndim = r.u8("tensor rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != want_dims {
            return Err(Error::Integrity(format!(
                "tensor {name} has dims {dims:?}, {arch} expects {want_dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n, &format!("values of {name}"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        network.set_tensor(&name, &values)?;
        total += n;
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    if total != count_trainable_params(&spec) {
        return Err(Error::Integrity(format!(
            "file holds {total} parameters, {arch} has {}",
            count_trainable_params(&spec)
        )));
    }
    Ok(network)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Pipeline conventions recorded with every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineNotes {
    pub color_order: String,
    pub resize: String,
    pub interpolation: String,
    pub fill_mode: String,
    pub flip_probability: f64,
    pub bytes_per_parameter: usize,
}

impl Default for PipelineNotes {
    fn default() -> Self {
        Self {
            color_order: "rgb".into(),
            resize: "bilinear 130x130, half-pixel centers".into(),
            interpolation: "bilinear".into(),
            fill_mode: "nearest".into(),
            flip_probability: 0.5,
            bytes_per_parameter: 4,
        }
    }
}

/// Everything needed to reproduce and audit one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub arch: ArchId,
    pub seed: u64,
    pub trainable_params: usize,
    /// Resolved configuration with all defaults filled in.
    pub config: serde_json::Value,
    pub pipeline: PipelineNotes,
    pub epochs: Vec<EpochLog>,
    pub metrics: Option<MetricsReport>,
}

impl RunReport {
    pub fn new(
        arch: ArchId,
        seed: u64,
        config: &impl Serialize,
        epochs: Vec<EpochLog>,
        metrics: Option<MetricsReport>,
    ) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            arch,
            seed,
            trainable_params: count_trainable_params(&ArchSpec::for_arch(arch)),
            config: serde_json::to_value(config)?,
            pipeline: PipelineNotes::default(),
            epochs,
            metrics,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_report(report: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Appends one JSON line per epoch.
pub fn append_epoch_log(log: &EpochLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(log)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn write_loss_csv(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,mean_loss,train_acc,val_acc\n");
    for l in logs {
        let val = l.val_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", l.epoch, l.mean_loss, l.train_acc, val));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in &curve.points {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
