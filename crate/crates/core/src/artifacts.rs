//! Files written by a training run: checkpoints, per-epoch history and the
//! final report.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::tensor::Tensor;
use crate::train::{RunHistory, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GLND1";

/// Checkpoint bytes: magic, length-prefixed JSON model config, then each
/// named tensor as name, rows, cols and little-endian `f64` values. All
/// lengths are little-endian `u32`.
pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    let header = serde_json::to_vec(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows())?;
        put_u32(&mut out, t.cols())?;
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a GLND1 checkpoint".into()));
    }
    let len = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((name, Tensor::new(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(config, Params::from_named(named)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    epoch: usize,
    train_loss: f64,
    valid_metric: f64,
    test_metric: f64,
    kl_per_layer: &'a [f64],
    supervised: f64,
    test_per_domain: &'a BTreeMap<u32, f64>,
}

/// One JSON object per epoch.
pub fn history_jsonl(history: &RunHistory) -> String {
    let mut s = String::new();
    for e in &history.epochs {
        let line = HistoryLine {
            epoch: e.epoch,
            train_loss: e.train_loss,
            valid_metric: e.valid_metric,
            test_metric: e.test_metric,
            kl_per_layer: &e.kl_per_layer,
            supervised: e.supervised,
            test_per_domain: &e.test_per_domain,
        };
        s.push_str(&serde_json::to_string(&line).expect("history serializes"));
        s.push('\n');
    }
    s
}

pub fn write_history(path: &Path, history: &RunHistory) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_jsonl(history).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Metrics of the selected epoch. Deterministic given inputs and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub metric: String,
    pub valid: f64,
    pub test: f64,
    pub test_per_domain: BTreeMap<u32, f64>,
    pub final_train_loss: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub best_epoch: usize,
    pub metrics: ReportMetrics,
    pub variant: String,
    pub config: TrainingConfig,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

impl Report {
    pub fn new(history: &RunHistory, config: &TrainingConfig, variant: &str) -> Self {
        Self {
            best_epoch: history.best_epoch,
            metrics: ReportMetrics {
                metric: history.metric.name().to_string(),
                valid: history.best_valid,
                test: history.best_test,
                test_per_domain: history.best_test_per_domain.clone(),
                final_train_loss: history.epochs.last().map_or(f64::NAN, |e| e.train_loss),
                epochs_run: history.epochs.len(),
            },
            variant: variant.to_string(),
            config: config.clone(),
            seed: config.seed,
            wall_clock_seconds: history.wall_clock_seconds,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }
}
