//! Checkpoints: a `PSOLTNSR` file of named parameter records plus a JSON
//! sidecar at `<path>.json`.
//!
//! Every record is stored as `rows x cols x 1` (a matrix, depth one), which
//! keeps the depth uniform across records of different shapes.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{ClassifierParams, Param, RegressorParams};
use super::train::LossRecord;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor_file, write_tensor_file, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Regressor,
    Classifier,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub regressor: Option<RegressorParams>,
    pub classifier: Option<ClassifierParams>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

const MOMENTUM_SUFFIX: &str = ":momentum";

fn push_param(out: &mut Vec<FeatureMap>, name: &str, rows: usize, cols: usize, p: &Param) {
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    out.push(FeatureMap {
        image_id: name.to_string(),
        h: rows,
        w: cols,
        d: 1,
        values: to_f32(&p.value),
    });
    out.push(FeatureMap {
        image_id: format!("{name}{MOMENTUM_SUFFIX}"),
        h: rows,
        w: cols,
        d: 1,
        values: to_f32(&p.buf),
    });
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut records = Vec::new();
    if let Some(r) = &ckpt.regressor {
        push_param(&mut records, "W1", r.hidden, r.d, &r.w1);
        push_param(&mut records, "b1", 1, r.hidden, &r.b1);
        push_param(&mut records, "W2", 4, r.hidden, &r.w2);
        push_param(&mut records, "b2", 1, 4, &r.b2);
    }
    if let Some(c) = &ckpt.classifier {
        push_param(&mut records, "Wc", c.classes, c.d, &c.wc);
        push_param(&mut records, "bc", 1, c.classes, &c.bc);
    }
    write_tensor_file(&records, path)?;

    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&ckpt.meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
}

fn take_param(records: &mut HashMap<String, FeatureMap>, name: &str, rows: usize, cols: usize) -> Result<Param> {
    let mut get = |key: String| -> Result<Vec<f64>> {
        let rec = records
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record {key:?}")))?;
        if (rec.h, rec.w, rec.d) != (rows, cols, 1) {
            return Err(Error::Format(format!(
                "checkpoint record {key:?} is {}x{}x{}, expected {rows}x{cols}x1",
                rec.h, rec.w, rec.d
            )));
        }
        Ok(rec.values.iter().map(|&x| x as f64).collect())
    };
    Ok(Param {
        value: get(name.to_string())?,
        buf: get(format!("{name}{MOMENTUM_SUFFIX}"))?,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint sidecar: {e}")))?;
    let mut records: HashMap<String, FeatureMap> = read_tensor_file(path)?
        .into_iter()
        .map(|r| (r.image_id.clone(), r))
        .collect();

    let d = meta.d;
    let regressor = match meta.kind {
        CheckpointKind::Regressor | CheckpointKind::Joint => {
            let m = meta
                .hidden
                .ok_or_else(|| Error::Format("regressor checkpoint without hidden width".into()))?;
            let p = RegressorParams {
                d,
                hidden: m,
                w1: take_param(&mut records, "W1", m, d)?,
                b1: take_param(&mut records, "b1", 1, m)?,
                w2: take_param(&mut records, "W2", 4, m)?,
                b2: take_param(&mut records, "b2", 1, 4)?,
            };
            p.validate()?;
            Some(p)
        }
        CheckpointKind::Classifier => None,
    };
    let classifier = match meta.kind {
        CheckpointKind::Classifier | CheckpointKind::Joint => {
            let c = meta
                .classes
                .ok_or_else(|| Error::Format("classifier checkpoint without class count".into()))?;
            let p = ClassifierParams {
                d,
                classes: c,
                wc: take_param(&mut records, "Wc", c, d)?,
                bc: take_param(&mut records, "bc", 1, c)?,
            };
            p.validate()?;
            Some(p)
        }
        CheckpointKind::Regressor => None,
    };
    if let Some(extra) = records.keys().min() {
        return Err(Error::Format(format!("unexpected checkpoint record {extra:?}")));
    }
    Ok(Checkpoint {
        meta,
        regressor,
        classifier,
    })
}

/// CSV with header `epoch,split,loss`.
pub fn write_loss_log(log: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "epoch,split,loss").unwrap();
    for r in log {
        writeln!(out, "{},{},{}", r.epoch, r.split, r.loss).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
