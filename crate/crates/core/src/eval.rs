//! IoU and the GT-Known / Top-1 / Top-5 localization metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BoxXYWH;
use crate::boxreg::{predict_boxes, RegressorParams};
use crate::error::{Error, Result};
use crate::tensor_io::{read_json_lines, write_json_lines, ClassifierOutputs, ImageRecord, PooledFeature, Split};

/// IoU at or above this counts as a correct localization.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoxXYWH,
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    write_json_lines(preds, path)
}

/// Reads `{image_id, box}` lines; extra fields (such as a pseudo box
/// `source`) are ignored, so pseudo-annotation files can be scored directly.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    read_json_lines(path)
}

/// Intersection over union in continuous coordinates.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn gt_known(pred: &BoxXYWH, gt: &BoxXYWH) -> bool {
    iou(pred, gt) >= IOU_THRESHOLD
}

pub fn top1_correct(scores: &ClassifierOutputs, gt_label: usize, pred: &BoxXYWH, gt: &BoxXYWH) -> bool {
    scores.argmax() == gt_label && gt_known(pred, gt)
}

/// With one box per image this is "label in the top five and box correct".
pub fn top5_correct(scores: &ClassifierOutputs, gt_label: usize, pred: &BoxXYWH, gt: &BoxXYWH) -> bool {
    gt_label < scores.num_classes() && scores.rank_of(gt_label) <= 5 && gt_known(pred, gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub image_id: String,
    pub iou: f64,
    /// 1-based rank of the true class; absent without scores.
    pub cls_rank_of_gt: Option<usize>,
    pub gt_known: bool,
    pub top1: Option<bool>,
    pub top5: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Images of the split without a ground-truth box.
    pub skipped_no_gt: usize,
    pub gt_known_loc: f64,
    pub top1_loc: Option<f64>,
    pub top5_loc: Option<f64>,
    pub top1_cls: Option<f64>,
    pub top5_cls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_checksum: Option<String>,
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    /// `top1_loc <= top5_loc <= gt_known_loc`, all in `[0, 1]`.
    pub fn metric_chain_holds(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.gt_known_loc) {
            return false;
        }
        match (self.top1_loc, self.top5_loc) {
            (Some(t1), Some(t5)) => in_unit(t1) && t1 <= t5 && t5 <= self.gt_known_loc,
            (None, None) => true,
            _ => false,
        }
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "skipped_no_gt": self.skipped_no_gt,
            "gt_known_loc": self.gt_known_loc,
            "top1_loc": self.top1_loc,
            "top5_loc": self.top5_loc,
            "top1_cls": self.top1_cls,
            "top5_cls": self.top5_cls,
            "params_checksum": self.params_checksum,
        })
    }

    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let rows = [
            ("images", self.n.to_string()),
            ("skipped (no gt box)", self.skipped_no_gt.to_string()),
            ("GT-Known Loc (%)", pct(Some(self.gt_known_loc))),
            ("Top-1 Loc (%)", pct(self.top1_loc)),
            ("Top-5 Loc (%)", pct(self.top5_loc)),
            ("Top-1 Cls (%)", pct(self.top1_cls)),
            ("Top-5 Cls (%)", pct(self.top5_cls)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<width$}  {v:>8}").unwrap();
        }
        out
    }

    /// `image_id,iou,cls_rank_of_gt,gt_known,top1,top5`.
    pub fn verdicts_csv(&self) -> String {
        let opt = |v: Option<bool>| v.map_or_else(String::new, |b| b.to_string());
        let mut out = String::from("image_id,iou,cls_rank_of_gt,gt_known,top1,top5\n");
        for v in &self.verdicts {
            writeln!(
                out,
                "{},{:.6},{},{},{},{}",
                v.image_id,
                v.iou,
                v.cls_rank_of_gt.map_or_else(String::new, |r| r.to_string()),
                v.gt_known,
                opt(v.top1),
                opt(v.top5)
            )
            .unwrap();
        }
        out
    }
}

/// Scores every `split` image that has a ground-truth box. Verdicts follow
/// manifest order, so the result does not depend on the order of
/// `predictions` or `scores`.
pub fn evaluate_run(
    predictions: &[Prediction],
    scores: Option<&[ClassifierOutputs]>,
    manifest: &[ImageRecord],
    split: Split,
) -> Result<EvalReport> {
    let known: HashMap<&str, &ImageRecord> = manifest.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut pred_by_id: HashMap<&str, &BoxXYWH> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !known.contains_key(p.image_id.as_str()) {
            return Err(Error::UnknownId(p.image_id.clone()));
        }
        if pred_by_id.insert(p.image_id.as_str(), &p.bbox).is_some() {
            return Err(Error::DuplicateId(p.image_id.clone()));
        }
    }
    let score_by_id: Option<HashMap<&str, &ClassifierOutputs>> = match scores {
        Some(rows) => {
            let mut m = HashMap::with_capacity(rows.len());
            for s in rows {
                if !known.contains_key(s.image_id.as_str()) {
                    return Err(Error::UnknownId(s.image_id.clone()));
                }
                m.insert(s.image_id.as_str(), s);
            }
            Some(m)
        }
        None => None,
    };

    let mut verdicts = Vec::new();
    let mut skipped = 0;
    for rec in manifest.iter().filter(|r| r.split == split) {
        let Some(gt) = &rec.gt_box else {
            skipped += 1;
            continue;
        };
        let pred = pred_by_id.get(rec.image_id.as_str()).ok_or_else(|| Error::Missing {
            what: "prediction",
            image_id: rec.image_id.clone(),
        })?;
        let overlap = iou(pred, gt);
        let loc_ok = overlap >= IOU_THRESHOLD;
        let label = rec.class_label as usize;
        let (rank, top1, top5) = match &score_by_id {
            Some(m) => {
                let s = m.get(rec.image_id.as_str()).ok_or_else(|| Error::Missing {
                    what: "classifier scores",
                    image_id: rec.image_id.clone(),
                })?;
                if label >= s.num_classes() {
                    return Err(Error::Validation(format!(
                        "image {:?}: label {label} outside {} scored classes",
                        rec.image_id,
                        s.num_classes()
                    )));
                }
                let rank = s.rank_of(label);
                (Some(rank), Some(rank == 1 && loc_ok), Some(rank <= 5 && loc_ok))
            }
            None => (None, None, None),
        };
        verdicts.push(Verdict {
            image_id: rec.image_id.clone(),
            iou: overlap,
            cls_rank_of_gt: rank,
            gt_known: loc_ok,
            top1,
            top5,
        });
    }

    let n = verdicts.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let count = |f: &dyn Fn(&Verdict) -> bool| verdicts.iter().filter(|v| f(v)).count();
    let with_scores = score_by_id.is_some();
    let opt = |f: &dyn Fn(&Verdict) -> bool| with_scores.then(|| frac(count(f)));
    Ok(EvalReport {
        n,
        skipped_no_gt: skipped,
        gt_known_loc: frac(count(&|v| v.gt_known)),
        top1_loc: opt(&|v| v.top1 == Some(true)),
        top5_loc: opt(&|v| v.top5 == Some(true)),
        top1_cls: opt(&|v| v.cls_rank_of_gt == Some(1)),
        top5_cls: opt(&|v| v.cls_rank_of_gt.is_some_and(|r| r <= 5)),
        params_checksum: None,
        verdicts,
    })
}

/// Applies a trained head to another dataset's features without touching it
/// and reports GT-Known localization. The report carries the parameter
/// checksum, which is verified unchanged after prediction.
pub fn transfer_eval(
    params: &RegressorParams,
    features: &[PooledFeature],
    manifest: &[ImageRecord],
    split: Split,
) -> Result<EvalReport> {
    if let Some(f) = features.iter().find(|f| f.v.len() != params.d) {
        return Err(Error::DepthMismatch {
            expected: params.d,
            found: f.v.len(),
        });
    }
    let before = params.checksum();
    let preds = predict_boxes(params, features, manifest, split)?;
    let mut report = evaluate_run(&preds, None, manifest, split)?;
    let after = params.checksum();
    if before != after {
        return Err(Error::Validation(
            "parameters changed during transfer evaluation".into(),
        ));
    }
    report.params_checksum = Some(after);
    Ok(report)
}
