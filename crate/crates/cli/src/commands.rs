use std::path::{Path, PathBuf};

use psol_core::boxreg::{
    classification_samples, cls_forward, joint_samples, predict_boxes, read_checkpoint, regression_samples,
    train_classifier, train_joint, train_regressor, write_checkpoint, write_loss_log, Checkpoint, CheckpointKind,
    CheckpointMeta, ClassifierParams, TrainConfig,
};
use psol_core::eval::{self, evaluate_run, read_predictions, write_predictions, EvalReport};
use psol_core::fixture::{make_fixture as build_fixture, FixtureConfig};
use psol_core::pseudoboxes::{
    generate_pseudo_boxes, load_pseudo_annotations, summarize, write_pseudo_annotations, FeatureDir, GenerateOptions,
    Method,
};
use psol_core::tensor_io::{
    load_manifest, read_classifier_outputs, read_classifier_weights, read_pooled_features, write_json_lines,
    ClassifierOutputs, ImageRecord, Split,
};

use crate::config::{optional_input, output_dir, require_input, RunConfig};
use crate::{CliError, Common, TrainFlags};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Regressor,
    Classifier,
    Joint,
}

impl Head {
    fn name(self) -> &'static str {
        match self {
            Head::Regressor => "regressor",
            Head::Classifier => "classifier",
            Head::Joint => "joint",
        }
    }
}

/// Config file first, then flags on top.
fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if common.manifest.is_some() {
        cfg.manifest = common.manifest.clone();
    }
    if common.output_dir.is_some() {
        cfg.output_dir = common.output_dir.clone();
    }
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> Result<Vec<ImageRecord>, CliError> {
    Ok(load_manifest(require_input(&cfg.manifest, "manifest")?)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn make_fixture(
    out: &Path,
    seed: u64,
    classes: usize,
    images_per_class: usize,
    depth: usize,
    grid: usize,
    shift: f64,
) -> Result<(), CliError> {
    let cfg = FixtureConfig {
        seed,
        classes,
        images_per_class,
        d: depth,
        grid,
        shift,
        ..FixtureConfig::default()
    };
    let fixture = build_fixture(&cfg)?;
    fixture.write_to(out)?;
    eprintln!("wrote {} images to {}", fixture.manifest.len(), out.display());
    Ok(())
}

pub fn generate_boxes(
    common: &Common,
    features_dir: Option<PathBuf>,
    method: Option<Method>,
    classifier_weights: Option<PathBuf>,
    split: Split,
) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if features_dir.is_some() {
        cfg.features_dir = features_dir;
    }
    if method.is_some() {
        cfg.method = method;
    }
    if classifier_weights.is_some() {
        cfg.classifier_weights = classifier_weights;
    }
    let method = cfg.method.unwrap_or(Method::Ddt);
    let records = manifest(&cfg)?;
    let features = FeatureDir::new(require_input(&cfg.features_dir, "features_dir")?);
    let weights = match optional_input(&cfg.classifier_weights, "classifier_weights")? {
        Some(p) => Some(read_classifier_weights(p)?),
        None => None,
    };
    if method == Method::Cam && weights.is_none() {
        return Err(CliError::Config("method cam requires `classifier_weights`".into()));
    }
    let out = output_dir(&cfg.output_dir)?;
    let opts = GenerateOptions {
        method,
        classifier_weights: weights.as_ref(),
        split,
    };
    let anns = generate_pseudo_boxes(&records, &features, &opts)?;
    write_pseudo_annotations(&anns, out.join("pseudo_boxes.jsonl"))?;
    let summary = summarize(&anns);
    let value = serde_json::to_value(summary).map_err(|e| CliError::Internal(e.to_string()))?;
    write_json(&out.join("pseudo_boxes_summary.json"), &value)?;
    eprintln!(
        "{} pseudo boxes, fallback rate {:.4}",
        summary.total, summary.fallback_rate
    );
    Ok(())
}

fn train_config(cfg: &RunConfig, head: Head, flags: &TrainFlags) -> Result<TrainConfig, CliError> {
    let section = match head {
        Head::Regressor => &cfg.train.regressor,
        Head::Classifier => &cfg.train.classifier,
        Head::Joint => &cfg.train.joint,
    };
    let mut tc = section.clone().unwrap_or_default();
    if let Some(v) = flags.epochs {
        tc.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = flags.lr {
        tc.lr = v;
    }
    if let Some(v) = flags.seed {
        tc.seed = v;
    }
    if let Some(v) = flags.hidden {
        tc.hidden = v;
    }
    if let Some(v) = flags.lambda {
        tc.joint_lambda = v;
    }
    tc.validate()?;
    Ok(tc)
}

fn class_count(cfg: &RunConfig, records: &[ImageRecord]) -> usize {
    cfg.classes
        .unwrap_or_else(|| records.iter().map(|r| r.class_label as usize + 1).max().unwrap_or(0))
}

pub fn train(common: &Common, flags: &TrainFlags, head: Head) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if flags.pooled_features.is_some() {
        cfg.pooled_features = flags.pooled_features.clone();
    }
    let tc = train_config(&cfg, head, flags)?;
    let records = manifest(&cfg)?;
    let pooled = read_pooled_features(require_input(&cfg.pooled_features, "pooled_features")?)?;
    let out = output_dir(&cfg.output_dir)?;
    let anns = if head == Head::Classifier {
        Vec::new()
    } else {
        let path = flags
            .pseudo_boxes
            .clone()
            .unwrap_or_else(|| out.join("pseudo_boxes.jsonl"));
        load_pseudo_annotations(require_input(&Some(path), "pseudo_boxes")?, &records)?
    };
    let classes = class_count(&cfg, &records);

    let (ckpt, log) = match head {
        Head::Regressor => {
            let trained = train_regressor(&regression_samples(&pooled, &anns, &records)?, &tc)?;
            let meta = meta(
                CheckpointKind::Regressor,
                trained.params.d,
                Some(trained.params.hidden),
                None,
                &tc,
            );
            (
                Checkpoint {
                    meta,
                    regressor: Some(trained.params),
                    classifier: None,
                },
                trained.log,
            )
        }
        Head::Classifier => {
            let samples = classification_samples(&pooled, &records, Split::Train)?;
            let trained = train_classifier(&samples, classes, &tc)?;
            let meta = meta(CheckpointKind::Classifier, trained.params.d, None, Some(classes), &tc);
            (
                Checkpoint {
                    meta,
                    regressor: None,
                    classifier: Some(trained.params),
                },
                trained.log,
            )
        }
        Head::Joint => {
            let trained = train_joint(&joint_samples(&pooled, &anns, &records)?, classes, &tc)?;
            let meta = meta(
                CheckpointKind::Joint,
                trained.regressor.d,
                Some(trained.regressor.hidden),
                Some(classes),
                &tc,
            );
            (
                Checkpoint {
                    meta,
                    regressor: Some(trained.regressor),
                    classifier: Some(trained.classifier),
                },
                trained.log,
            )
        }
    };
    let ckpt_path = out.join(format!("{}.psol", head.name()));
    write_checkpoint(&ckpt, &ckpt_path)?;
    write_loss_log(&log, out.join(format!("{}_loss.csv", head.name())))?;
    match log.last() {
        Some(last) => eprintln!(
            "{}: {} epochs, final loss {:.6}",
            ckpt_path.display(),
            tc.epochs,
            last.loss
        ),
        None => eprintln!("{}: initialization only (0 epochs)", ckpt_path.display()),
    }
    Ok(())
}

fn meta(
    kind: CheckpointKind,
    d: usize,
    hidden: Option<usize>,
    classes: Option<usize>,
    tc: &TrainConfig,
) -> CheckpointMeta {
    CheckpointMeta {
        kind,
        d,
        hidden,
        classes,
        config: tc.clone(),
        seed: tc.seed,
        epoch: tc.epochs,
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn class_scores(
    params: &ClassifierParams,
    pooled: &[psol_core::tensor_io::PooledFeature],
    records: &[ImageRecord],
    split: Split,
) -> Result<Vec<ClassifierOutputs>, CliError> {
    let index: std::collections::HashMap<&str, &[f64]> =
        pooled.iter().map(|p| (p.image_id.as_str(), p.v.as_slice())).collect();
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let v = index
                .get(r.image_id.as_str())
                .ok_or_else(|| CliError::Data(format!("missing pooled feature for image {:?}", r.image_id)))?;
            Ok(ClassifierOutputs {
                image_id: r.image_id.clone(),
                scores: softmax(&cls_forward(params, v)?),
            })
        })
        .collect()
}

pub fn predict(
    common: &Common,
    checkpoint: &Path,
    classifier_checkpoint: Option<&Path>,
    pooled_features: Option<PathBuf>,
    split: Option<Split>,
) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if pooled_features.is_some() {
        cfg.pooled_features = pooled_features;
    }
    let split = split.unwrap_or(cfg.eval.split);
    let records = manifest(&cfg)?;
    let pooled = read_pooled_features(require_input(&cfg.pooled_features, "pooled_features")?)?;
    let ckpt = read_checkpoint(require_input(&Some(checkpoint.to_path_buf()), "checkpoint")?)?;
    let regressor = ckpt
        .regressor
        .ok_or_else(|| CliError::Data(format!("{} holds no box regressor", checkpoint.display())))?;
    let mut classifier = ckpt.classifier;
    if let Some(path) = classifier_checkpoint {
        let extra = read_checkpoint(require_input(&Some(path.to_path_buf()), "classifier_checkpoint")?)?;
        classifier = Some(
            extra
                .classifier
                .ok_or_else(|| CliError::Data(format!("{} holds no classifier", path.display())))?,
        );
    }
    let out = output_dir(&cfg.output_dir)?;
    let preds = predict_boxes(&regressor, &pooled, &records, split)?;
    write_predictions(&preds, out.join("predictions.jsonl"))?;
    eprintln!("{} predictions for split {}", preds.len(), split.as_str());
    if let Some(cls) = classifier {
        let scores = class_scores(&cls, &pooled, &records, split)?;
        write_json_lines(&scores, out.join("scores.jsonl"))?;
    }
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Result<(), CliError> {
    write_json(&out.join("report.json"), &report.summary_json())?;
    write_text(&out.join("report.txt"), &report.to_table())?;
    write_text(&out.join("verdicts.csv"), &report.verdicts_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn evaluate(
    common: &Common,
    predictions: &Path,
    scores: Option<&Path>,
    split: Option<Split>,
) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let split = split.unwrap_or(cfg.eval.split);
    let records = manifest(&cfg)?;
    let preds = read_predictions(require_input(&Some(predictions.to_path_buf()), "predictions")?)?;
    let scores = match scores {
        Some(p) => Some(read_classifier_outputs(require_input(
            &Some(p.to_path_buf()),
            "scores",
        )?)?),
        None => None,
    };
    let report = evaluate_run(&preds, scores.as_deref(), &records, split)?;
    let out = output_dir(&cfg.output_dir)?;
    write_report(&out, &report)
}

pub fn transfer_eval(
    common: &Common,
    checkpoint: &Path,
    pooled_features: Option<PathBuf>,
    split: Option<Split>,
) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if pooled_features.is_some() {
        cfg.pooled_features = pooled_features;
    }
    let split = split.unwrap_or(cfg.eval.split);
    let records = manifest(&cfg)?;
    let pooled = read_pooled_features(require_input(&cfg.pooled_features, "pooled_features")?)?;
    let ckpt = read_checkpoint(require_input(&Some(checkpoint.to_path_buf()), "checkpoint")?)?;
    let regressor = ckpt
        .regressor
        .ok_or_else(|| CliError::Data(format!("{} holds no box regressor", checkpoint.display())))?;
    let report = eval::transfer_eval(&regressor, &pooled, &records, split)?;
    let out = output_dir(&cfg.output_dir)?;
    write_report(&out, &report)
}
