use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::network::{
    cls_backward, reg_backward, reg_forward, ClassifierGrads, ClassifierParams, RegressorGrads, RegressorParams,
};
use super::sgd::sgd_step;
use super::{denormalize_box, normalize_box, NormalizedBox, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::pseudoboxes::PseudoAnnotation;
use crate::tensor_io::{ImageRecord, PooledFeature, Split};

// Independent ChaCha streams derived from one seed.
const REG_INIT_STREAM: u64 = 0;
const CLS_INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Samples per worker task in parallel mode.
const PARALLEL_CHUNK: usize = 16;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegSample {
    pub image_id: String,
    pub v: Vec<f64>,
    pub target: NormalizedBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsSample {
    pub image_id: String,
    pub v: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub image_id: String,
    pub v: Vec<f64>,
    pub label: usize,
    pub target: NormalizedBox,
}

impl JointSample {
    pub fn regression(&self) -> RegSample {
        RegSample {
            image_id: self.image_id.clone(),
            v: self.v.clone(),
            target: self.target,
        }
    }

    pub fn classification(&self) -> ClsSample {
        ClsSample {
            image_id: self.image_id.clone(),
            v: self.v.clone(),
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRegressor {
    pub params: RegressorParams,
    pub log: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub params: ClassifierParams,
    pub log: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedJoint {
    pub regressor: RegressorParams,
    pub classifier: ClassifierParams,
    pub log: Vec<LossRecord>,
}

fn feature_index(features: &[PooledFeature]) -> HashMap<&str, &PooledFeature> {
    features.iter().map(|f| (f.image_id.as_str(), f)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a PooledFeature>, id: &str) -> Result<&'a PooledFeature> {
    index.get(id).copied().ok_or_else(|| Error::Missing {
        what: "pooled feature",
        image_id: id.to_string(),
    })
}

/// Pairs each annotation with its pooled feature and normalized target, in
/// annotation order.
pub fn regression_samples(
    features: &[PooledFeature],
    anns: &[PseudoAnnotation],
    manifest: &[ImageRecord],
) -> Result<Vec<RegSample>> {
    let records: HashMap<&str, &ImageRecord> = manifest.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let index = feature_index(features);
    anns.iter()
        .map(|a| {
            let rec = records
                .get(a.image_id.as_str())
                .ok_or_else(|| Error::UnknownId(a.image_id.clone()))?;
            Ok(RegSample {
                image_id: a.image_id.clone(),
                v: lookup(&index, &a.image_id)?.v.clone(),
                target: normalize_box(&a.bbox, rec.orig_width as f64, rec.orig_height as f64)?,
            })
        })
        .collect()
}

/// Every image of `split` with its class label, in manifest order.
pub fn classification_samples(
    features: &[PooledFeature],
    manifest: &[ImageRecord],
    split: Split,
) -> Result<Vec<ClsSample>> {
    let index = feature_index(features);
    manifest
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(ClsSample {
                image_id: r.image_id.clone(),
                v: lookup(&index, &r.image_id)?.v.clone(),
                label: r.class_label as usize,
            })
        })
        .collect()
}

pub fn joint_samples(
    features: &[PooledFeature],
    anns: &[PseudoAnnotation],
    manifest: &[ImageRecord],
) -> Result<Vec<JointSample>> {
    let labels: HashMap<&str, u32> = manifest.iter().map(|r| (r.image_id.as_str(), r.class_label)).collect();
    regression_samples(features, anns, manifest)?
        .into_iter()
        .map(|s| {
            let label = labels[s.image_id.as_str()] as usize;
            Ok(JointSample {
                image_id: s.image_id,
                v: s.v,
                label,
                target: s.target,
            })
        })
        .collect()
}

fn check_depth<'a>(d: usize, vs: impl IntoIterator<Item = &'a Vec<f64>>) -> Result<()> {
    for v in vs {
        if v.len() != d {
            return Err(Error::DepthMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    Ok(())
}

/// Shared epoch loop: seeded shuffle, mini-batches, per-epoch mean loss.
/// `step` returns the summed loss of the batch it was given.
fn run_epochs<F>(n: usize, cfg: &TrainConfig, mut step: F) -> Result<Vec<LossRecord>>
where
    F: FnMut(&[usize], f64) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let sum = step(batch, lr)?;
            if !sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: sum / batch.len() as f64,
                });
            }
            total += sum;
        }
        log.push(LossRecord {
            epoch,
            split: "train",
            loss: total / n as f64,
        });
    }
    Ok(log)
}

fn reg_batch_grads(
    params: &RegressorParams,
    items: &[(&[f64], &NormalizedBox)],
    weight: f64,
    parallel: bool,
) -> Result<(RegressorGrads, f64)> {
    let (d, m) = (params.d, params.hidden);
    if parallel {
        items
            .par_chunks(PARALLEL_CHUNK)
            .map(|chunk| {
                let mut g = RegressorGrads::zeros(d, m);
                let mut loss = 0.0;
                for (v, t) in chunk {
                    loss += reg_backward(params, v, t, weight, &mut g)?;
                }
                Ok((g, loss))
            })
            .try_reduce(
                || (RegressorGrads::zeros(d, m), 0.0),
                |(mut ga, la), (gb, lb)| {
                    ga.add_assign(&gb);
                    Ok((ga, la + lb))
                },
            )
    } else {
        let mut g = RegressorGrads::zeros(d, m);
        let mut loss = 0.0;
        for (v, t) in items {
            loss += reg_backward(params, v, t, weight, &mut g)?;
        }
        Ok((g, loss))
    }
}

fn cls_batch_grads(
    params: &ClassifierParams,
    items: &[(&[f64], usize)],
    weight: f64,
    parallel: bool,
) -> Result<(ClassifierGrads, f64)> {
    let (d, c) = (params.d, params.classes);
    if parallel {
        items
            .par_chunks(PARALLEL_CHUNK)
            .map(|chunk| {
                let mut g = ClassifierGrads::zeros(d, c);
                let mut loss = 0.0;
                for &(v, label) in chunk {
                    loss += cls_backward(params, v, label, weight, &mut g)?;
                }
                Ok((g, loss))
            })
            .try_reduce(
                || (ClassifierGrads::zeros(d, c), 0.0),
                |(mut ga, la), (gb, lb)| {
                    ga.add_assign(&gb);
                    Ok((ga, la + lb))
                },
            )
    } else {
        let mut g = ClassifierGrads::zeros(d, c);
        let mut loss = 0.0;
        for &(v, label) in items {
            loss += cls_backward(params, v, label, weight, &mut g)?;
        }
        Ok((g, loss))
    }
}

fn apply_reg(params: &mut RegressorParams, g: &RegressorGrads, lr: f64, cfg: &TrainConfig) {
    sgd_step(
        &mut params.params_mut(),
        &[&g.w1, &g.b1, &g.w2, &g.b2],
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );
}

fn apply_cls(params: &mut ClassifierParams, g: &ClassifierGrads, lr: f64, cfg: &TrainConfig) {
    sgd_step(
        &mut params.params_mut(),
        &[&g.wc, &g.bc],
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );
}

fn input_depth<'a>(mut vs: impl Iterator<Item = &'a Vec<f64>>) -> Result<usize> {
    vs.next()
        .map(|v| v.len())
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))
}

/// Regression head trained with mean squared error on normalized boxes.
pub fn train_regressor(samples: &[RegSample], cfg: &TrainConfig) -> Result<TrainedRegressor> {
    let d = input_depth(samples.iter().map(|s| &s.v))?;
    check_depth(d, samples.iter().map(|s| &s.v))?;
    let mut params = RegressorParams::init(d, cfg.hidden, &mut stream(cfg.seed, REG_INIT_STREAM));
    let log = run_epochs(samples.len(), cfg, |batch, lr| {
        let items: Vec<(&[f64], &NormalizedBox)> = batch
            .iter()
            .map(|&i| (samples[i].v.as_slice(), &samples[i].target))
            .collect();
        let (g, loss) = reg_batch_grads(&params, &items, 1.0 / batch.len() as f64, cfg.parallel)?;
        apply_reg(&mut params, &g, lr, cfg);
        Ok(loss)
    })?;
    Ok(TrainedRegressor { params, log })
}

/// Linear softmax head trained with cross-entropy.
pub fn train_classifier(samples: &[ClsSample], classes: usize, cfg: &TrainConfig) -> Result<TrainedClassifier> {
    let d = input_depth(samples.iter().map(|s| &s.v))?;
    check_depth(d, samples.iter().map(|s| &s.v))?;
    if classes == 0 {
        return Err(Error::InvalidArgument("classifier needs at least one class".into()));
    }
    let mut params = ClassifierParams::init(d, classes, &mut stream(cfg.seed, CLS_INIT_STREAM));
    let log = run_epochs(samples.len(), cfg, |batch, lr| {
        let items: Vec<(&[f64], usize)> = batch
            .iter()
            .map(|&i| (samples[i].v.as_slice(), samples[i].label))
            .collect();
        let (g, loss) = cls_batch_grads(&params, &items, 1.0 / batch.len() as f64, cfg.parallel)?;
        apply_cls(&mut params, &g, lr, cfg);
        Ok(loss)
    })?;
    Ok(TrainedClassifier { params, log })
}

/// Both heads on shared inputs with loss `cross_entropy + lambda * reg_loss`.
///
/// The heads share no parameters, so each receives only its own term's
/// gradient; initialization and batch order match the single-task trainers
/// for the same seed.
pub fn train_joint(samples: &[JointSample], classes: usize, cfg: &TrainConfig) -> Result<TrainedJoint> {
    let d = input_depth(samples.iter().map(|s| &s.v))?;
    check_depth(d, samples.iter().map(|s| &s.v))?;
    if classes == 0 {
        return Err(Error::InvalidArgument("classifier needs at least one class".into()));
    }
    let lambda = cfg.joint_lambda;
    let mut regressor = RegressorParams::init(d, cfg.hidden, &mut stream(cfg.seed, REG_INIT_STREAM));
    let mut classifier = ClassifierParams::init(d, classes, &mut stream(cfg.seed, CLS_INIT_STREAM));
    let log = run_epochs(samples.len(), cfg, |batch, lr| {
        let w = 1.0 / batch.len() as f64;
        let reg_items: Vec<(&[f64], &NormalizedBox)> = batch
            .iter()
            .map(|&i| (samples[i].v.as_slice(), &samples[i].target))
            .collect();
        let cls_items: Vec<(&[f64], usize)> = batch
            .iter()
            .map(|&i| (samples[i].v.as_slice(), samples[i].label))
            .collect();
        let (gc, ce) = cls_batch_grads(&classifier, &cls_items, w, cfg.parallel)?;
        let (gr, mse) = reg_batch_grads(&regressor, &reg_items, w * lambda, cfg.parallel)?;
        apply_cls(&mut classifier, &gc, lr, cfg);
        apply_reg(&mut regressor, &gr, lr, cfg);
        Ok(ce + lambda * mse)
    })?;
    Ok(TrainedJoint {
        regressor,
        classifier,
        log,
    })
}

/// One box per image of `split`, in manifest order, in original pixels.
pub fn predict_boxes(
    params: &RegressorParams,
    features: &[PooledFeature],
    manifest: &[ImageRecord],
    split: Split,
) -> Result<Vec<Prediction>> {
    let index = feature_index(features);
    manifest
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let nb = reg_forward(params, &lookup(&index, &r.image_id)?.v)?;
            Ok(Prediction {
                image_id: r.image_id.clone(),
                bbox: denormalize_box(&nb, r.orig_width as f64, r.orig_height as f64),
            })
        })
        .collect()
}
