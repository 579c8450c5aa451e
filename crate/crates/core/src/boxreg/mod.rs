//! Class-agnostic box regression head, linear classification head, and their
//! shared SGD trainer. Both heads read globally pooled backbone features.

mod checkpoint;
mod network;
mod sgd;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, write_loss_log, Checkpoint, CheckpointKind, CheckpointMeta};
pub use network::{
    cls_backward, cls_forward, cls_loss, reg_backward, reg_forward, reg_loss, sigmoid, ClassifierGrads,
    ClassifierParams, Param, RegressorGrads, RegressorParams,
};
pub use sgd::sgd_step;
pub use train::{
    classification_samples, joint_samples, predict_boxes, regression_samples, train_classifier, train_joint,
    train_regressor, ClsSample, JointSample, LossRecord, RegSample, TrainedClassifier, TrainedJoint, TrainedRegressor,
};

use serde::{Deserialize, Serialize};

use crate::bbox::BoxXYWH;
use crate::error::{Error, Result};

/// A box divided by its image's width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        NormalizedBox { x, y, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        NormalizedBox::new(a[0], a[1], a[2], a[3])
    }
}

pub fn normalize_box(b: &BoxXYWH, image_w: f64, image_h: f64) -> Result<NormalizedBox> {
    if !(image_w > 0.0 && image_h > 0.0) || !b.fits_within(image_w, image_h) {
        return Err(Error::Validation(format!(
            "box {b:?} is not inside a {image_w}x{image_h} image"
        )));
    }
    let clip = |v: f64| v.clamp(0.0, 1.0);
    Ok(NormalizedBox::new(
        clip(b.x / image_w),
        clip(b.y / image_h),
        clip(b.w / image_w),
        clip(b.h / image_h),
    ))
}

/// Inverse of [`normalize_box`]; the result is clamped into the image with
/// sides of at least one pixel.
pub fn denormalize_box(nb: &NormalizedBox, image_w: f64, image_h: f64) -> BoxXYWH {
    BoxXYWH::new(nb.x * image_w, nb.y * image_h, nb.w * image_w, nb.h * image_h).clamped(image_w, image_h, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrPolicy {
    Fixed,
    /// Multiply the rate by `factor` every `every_k` epochs.
    StepDecay {
        every_k: usize,
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_policy: LrPolicy,
    pub seed: u64,
    /// Hidden width of the regression head.
    pub hidden: usize,
    /// Learning-rate multiplier for freshly initialized heads.
    pub lr_mult: f64,
    /// Weight of the regression loss in joint training.
    pub joint_lambda: f64,
    /// Fan batch gradients out over the rayon pool. Summation order, and so
    /// the exact trajectory, is then unspecified.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 256,
            epochs: 30,
            lr_policy: LrPolicy::Fixed,
            seed: 0,
            hidden: 512,
            lr_mult: 1.0,
            joint_lambda: 1.0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    /// Classification-style schedule: divide the rate by 10 every `every_k` epochs.
    pub fn with_step_decay(mut self, every_k: usize) -> Self {
        self.lr_policy = LrPolicy::StepDecay { every_k, factor: 0.1 };
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.lr * self.lr_mult;
        match self.lr_policy {
            LrPolicy::Fixed => base,
            LrPolicy::StepDecay { every_k, factor } => base * factor.powi((epoch / every_k.max(1)) as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if !(self.lr_mult > 0.0 && self.lr_mult.is_finite()) {
            return bad("lr_mult must be positive");
        }
        if !(self.joint_lambda >= 0.0 && self.joint_lambda.is_finite()) {
            return bad("joint_lambda must be non-negative");
        }
        if let LrPolicy::StepDecay { every_k, factor } = self.lr_policy {
            if every_k == 0 || factor.is_nan() || factor <= 0.0 {
                return bad("step decay needs every_k > 0 and factor > 0");
            }
        }
        Ok(())
    }
}
