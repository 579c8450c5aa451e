use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NormalizedBox;
use crate::error::{Error, Result};

/// Sigmoid outputs are kept this far from 0 and 1.
const SIGMOID_EPS: f64 = 1e-12;

/// A parameter tensor with its momentum buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    pub buf: Vec<f64>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Param {
            value: vec![0.0; n],
            buf: vec![0.0; n],
        }
    }

    fn uniform<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Param {
            value: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            buf: vec![0.0; n],
        }
    }

    fn from_values(value: Vec<f64>) -> Self {
        let n = value.len();
        Param {
            value,
            buf: vec![0.0; n],
        }
    }
}

fn hash_params(params: &[&Param]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

/// `d -> hidden (ReLU) -> 4 (sigmoid)`; weights are row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorParams {
    pub d: usize,
    pub hidden: usize,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RegressorGrads {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        RegressorGrads {
            w1: vec![0.0; hidden * d],
            b1: vec![0.0; hidden],
            w2: vec![0.0; 4 * hidden],
            b2: vec![0.0; 4],
        }
    }

    pub fn add_assign(&mut self, other: &RegressorGrads) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

impl RegressorParams {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        RegressorParams {
            d,
            hidden,
            w1: Param::zeros(hidden * d),
            b1: Param::zeros(hidden),
            w2: Param::zeros(4 * hidden),
            b2: Param::zeros(4),
        }
    }

    /// Each layer uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        RegressorParams {
            d,
            hidden,
            w1: Param::uniform(hidden * d, d, rng),
            b1: Param::uniform(hidden, d, rng),
            w2: Param::uniform(4 * hidden, hidden, rng),
            b2: Param::uniform(4, hidden, rng),
        }
    }

    pub fn from_values(
        d: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let p = RegressorParams {
            d,
            hidden,
            w1: Param::from_values(w1),
            b1: Param::from_values(b1),
            w2: Param::from_values(w2),
            b2: Param::from_values(b2),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            (&self.w1, self.hidden * self.d, "W1"),
            (&self.b1, self.hidden, "b1"),
            (&self.w2, 4 * self.hidden, "W2"),
            (&self.b2, 4, "b2"),
        ];
        validate_shapes(&shapes)
    }

    pub fn params(&self) -> [&Param; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// SHA-256 over the parameter values (not the momentum buffers).
    pub fn checksum(&self) -> String {
        hash_params(&self.params())
    }

    fn hidden_pre(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..self.hidden)
            .map(|j| {
                let row = &self.w1.value[j * d..(j + 1) * d];
                self.b1.value[j] + row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    fn output_pre(&self, act: &[f64]) -> [f64; 4] {
        let m = self.hidden;
        let mut z = [0.0; 4];
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &self.w2.value[k * m..(k + 1) * m];
            *zk = self.b2.value[k] + row.iter().zip(act).map(|(w, a)| w * a).sum::<f64>();
        }
        z
    }
}

fn validate_shapes(shapes: &[(&Param, usize, &str)]) -> Result<()> {
    for (p, n, name) in shapes {
        if p.value.len() != *n || p.buf.len() != *n {
            return Err(Error::Validation(format!(
                "parameter {name} has {} values / {} buffer entries, expected {n}",
                p.value.len(),
                p.buf.len()
            )));
        }
        if p.value.iter().chain(&p.buf).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("parameter {name} is not finite")));
        }
    }
    Ok(())
}

fn check_input(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DepthMismatch {
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// `sigmoid(W2 relu(W1 v + b1) + b2)`.
pub fn reg_forward(params: &RegressorParams, v: &[f64]) -> Result<NormalizedBox> {
    check_input(params.d, v)?;
    let act: Vec<f64> = params.hidden_pre(v).into_iter().map(|a| a.max(0.0)).collect();
    Ok(NormalizedBox::from_array(params.output_pre(&act).map(sigmoid)))
}

/// Mean of the four squared coordinate errors.
pub fn reg_loss(pred: &NormalizedBox, target: &NormalizedBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / 4.0
}

/// Gradient of `reg_loss(reg_forward(params, v), target)`, accumulated into
/// `grads` scaled by `weight`. Returns the loss.
pub fn reg_backward(
    params: &RegressorParams,
    v: &[f64],
    target: &NormalizedBox,
    weight: f64,
    grads: &mut RegressorGrads,
) -> Result<f64> {
    check_input(params.d, v)?;
    let (d, m) = (params.d, params.hidden);
    let pre = params.hidden_pre(v);
    let act: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
    let out = params.output_pre(&act).map(sigmoid);
    let t = target.to_array();

    let dz: [f64; 4] = std::array::from_fn(|k| weight * 0.5 * (out[k] - t[k]) * out[k] * (1.0 - out[k]));
    let mut dact = vec![0.0; m];
    for k in 0..4 {
        grads.b2[k] += dz[k];
        let w_row = &params.w2.value[k * m..(k + 1) * m];
        let g_row = &mut grads.w2[k * m..(k + 1) * m];
        for j in 0..m {
            g_row[j] += dz[k] * act[j];
            dact[j] += dz[k] * w_row[j];
        }
    }
    for j in 0..m {
        // ReLU'(0) = 0
        if pre[j] <= 0.0 {
            continue;
        }
        let g = dact[j];
        grads.b1[j] += g;
        let g_row = &mut grads.w1[j * d..(j + 1) * d];
        for (gw, x) in g_row.iter_mut().zip(v) {
            *gw += g * x;
        }
    }
    Ok(reg_loss(&NormalizedBox::from_array(out), target))
}

/// Linear softmax classifier, `Wc` row-major `classes x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub d: usize,
    pub classes: usize,
    pub wc: Param,
    pub bc: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros(d: usize, classes: usize) -> Self {
        ClassifierGrads {
            wc: vec![0.0; classes * d],
            bc: vec![0.0; classes],
        }
    }

    pub fn add_assign(&mut self, other: &ClassifierGrads) {
        self.wc.iter_mut().zip(&other.wc).for_each(|(a, b)| *a += b);
        self.bc.iter_mut().zip(&other.bc).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.wc.iter_mut().chain(self.bc.iter_mut()).for_each(|x| *x *= s);
    }
}

impl ClassifierParams {
    pub fn init<R: Rng>(d: usize, classes: usize, rng: &mut R) -> Self {
        ClassifierParams {
            d,
            classes,
            wc: Param::uniform(classes * d, d, rng),
            bc: Param::uniform(classes, d, rng),
        }
    }

    pub fn from_values(d: usize, classes: usize, wc: Vec<f64>, bc: Vec<f64>) -> Result<Self> {
        let p = ClassifierParams {
            d,
            classes,
            wc: Param::from_values(wc),
            bc: Param::from_values(bc),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        validate_shapes(&[(&self.wc, self.classes * self.d, "Wc"), (&self.bc, self.classes, "bc")])
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.wc, &self.bc]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.wc, &mut self.bc]
    }

    pub fn checksum(&self) -> String {
        hash_params(&self.params())
    }
}

/// Class logits `Wc v + bc`.
pub fn cls_forward(params: &ClassifierParams, v: &[f64]) -> Result<Vec<f64>> {
    check_input(params.d, v)?;
    let d = params.d;
    Ok((0..params.classes)
        .map(|c| {
            params.bc.value[c]
                + params.wc.value[c * d..(c + 1) * d]
                    .iter()
                    .zip(v)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Softmax cross-entropy of `label` under `logits`.
pub fn cls_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Accumulates `weight * d(cross-entropy)/d(params)` into `grads`; returns the loss.
pub fn cls_backward(
    params: &ClassifierParams,
    v: &[f64],
    label: usize,
    weight: f64,
    grads: &mut ClassifierGrads,
) -> Result<f64> {
    if label >= params.classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            params.classes
        )));
    }
    let logits = cls_forward(params, v)?;
    let probs = softmax(&logits);
    let d = params.d;
    for (c, p) in probs.iter().enumerate() {
        let g = weight * (p - if c == label { 1.0 } else { 0.0 });
        grads.bc[c] += g;
        for (gw, x) in grads.wc[c * d..(c + 1) * d].iter_mut().zip(v) {
            *gw += g * x;
        }
    }
    Ok(cls_loss(&logits, label))
}
