//! Naive reference implementations used as test oracles. Each one is written
//! independently of the library code it checks.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::VecDeque;

use psol_core::boxreg::{NormalizedBox, RegressorParams};
use psol_core::tensor_io::FeatureMap;
use psol_core::BoxXYWH;
use rand::Rng;

/// IoU of integer-coordinate boxes by counting unit pixels.
pub fn raster_iou(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> (u64, u64) {
    let inside =
        |bx: (i64, i64, i64, i64), x: i64, y: i64| x >= bx.0 && x < bx.0 + bx.2 && y >= bx.1 && y < bx.1 + bx.3;
    let x0 = a.0.min(b.0);
    let y0 = a.1.min(b.1);
    let x1 = (a.0 + a.2).max(b.0 + b.2);
    let y1 = (a.1 + a.3).max(b.1 + b.3);
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    (inter, union)
}

/// Two-pass mean and covariance straight from the descriptors.
pub fn dense_covariance(descriptors: &[Vec<f64>]) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let d = descriptors[0].len();
    let n = descriptors.len() as f64;
    let mut mean = vec![0.0; d];
    for x in descriptors {
        for k in 0..d {
            mean[k] += x[k] / n;
        }
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for x in descriptors {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

/// Leading eigenpair from nalgebra's symmetric eigensolver.
pub fn dense_leading_eigen(cov: &nalgebra::DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = cov.clone().symmetric_eigen();
    let (mut best, mut val) = (0, f64::NEG_INFINITY);
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v > val {
            best = i;
            val = v;
        }
    }
    (val, eig.eigenvectors.column(best).iter().copied().collect())
}

pub fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).abs()
}

pub fn random_map<R: Rng>(rng: &mut R, id: &str, h: usize, w: usize, d: usize, scale: f32) -> FeatureMap {
    let values = (0..h * w * d).map(|_| rng.random_range(-scale..scale)).collect();
    FeatureMap::new(id, h, w, d, values).unwrap()
}

pub fn descriptors_of(maps: &[FeatureMap]) -> Vec<Vec<f64>> {
    maps.iter()
        .flat_map(|m| {
            m.descriptors()
                .map(|d| d.iter().map(|&x| x as f64).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `H[r][c] = sum_k (fm[r][c][k] - mean[k]) * p[k]`.
pub fn naive_projection(fm: &FeatureMap, mean: &[f64], p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; fm.h * fm.w];
    for r in 0..fm.h {
        for c in 0..fm.w {
            let mut s = 0.0;
            for k in 0..fm.d {
                s += (fm.values[(r * fm.w + c) * fm.d + k] as f64 - mean[k]) * p[k];
            }
            out[r * fm.w + c] = s;
        }
    }
    out
}

/// `H[r][c] = sum_k fm[r][c][k] * w[k]`.
pub fn naive_cam(fm: &FeatureMap, w: &[f32]) -> Vec<f64> {
    let mut out = vec![0.0; fm.h * fm.w];
    for r in 0..fm.h {
        for c in 0..fm.w {
            let mut s = 0.0;
            for k in 0..fm.d {
                s += fm.values[(r * fm.w + c) * fm.d + k] as f64 * w[k] as f64;
            }
            out[r * fm.w + c] = s;
        }
    }
    out
}

/// Corner-aligned bilinear resize, one output pixel at a time.
pub fn naive_upsample(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| src[r * cols + c];
    let coord = |o: usize, out_len: usize, in_len: usize| -> f64 {
        if out_len == 1 || in_len == 1 {
            0.0
        } else {
            o as f64 * (in_len as f64 - 1.0) / (out_len as f64 - 1.0)
        }
    };
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        for j in 0..out_cols {
            let y = coord(i, out_rows, rows);
            let x = coord(j, out_cols, cols);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(rows - 1), (x0 + 1).min(cols - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1) * (1.0 - fy) * fx
                + at(y1, x0) * fy * (1.0 - fx)
                + at(y1, x1) * fy * fx;
            out.push(v);
        }
    }
    out
}

/// Largest 8-connected component by breadth-first flood fill, visiting seeds
/// in raster order; the first seed wins ties. Returns (size, seed, box).
pub fn flood_fill_largest(mask: &[bool], rows: usize, cols: usize) -> Option<(usize, (usize, usize), BoxXYWH)> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, (usize, usize), BoxXYWH)> = None;
    for seed in 0..mask.len() {
        if !mask[seed] || seen[seed] {
            continue;
        }
        let mut queue = VecDeque::from([seed]);
        seen[seed] = true;
        let (mut size, mut r0, mut r1, mut c0, mut c1) = (0, usize::MAX, 0, usize::MAX, 0);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / cols, i % cols);
            size += 1;
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|b| size > b.0) {
            let bx = BoxXYWH::new(c0 as f64, r0 as f64, (c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64);
            best = Some((size, (seed / cols, seed % cols), bx));
        }
    }
    best
}

/// Straight-line forward pass of the regression head.
pub fn naive_reg_forward(p: &RegressorParams, v: &[f64]) -> [f64; 4] {
    let (d, m) = (p.d, p.hidden);
    let mut hidden = vec![0.0; m];
    for j in 0..m {
        let mut z = p.b1.value[j];
        for i in 0..d {
            z += p.w1.value[j * d + i] * v[i];
        }
        hidden[j] = if z > 0.0 { z } else { 0.0 };
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        let mut z = p.b2.value[k];
        for j in 0..m {
            z += p.w2.value[k * m + j] * hidden[j];
        }
        out[k] = 1.0 / (1.0 + (-z).exp());
    }
    out
}

/// Hidden pre-activations, to keep finite differences away from ReLU kinks.
pub fn hidden_pre(p: &RegressorParams, v: &[f64]) -> Vec<f64> {
    (0..p.hidden)
        .map(|j| p.b1.value[j] + (0..p.d).map(|i| p.w1.value[j * p.d + i] * v[i]).sum::<f64>())
        .collect()
}

pub fn random_box01<R: Rng>(rng: &mut R) -> NormalizedBox {
    NormalizedBox::new(
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    )
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-7;

fn fd_max_err(analytic: &[f64], values: &mut [f64], loss: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + FD_STEP;
        let up = loss(values);
        values[i] = orig - FD_STEP;
        let down = loss(values);
        values[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric, FD_FLOOR));
    }
    worst
}

/// Worst relative error between `reg_backward` and central differences for
/// one random configuration. Inputs are redrawn until every hidden
/// pre-activation is at least 1e-3 from the ReLU kink, well beyond what a
/// step can move it.
pub fn reg_gradcheck<R: Rng>(rng: &mut R) -> f64 {
    use psol_core::boxreg::{reg_backward, reg_forward, reg_loss, RegressorGrads};
    let d = rng.random_range(1..=8);
    let m = rng.random_range(1..=8);
    let (p, v) = loop {
        let mut p = RegressorParams::init(d, m, rng);
        p.b2.value.iter_mut().for_each(|b| *b = rng.random_range(-2.0..2.0));
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let margin = 1e-3;
        if hidden_pre(&p, &v).iter().all(|z| z.abs() > margin) {
            break (p, v);
        }
    };
    let target = random_box01(rng);
    let mut g = RegressorGrads::zeros(d, m);
    reg_backward(&p, &v, &target, 1.0, &mut g).unwrap();

    let mut worst: f64 = 0.0;
    let parts: [(&Vec<f64>, usize); 4] = [(&g.w1, 0), (&g.b1, 1), (&g.w2, 2), (&g.b2, 3)];
    for (analytic, which) in parts {
        let mut q = p.clone();
        let mut values = match which {
            0 => q.w1.value.clone(),
            1 => q.b1.value.clone(),
            2 => q.w2.value.clone(),
            _ => q.b2.value.clone(),
        };
        let mut loss = |vals: &[f64]| {
            let slot = match which {
                0 => &mut q.w1.value,
                1 => &mut q.b1.value,
                2 => &mut q.w2.value,
                _ => &mut q.b2.value,
            };
            slot.copy_from_slice(vals);
            reg_loss(&reg_forward(&q, &v).unwrap(), &target)
        };
        worst = worst.max(fd_max_err(analytic, &mut values, &mut loss));
    }
    worst
}

/// Same check for the softmax classifier head.
pub fn cls_gradcheck<R: Rng>(rng: &mut R) -> f64 {
    use psol_core::boxreg::{cls_backward, cls_forward, cls_loss, ClassifierGrads, ClassifierParams};
    let d = rng.random_range(1..=8);
    let classes = rng.random_range(2..=8);
    let p = ClassifierParams::init(d, classes, rng);
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let label = rng.random_range(0..classes);
    let mut g = ClassifierGrads::zeros(d, classes);
    cls_backward(&p, &v, label, 1.0, &mut g).unwrap();

    let mut worst: f64 = 0.0;
    for (analytic, is_bias) in [(&g.wc, false), (&g.bc, true)] {
        let mut q = p.clone();
        let mut values = if is_bias {
            q.bc.value.clone()
        } else {
            q.wc.value.clone()
        };
        let mut loss = |vals: &[f64]| {
            if is_bias {
                q.bc.value.copy_from_slice(vals);
            } else {
                q.wc.value.copy_from_slice(vals);
            }
            cls_loss(&cls_forward(&q, &v).unwrap(), label)
        };
        worst = worst.max(fd_max_err(analytic, &mut values, &mut loss));
    }
    worst
}
