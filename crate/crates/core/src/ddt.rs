//! Deep descriptor transformation.
//!
//! Descriptors of every spatial position in a set of same-class feature maps
//! are pooled into one covariance; the leading eigenvector of that covariance
//! scores each position, and the positive region of the (upsampled) score map
//! gives the object box.

use crate::bbox::BoxXYWH;
use crate::components::largest_component;
use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;
use crate::tensor_io::{ClassifierWeights, FeatureMap};

/// Relative asymmetry tolerated in an accumulated second-moment matrix.
const SYMMETRY_TOL: f64 = 1e-9;

/// Streaming first and second moments of `d`-dimensional descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    pub d: usize,
    pub n_pos: u64,
    pub sum_x: Vec<f64>,
    /// Row-major `d x d`.
    pub sum_xxt: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(d: usize) -> Self {
        CovarianceAccumulator {
            d,
            n_pos: 0,
            sum_x: vec![0.0; d],
            sum_xxt: vec![0.0; d * d],
        }
    }

    pub fn accumulate(&mut self, fm: &FeatureMap) -> Result<()> {
        if fm.d != self.d {
            return Err(Error::DepthMismatch {
                expected: self.d,
                found: fm.d,
            });
        }
        let d = self.d;
        let mut x = vec![0.0f64; d];
        for desc in fm.descriptors() {
            for (xi, &v) in x.iter_mut().zip(desc) {
                *xi = v as f64;
            }
            for (s, &xi) in self.sum_x.iter_mut().zip(&x) {
                *s += xi;
            }
            for i in 0..d {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &mut self.sum_xxt[i * d + i..(i + 1) * d];
                for (s, &xj) in row.iter_mut().zip(&x[i..]) {
                    *s += xi * xj;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                self.sum_xxt[i * d + j] = self.sum_xxt[j * d + i];
            }
        }
        self.n_pos += fm.positions() as u64;
        Ok(())
    }

    /// Field-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if other.d != self.d {
            return Err(Error::DepthMismatch {
                expected: self.d,
                found: other.d,
            });
        }
        self.n_pos += other.n_pos;
        for (a, b) in self.sum_x.iter_mut().zip(&other.sum_x) {
            *a += b;
        }
        for (a, b) in self.sum_xxt.iter_mut().zip(&other.sum_xxt) {
            *a += b;
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n_pos as f64;
        self.sum_x.iter().map(|s| s / n).collect()
    }

    /// Population covariance `sum_xxt / n - mean mean^T`, symmetrized.
    pub fn covariance(&self) -> Result<Vec<f64>> {
        if self.n_pos < 2 {
            return Err(Error::TooFewPositions(self.n_pos));
        }
        let d = self.d;
        let scale = self.sum_xxt.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut asym = 0.0f64;
        for i in 0..d {
            for j in 0..i {
                asym = asym.max((self.sum_xxt[i * d + j] - self.sum_xxt[j * d + i]).abs());
            }
        }
        if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Asymmetric(asym));
        }
        let n = self.n_pos as f64;
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let sym = 0.5 * (self.sum_xxt[i * d + j] + self.sum_xxt[j * d + i]);
                cov[i * d + j] = sym / n - mean[i] * mean[j];
            }
        }
        Ok(cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalDirection {
    pub mean: Vec<f64>,
    /// Unit eigenvector of the largest covariance eigenvalue.
    pub p: Vec<f64>,
    pub eigenvalue: f64,
}

impl PrincipalDirection {
    pub fn depth(&self) -> usize {
        self.p.len()
    }

    pub fn negated(&self) -> Self {
        PrincipalDirection {
            mean: self.mean.clone(),
            p: self.p.iter().map(|v| -v).collect(),
            eigenvalue: self.eigenvalue,
        }
    }

    fn centered_score(&self, desc: &[f32]) -> f64 {
        desc.iter()
            .zip(&self.mean)
            .zip(&self.p)
            .map(|((&x, m), p)| (x as f64 - m) * p)
            .sum()
    }
}

/// Leading principal direction of the accumulated descriptors.
///
/// The returned vector carries a canonical sign (its largest-magnitude
/// component is positive, lowest index on ties). Orientation against the
/// data, which needs a second pass over the positions, is done by
/// [`orient_minority_positive`].
pub fn principal_direction(acc: &CovarianceAccumulator) -> Result<PrincipalDirection> {
    let cov = acc.covariance()?;
    let eig = jacobi_eigen(&cov, acc.d);
    let k = eig.largest();
    let mut p = eig.vector(k);
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut p {
        *v /= norm;
    }
    let mut pivot = 0;
    for i in 1..p.len() {
        if p[i].abs() > p[pivot].abs() {
            pivot = i;
        }
    }
    if p[pivot] < 0.0 {
        for v in &mut p {
            *v = -*v;
        }
    }
    Ok(PrincipalDirection {
        mean: acc.mean(),
        p,
        eigenvalue: eig.values[k].max(0.0),
    })
}

/// Counts positions whose centered projection onto `pd` is strictly positive.
pub fn count_positive<'a>(
    pd: &PrincipalDirection,
    maps: impl IntoIterator<Item = &'a FeatureMap>,
) -> Result<(u64, u64)> {
    let (mut pos, mut total) = (0u64, 0u64);
    for fm in maps {
        check_depth(pd.depth(), fm.d)?;
        for desc in fm.descriptors() {
            if pd.centered_score(desc) > 0.0 {
                pos += 1;
            }
            total += 1;
        }
    }
    Ok((pos, total))
}

/// Flips `pd` if more than half of the given positions project positively, so
/// the zero threshold keeps the minority side (the common object).
pub fn orient_minority_positive<'a>(
    pd: PrincipalDirection,
    maps: impl IntoIterator<Item = &'a FeatureMap>,
) -> Result<PrincipalDirection> {
    let (pos, total) = count_positive(&pd, maps)?;
    Ok(if 2 * pos > total { pd.negated() } else { pd })
}

/// Accumulates, fits and orients a direction over one class's maps.
pub fn fit_principal_direction(maps: &[FeatureMap]) -> Result<PrincipalDirection> {
    let d = maps.first().map(|m| m.d).ok_or(Error::TooFewPositions(0))?;
    let mut acc = CovarianceAccumulator::new(d);
    for fm in maps {
        acc.accumulate(fm)?;
    }
    let pd = principal_direction(&acc)?;
    orient_minority_positive(pd, maps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(Error::InvalidArgument(format!(
                "heat map {rows}x{cols} does not match {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("heat map has non-finite values".into()));
        }
        Ok(HeatMap { rows, cols, values })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_depth(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DepthMismatch { expected, found });
    }
    Ok(())
}

/// `H[i,j] = sum_k (G[i,j,k] - mean[k]) * p[k]`.
pub fn project_heatmap(fm: &FeatureMap, pd: &PrincipalDirection) -> Result<HeatMap> {
    check_depth(pd.depth(), fm.d)?;
    let values = fm.descriptors().map(|desc| pd.centered_score(desc)).collect();
    Ok(HeatMap {
        rows: fm.h,
        cols: fm.w,
        values,
    })
}

/// Class activation map: `H[i,j] = sum_k G[i,j,k] * W[class,k]`.
pub fn cam_heatmap(fm: &FeatureMap, cw: &ClassifierWeights, class_idx: usize) -> Result<HeatMap> {
    check_depth(cw.depth, fm.d)?;
    if class_idx >= cw.classes {
        return Err(Error::InvalidArgument(format!(
            "class index {class_idx} out of range for {} classes",
            cw.classes
        )));
    }
    let w = cw.row(class_idx);
    let values = fm
        .descriptors()
        .map(|desc| desc.iter().zip(w).map(|(&g, &wk)| g as f64 * wk as f64).sum())
        .collect();
    Ok(HeatMap {
        rows: fm.h,
        cols: fm.w,
        values,
    })
}

/// Corner-aligned source coordinate and blend weight along one axis.
fn sample_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize with corner alignment: output corners sample input corners.
pub fn upsample_bilinear(hm: &HeatMap, out_rows: usize, out_cols: usize) -> Result<HeatMap> {
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size {out_rows}x{out_cols} must be positive"
        )));
    }
    let rs = sample_axis(out_rows, hm.rows);
    let cs = sample_axis(out_cols, hm.cols);
    let (lo, hi) = (hm.min(), hm.max());
    let mut values = Vec::with_capacity(out_rows * out_cols);
    for &(r0, r1, tr) in &rs {
        for &(c0, c1, tc) in &cs {
            let top = hm.at(r0, c0) * (1.0 - tc) + hm.at(r0, c1) * tc;
            let bottom = hm.at(r1, c0) * (1.0 - tc) + hm.at(r1, c1) * tc;
            let v = top * (1.0 - tr) + bottom * tr;
            // keep convex combinations inside the input range despite rounding
            values.push(v.clamp(lo, hi));
        }
    }
    Ok(HeatMap {
        rows: out_rows,
        cols: out_cols,
        values,
    })
}

/// Zero threshold, 8-connected labeling, tight box around the largest
/// component. `None` when no value is positive.
pub fn extract_box(hm: &HeatMap) -> Option<BoxXYWH> {
    let mask: Vec<bool> = hm.values.iter().map(|&v| v > 0.0).collect();
    largest_component(&mask, hm.rows, hm.cols).map(|c| c.bounding_box())
}

/// Rescales a box from the square network input to original image pixels.
pub fn map_box_to_image(b: &BoxXYWH, net_input_size: u32, orig_w: u32, orig_h: u32) -> BoxXYWH {
    let net = net_input_size as f64;
    let (w, h) = (orig_w as f64, orig_h as f64);
    b.scaled(w / net, h / net).clamped(w, h, 1.0)
}
