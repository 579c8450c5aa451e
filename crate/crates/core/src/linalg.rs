//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.

/// Eigenpairs of a symmetric matrix. `vectors` is row-major `n x n` with the
/// eigenvector for `values[k]` stored in column `k`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.vectors[i * self.n + k]).collect()
    }

    /// Index of the largest eigenvalue; equal values resolve to the lowest index.
    pub fn largest(&self) -> usize {
        let mut best = 0;
        for k in 1..self.n {
            if self.values[k] > self.values[best] {
                best = k;
            }
        }
        best
    }
}

const MAX_SWEEPS: usize = 100;

/// Runs cyclic Jacobi on the symmetric row-major matrix `a` (`n x n`).
///
/// Pivots are visited in row-major upper-triangle order, so the result is a
/// deterministic function of the input. Only the upper triangle is read.
pub fn jacobi_eigen(a: &[f64], n: usize) -> SymmetricEigen {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    let mut m = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            m[i * n + j] = m[j * n + i];
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let mut sweeps = 0;
    if scale > 0.0 {
        let tol = scale * f64::EPSILON * 1e-2;
        while sweeps < MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
                .map(|(p, q)| m[p * n + q] * m[p * n + q])
                .sum();
            if off.sqrt() <= tol {
                break;
            }
            sweeps += 1;
            for p in 0..n {
                for q in (p + 1)..n {
                    rotate(&mut m, &mut v, n, p, q);
                }
            }
        }
    }

    SymmetricEigen {
        n,
        values: (0..n).map(|i| m[i * n + i]).collect(),
        vectors: v,
        sweeps,
    }
}

fn rotate(m: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = m[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = m[p * n + p];
    let aqq = m[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    m[p * n + p] = app - t * apq;
    m[q * n + q] = aqq + t * apq;
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = m[r * n + p];
        let arq = m[r * n + q];
        let new_rp = arp - s * (arq + tau * arp);
        let new_rq = arq + s * (arp - tau * arq);
        m[r * n + p] = new_rp;
        m[p * n + r] = new_rp;
        m[r * n + q] = new_rq;
        m[q * n + r] = new_rq;
    }
    for r in 0..n {
        let vrp = v[r * n + p];
        let vrq = v[r * n + q];
        v[r * n + p] = vrp - s * (vrq + tau * vrp);
        v[r * n + q] = vrq + s * (vrp - tau * vrq);
    }
}
