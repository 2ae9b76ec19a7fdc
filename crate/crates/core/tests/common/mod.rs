//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use microgait::gp::{Hyperparams, KernelKind};

/// Kernel evaluated straight from the closed forms on unit-box inputs.
pub fn kernel(hp: &Hyperparams, a: [f64; 2], b: [f64; 2]) -> f64 {
    let shapes: &[&str] = match hp.kernel {
        KernelKind::Se => &["se"],
        KernelKind::Rq => &["rq"],
        KernelKind::M32 => &["m32"],
        KernelKind::M52 => &["m52"],
        KernelKind::TwoMat => &["m52", "m32"],
    };
    let mut total = 0.0;
    for (shape, c) in shapes.iter().zip(&hp.components) {
        let dx = (a[0] - b[0]) / c.length_scales[0];
        let dy = (a[1] - b[1]) / c.length_scales[1];
        let r = (dx * dx + dy * dy).sqrt();
        let corr = match *shape {
            "se" => (-r * r / 2.0).exp(),
            "rq" => (1.0 + r * r / (2.0 * hp.rq_alpha)).powf(-hp.rq_alpha),
            "m32" => (1.0 + 3f64.sqrt() * r) * (-(3f64.sqrt()) * r).exp(),
            _ => (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp(),
        };
        total += c.signal_std * c.signal_std * corr;
    }
    total
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting and
/// returns `(x, ln|det A|)`.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> (Vec<f64>, f64) {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    let mut log_det = 0.0;
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, p);
        let pivot = m[col][col];
        log_det += pivot.abs().ln();
        for row in col + 1..n {
            let f = m[row][col] / pivot;
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    (x, log_det)
}

pub struct DensePosterior {
    pub mean: f64,
    pub variance: f64,
    pub lml: f64,
}

/// Posterior at `q` and log marginal likelihood by dense solves.
pub fn dense_posterior(hp: &Hyperparams, x: &[[f64; 2]], y: &[f64], q: [f64; 2], jitter: f64) -> DensePosterior {
    let n = x.len();
    let noise = hp.noise_std * hp.noise_std + jitter;
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| kernel(hp, x[i], x[j]) + if i == j { noise } else { 0.0 }).collect())
        .collect();
    let r: Vec<f64> = y.iter().map(|v| v - hp.mean_const).collect();
    let (alpha, log_det) = solve(&k, &r);
    let kq: Vec<f64> = x.iter().map(|&xi| kernel(hp, q, xi)).collect();
    let (v, _) = solve(&k, &kq);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    DensePosterior {
        mean: hp.mean_const + dot(&kq, &alpha),
        variance: kernel(hp, q, q) - dot(&kq, &v),
        lml: -0.5 * dot(&r, &alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln(),
    }
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// Lower Cholesky factor by the textbook recurrence.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}
