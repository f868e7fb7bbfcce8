//! Monte-Carlo check that Bernoulli mixing of two i.i.d. Gaussian samples
//! keeps the Gaussian's mean and per-coordinate variance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Case {
    pub mu: Vec<f64>,
    /// Row-major `d×d` covariance.
    pub sigma: Vec<f64>,
    pub p: f64,
}

impl Lemma1Case {
    pub fn diagonal(mu: &[f64], var: &[f64], p: f64) -> Self {
        let d = mu.len();
        let mut sigma = vec![0.0; d * d];
        for (i, v) in var.iter().enumerate() {
            sigma[i * d + i] = *v;
        }
        Self {
            mu: mu.to_vec(),
            sigma,
            p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub case: Lemma1Case,
    pub samples: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    /// ‖mean − μ‖∞.
    pub mean_err: f64,
    pub mean_tol: f64,
    /// Largest ratio of covariance error to its per-element tolerance.
    pub cov_ratio: f64,
    pub pass: bool,
}

/// Lower-triangular `L` with `L·Lᵀ = Σ`, tolerating zero pivots.
pub fn cholesky_psd(sigma: &[f64], d: usize) -> Result<Vec<f64>> {
    if sigma.len() != d * d {
        return Err(Error::Shape(format!(
            "covariance has {} entries, expected {}",
            sigma.len(),
            d * d
        )));
    }
    let scale = (0..d).map(|i| sigma[i * d + i].abs()).fold(0.0, f64::max).max(1.0);
    let eps = 1e-12 * scale;
    for i in 0..d {
        for j in 0..i {
            if (sigma[i * d + j] - sigma[j * d + i]).abs() > eps {
                return Err(Error::Param("covariance is not symmetric".into()));
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let pivot = sigma[j * d + j] - (0..j).map(|k| l[j * d + k] * l[j * d + k]).sum::<f64>();
        if pivot < -eps {
            return Err(Error::Param("covariance is not positive semidefinite".into()));
        }
        if pivot <= eps {
            for i in j + 1..d {
                let rest = sigma[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
                if rest.abs() > eps.sqrt() {
                    return Err(Error::Param("covariance is not positive semidefinite".into()));
                }
            }
            continue;
        }
        let ljj = pivot.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let s = sigma[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            l[i * d + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Draws `samples` mixed vectors `b⊙a + (1−b)⊙a'` with `a, a' ~ N(μ, Σ)`
/// and compares their moments to `(μ, Σ)`.
///
/// Tolerances are `scale·4·max(diag Σ)^½/√n` on the mean and
/// `scale·5·√((ΣᵢᵢΣⱼⱼ + Σᵢⱼ²)/n)` per covariance element. A zero tolerance
/// passes only on an exact match.
pub fn verify_lemma1(case: &Lemma1Case, samples: usize, seed: u64, tolerance_scale: f64) -> Result<Lemma1Report> {
    let d = case.mu.len();
    if d == 0 {
        return Err(Error::Param("mean vector is empty".into()));
    }
    if !(0.0..=1.0).contains(&case.p) {
        return Err(Error::Param(format!("mixing probability {} outside [0, 1]", case.p)));
    }
    if samples < 2 {
        return Err(Error::Param("need at least 2 samples".into()));
    }
    let l = cholesky_psd(&case.sigma, d)?;
    let mut r = rng::stream(seed, &[0x1e33a]);
    let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let e: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| case.mu[i] + (0..=i).map(|k| l[i * d + k] * e[k]).sum::<f64>())
            .collect()
    };
    // Welford updates keep a constant stream's mean exact.
    let mut mean = vec![0.0; d];
    let mut comoment = vec![0.0; d * d];
    for n in 1..=samples {
        let a = draw(&mut r);
        let b = draw(&mut r);
        let mixed: Vec<f64> = (0..d)
            .map(|i| if r.random_bool(case.p) { a[i] } else { b[i] })
            .collect();
        let before: Vec<f64> = (0..d).map(|i| mixed[i] - mean[i]).collect();
        for i in 0..d {
            mean[i] += before[i] / n as f64;
        }
        for i in 0..d {
            for j in 0..d {
                comoment[i * d + j] += before[i] * (mixed[j] - mean[j]);
            }
        }
    }
    let n = samples as f64;
    let cov: Vec<f64> = comoment.iter().map(|c| c / (n - 1.0)).collect();
    let mean_err = mean
        .iter()
        .zip(&case.mu)
        .map(|(m, mu)| (m - mu).abs())
        .fold(0.0, f64::max);
    let max_var = (0..d).map(|i| case.sigma[i * d + i]).fold(0.0, f64::max);
    let mean_tol = tolerance_scale * 4.0 * max_var.sqrt() / n.sqrt();
    let mut cov_ratio: f64 = 0.0;
    let mut cov_pass = true;
    for i in 0..d {
        for j in 0..d {
            let s = &case.sigma;
            let tol = tolerance_scale * 5.0 * ((s[i * d + i] * s[j * d + j] + s[i * d + j].powi(2)) / n).sqrt();
            let err = (cov[i * d + j] - s[i * d + j]).abs();
            if err > tol {
                cov_pass = false;
            }
            if tol > 0.0 {
                cov_ratio = cov_ratio.max(err / tol);
            } else if err > 0.0 {
                cov_ratio = f64::INFINITY;
            }
        }
    }
    Ok(Lemma1Report {
        case: case.clone(),
        samples,
        mean,
        cov,
        mean_err,
        mean_tol,
        cov_ratio,
        pass: mean_err <= mean_tol && cov_pass,
    })
}

/// Diagonal-covariance cases over `p ∈ {0.1, 0.3, 0.5, 0.9}`, plus a
/// degenerate zero covariance.
pub fn lemma1_grid() -> Vec<Lemma1Case> {
    vec![
        Lemma1Case::diagonal(&[0.0, 0.0], &[1.0, 1.0], 0.5),
        Lemma1Case::diagonal(&[3.0, -1.0], &[4.0, 9.0], 0.3),
        Lemma1Case::diagonal(&[0.5, -2.0, 1.0, 0.0], &[0.25, 1.0, 2.0, 0.5], 0.1),
        Lemma1Case::diagonal(&[0.5, -2.0, 1.0, 0.0], &[0.25, 1.0, 2.0, 0.5], 0.5),
        Lemma1Case::diagonal(&[0.5, -2.0, 1.0, 0.0], &[0.25, 1.0, 2.0, 0.5], 0.9),
        Lemma1Case::diagonal(&[-1.0, 4.0, 0.0], &[3.0, 0.1, 1.0], 0.9),
        Lemma1Case::diagonal(&[1.5, -0.5], &[0.0, 0.0], 0.5),
    ]
}
