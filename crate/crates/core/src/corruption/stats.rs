//! Monte-Carlo checks that each noise family has the statistics it claims.

use serde::Serialize;

use super::noise::{apply_gaussian, apply_poisson, apply_salt_pepper, apply_speckle};
use crate::dataio::ImageTensor;
use crate::error::Result;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseCheck {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    /// Absolute tolerance on `|measured − expected|`.
    pub tolerance: f64,
    pub pass: bool,
}

impl NoiseCheck {
    fn new(name: &str, measured: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            expected,
            tolerance,
            pass: (measured - expected).abs() <= tolerance,
        }
    }
}

fn moments(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in vals {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    (mean, m2 / (n - 1.0))
}

/// Runs every check on single-channel images of `side`×`side` pixels.
///
/// Tolerances: residual std within 2%, Poisson mean within 1% and variance
/// within 2%, salt-and-pepper fraction within ±0.005 and salt:pepper ratio
/// within ±0.02, all multiplied by `tolerance_scale`.
pub fn noise_statistics(side: usize, seed: u64, tolerance_scale: f64) -> Result<Vec<NoiseCheck>> {
    let gray = ImageTensor::filled(side, side, 1, 0.5);
    let zero = ImageTensor::filled(side, side, 1, 0.0);
    let s = tolerance_scale;
    let mut out = Vec::new();

    let g = apply_gaussian(&gray, 25.0, derive_seed(seed, &[1]))?;
    let (_, var) = moments(g.data().iter().map(|&v| v as f64 - 0.5));
    let target = 25.0 / 255.0;
    out.push(NoiseCheck::new(
        "gaussian sigma=25 residual std",
        var.sqrt(),
        target,
        0.02 * target * s,
    ));

    let sp = apply_salt_pepper(&gray, 0.3, false, derive_seed(seed, &[2]))?;
    let salt = sp.data().iter().filter(|&&v| v == 1.0).count() as f64;
    let pepper = sp.data().iter().filter(|&&v| v == 0.0).count() as f64;
    let n = sp.data().len() as f64;
    out.push(NoiseCheck::new(
        "salt_pepper r=0.3 affected fraction",
        (salt + pepper) / n,
        0.3,
        0.005 * s,
    ));
    out.push(NoiseCheck::new(
        "salt_pepper r=0.3 salt:pepper ratio",
        salt / pepper,
        1.0,
        0.02 * s,
    ));

    let po = apply_poisson(&zero, 10.0, derive_seed(seed, &[3]))?;
    let (mean, var) = moments(po.data().iter().map(|&v| v as f64));
    let m_target = 10.0 / 255.0;
    let v_target = 10.0 / (255.0 * 255.0);
    out.push(NoiseCheck::new(
        "poisson lambda=10 mean",
        mean,
        m_target,
        0.01 * m_target * s,
    ));
    out.push(NoiseCheck::new(
        "poisson lambda=10 variance",
        var,
        v_target,
        0.02 * v_target * s,
    ));

    let sk = apply_speckle(&gray, 50.0, derive_seed(seed, &[4]))?;
    let (_, var) = moments(sk.data().iter().map(|&v| v as f64 - 0.5));
    let target = 0.5 * 50.0 / 255.0;
    out.push(NoiseCheck::new(
        "speckle v=50 residual std",
        var.sqrt(),
        target,
        0.02 * target * s,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_one_megapixel() {
        let checks = noise_statistics(1000, 7, 1.0).unwrap();
        assert_eq!(checks.len(), 6);
        for c in &checks {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn moments_match_two_pass() {
        let xs = [1.0, 4.0, 2.0, 8.0];
        let (m, v) = moments(xs.iter().copied());
        assert_eq!(m, 3.75);
        let direct = xs.iter().map(|x| (x - 3.75) * (x - 3.75)).sum::<f64>() / 3.0;
        assert!((v - direct).abs() < 1e-12);
    }
}
