//! Pixel-domain noise synthesis.
//!
//! Every function is a pure function of `(image, parameters, seed)`: the RNG
//! is created inside the call from `seed`, so repeated calls are bit-identical.
//! Levels quoted on the 0–255 scale are divided by 255 before use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::dataio::{reflect, ImageTensor};
use crate::error::{Error, Result};

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")))
    }
}

/// Additive white Gaussian noise with standard deviation `sigma / 255`.
pub fn apply_gaussian(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    non_negative("sigma", sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = rng_for(seed);
    let std = sigma / 255.0;
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + std * n).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Per-pixel, per-channel standard deviation over a `window`×`window`
/// reflect-padded neighbourhood.
pub fn local_std_map(img: &ImageTensor, window: usize) -> Result<Vec<f64>> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Param(format!("window must be odd and >= 3, got {window}")));
    }
    let (h, w, c) = img.shape();
    let r = (window / 2) as isize;
    let area = (window * window) as f64;
    // Row-wise sliding sums, then column-wise sliding sums.
    let mut row_s = vec![0.0f64; h * w * c];
    let mut row_q = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let (mut s, mut q) = (0.0, 0.0);
                for dx in -r..=r {
                    let v = img.get(y, reflect(x as isize + dx, w), k) as f64;
                    s += v;
                    q += v * v;
                }
                row_s[(y * w + x) * c + k] = s;
                row_q[(y * w + x) * c + k] = q;
            }
        }
    }
    let mut out = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let (mut s, mut q) = (0.0, 0.0);
                for dy in -r..=r {
                    let i = (reflect(y as isize + dy, h) * w + x) * c + k;
                    s += row_s[i];
                    q += row_q[i];
                }
                let mean = s / area;
                out[(y * w + x) * c + k] = (q / area - mean * mean).max(0.0).sqrt();
            }
        }
    }
    Ok(out)
}

/// Unclipped noise field whose per-pixel standard deviation is
/// `k · local_std`.
pub fn local_var_noise_field(img: &ImageTensor, k: f64, window: usize, seed: u64) -> Result<Vec<f64>> {
    non_negative("k", k)?;
    let stds = local_std_map(img, window)?;
    let mut rng = rng_for(seed);
    Ok(stds
        .into_iter()
        .map(|s| {
            let n: f64 = rng.sample(StandardNormal);
            k * s * n
        })
        .collect())
}

/// Gaussian noise scaled by the local standard deviation of the image.
pub fn apply_local_var_gaussian(img: &ImageTensor, k: f64, window: usize, seed: u64) -> Result<ImageTensor> {
    let field = local_var_noise_field(img, k, window, seed)?;
    let mut out = img.clone();
    for (v, n) in out.data_mut().iter_mut().zip(field) {
        *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Adds a `Poisson(lambda_mean)` count on the 0–255 scale and saturates.
pub fn apply_poisson(img: &ImageTensor, lambda_mean: f64, seed: u64) -> Result<ImageTensor> {
    non_negative("lambda_mean", lambda_mean)?;
    if lambda_mean == 0.0 {
        return Ok(img.clone());
    }
    let dist = Poisson::new(lambda_mean).map_err(|e| Error::Param(e.to_string()))?;
    let mut rng = rng_for(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let count: f64 = dist.sample(&mut rng);
        *v = ((*v as f64 * 255.0 + count).clamp(0.0, 255.0) / 255.0) as f32;
    }
    Ok(out)
}

/// Multiplicative Gaussian speckle: `x + x·n`, `n ~ N(0, (v/255)²)`.
pub fn apply_speckle(img: &ImageTensor, v: f64, seed: u64) -> Result<ImageTensor> {
    non_negative("v", v)?;
    if v == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, v / 255.0).map_err(|e| Error::Param(e.to_string()))?;
    let mut rng = rng_for(seed);
    let mut out = img.clone();
    for p in out.data_mut() {
        let n = normal.sample(&mut rng);
        let x = *p as f64;
        *p = (x + x * n).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Literal uniform speckle: every value multiplied by `U(0, 1)`.
pub fn apply_speckle_uniform(img: &ImageTensor, seed: u64) -> Result<ImageTensor> {
    let mut rng = rng_for(seed);
    let mut out = img.clone();
    for p in out.data_mut() {
        let u: f64 = rng.random();
        *p = (*p as f64 * u) as f32;
    }
    Ok(out)
}

/// Impulse noise: salt with probability `r/2`, pepper with probability `r/2`.
///
/// With `per_channel = false` a hit replaces every channel of the pixel.
pub fn apply_salt_pepper(img: &ImageTensor, r: f64, per_channel: bool, seed: u64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Param(format!(
            "salt-and-pepper ratio must lie in [0,1], got {r}"
        )));
    }
    let mut out = img.clone();
    if r == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed);
    let half = r / 2.0;
    let group = if per_channel { 1 } else { img.channels() };
    for px in out.data_mut().chunks_mut(group) {
        let u: f64 = rng.random();
        let value = if u < half {
            1.0
        } else if u < r {
            0.0
        } else {
            continue;
        };
        px.fill(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual_stats(a: &ImageTensor, b: &ImageTensor) -> (f64, f64) {
        let n = a.data().len() as f64;
        let d: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x as f64 - *y as f64)
            .collect();
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    fn mid_gray_megapixel() -> ImageTensor {
        ImageTensor::filled(1000, 1000, 1, 0.5)
    }

    #[test]
    fn zero_levels_are_identity() {
        let img = ImageTensor::from_fn(8, 8, 3, |y, x, c| ((y + x + c) % 7) as f32 / 7.0);
        assert_eq!(apply_gaussian(&img, 0.0, 3).unwrap(), img);
        assert_eq!(apply_local_var_gaussian(&img, 0.0, 7, 3).unwrap(), img);
        assert_eq!(apply_poisson(&img, 0.0, 3).unwrap(), img);
        assert_eq!(apply_speckle(&img, 0.0, 3).unwrap(), img);
        assert_eq!(apply_salt_pepper(&img, 0.0, false, 3).unwrap(), img);
    }

    #[test]
    fn negative_levels_rejected() {
        let img = ImageTensor::filled(4, 4, 1, 0.5);
        assert!(matches!(apply_gaussian(&img, -1.0, 0), Err(Error::Param(_))));
        assert!(matches!(apply_poisson(&img, -0.5, 0), Err(Error::Param(_))));
        assert!(matches!(apply_speckle(&img, -2.0, 0), Err(Error::Param(_))));
        assert!(matches!(
            apply_local_var_gaussian(&img, -1.0, 7, 0),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            apply_local_var_gaussian(&img, 1.0, 4, 0),
            Err(Error::Param(_))
        ));
        assert!(matches!(apply_salt_pepper(&img, 1.5, false, 0), Err(Error::Param(_))));
    }

    #[test]
    fn gaussian_residual_std_matches_sigma() {
        let img = mid_gray_megapixel();
        let out = apply_gaussian(&img, 25.0, 11).unwrap();
        let (_, std) = residual_stats(&out, &img);
        assert!((std / (25.0 / 255.0) - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn gaussian_psnr_on_mid_gray() {
        let img = ImageTensor::filled(512, 512, 1, 0.5);
        let out = apply_gaussian(&img, 25.0, 5).unwrap();
        let mse: f64 = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / img.data().len() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!((psnr - 20.17).abs() < 0.1, "psnr {psnr}");
    }

    #[test]
    fn local_variance_flat_image_is_identity() {
        let img = ImageTensor::filled(16, 16, 3, 0.3);
        assert_eq!(apply_local_var_gaussian(&img, 2.0, 7, 1).unwrap(), img);
    }

    #[test]
    fn local_std_matches_sliding_window_oracle() {
        let img = ImageTensor::from_fn(9, 11, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f32 / 10.0);
        let got = local_std_map(&img, 5).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                for c in 0..3 {
                    let mut vals = Vec::new();
                    for dy in -2isize..=2 {
                        for dx in -2isize..=2 {
                            vals.push(img.get(reflect(y as isize + dy, 9), reflect(x as isize + dx, 11), c) as f64);
                        }
                    }
                    let m = vals.iter().sum::<f64>() / 25.0;
                    let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 25.0).sqrt();
                    assert!((got[(y * 11 + x) * 3 + c] - s).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn local_variance_noise_follows_std_map_on_checkerboard() {
        let img = ImageTensor::from_fn(200, 200, 1, |y, x, _| ((y + x) % 2) as f32);
        let stds = local_std_map(&img, 3).unwrap();
        // Brute-force 3x3 oracle: 5 of one value and 4 of the other.
        let expect = (20.0f64 / 81.0).sqrt();
        assert!(stds.iter().all(|s| (s - expect).abs() < 1e-9));
        let mut ratio_sq = 0.0;
        let mut n = 0.0;
        for seed in 0..25 {
            let field = local_var_noise_field(&img, 1.0, 3, seed).unwrap();
            for (f, s) in field.iter().zip(&stds) {
                ratio_sq += (f / s).powi(2);
                n += 1.0;
            }
        }
        let empirical = (ratio_sq / n).sqrt();
        assert!((empirical - 1.0).abs() < 0.05, "{empirical}");
    }

    #[test]
    fn poisson_moments() {
        let img = ImageTensor::filled(1000, 1000, 1, 0.0);
        let out = apply_poisson(&img, 10.0, 17).unwrap();
        let (mean, std) = residual_stats(&out, &img);
        assert!((mean / (10.0 / 255.0) - 1.0).abs() < 0.01, "mean {mean}");
        assert!(
            (std * std / (10.0 / 255.0f64.powi(2)) - 1.0).abs() < 0.02,
            "var {}",
            std * std
        );
    }

    #[test]
    fn poisson_saturates_white() {
        let img = ImageTensor::filled(64, 64, 3, 1.0);
        let out = apply_poisson(&img, 10.0, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn speckle_statistics() {
        let zero = ImageTensor::filled(32, 32, 3, 0.0);
        assert!(apply_speckle(&zero, 40.0, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let img = mid_gray_megapixel();
        let out = apply_speckle(&img, 50.0, 23).unwrap();
        let (_, std) = residual_stats(&out, &img);
        assert!((std / (0.5 * 50.0 / 255.0) - 1.0).abs() < 0.02, "std {std}");
        let uni = apply_speckle_uniform(&img, 4).unwrap();
        assert!(uni.data().iter().all(|&v| (0.0..=0.5).contains(&v)));
    }

    #[test]
    fn salt_pepper_counts() {
        let img = mid_gray_megapixel();
        let full = apply_salt_pepper(&ImageTensor::filled(20, 20, 3, 0.5), 1.0, false, 8).unwrap();
        assert!(full.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let out = apply_salt_pepper(&img, 0.3, false, 9).unwrap();
        let salt = out.data().iter().filter(|&&v| v == 1.0).count() as f64;
        let pepper = out.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let n = img.data().len() as f64;
        assert!(((salt + pepper) / n - 0.3).abs() < 0.005);
        assert!((salt / pepper - 1.0).abs() < 0.02);
    }

    #[test]
    fn salt_pepper_joint_channels() {
        let img = ImageTensor::filled(50, 50, 3, 0.5);
        let out = apply_salt_pepper(&img, 0.5, false, 1).unwrap();
        for px in out.data().chunks(3) {
            assert!(px.iter().all(|&v| v == px[0]));
        }
    }

    #[test]
    fn same_seed_same_output() {
        let img = ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y * x + c) % 9) as f32 / 9.0);
        assert_eq!(
            apply_gaussian(&img, 30.0, 5).unwrap(),
            apply_gaussian(&img, 30.0, 5).unwrap()
        );
        assert_ne!(
            apply_gaussian(&img, 30.0, 5).unwrap(),
            apply_gaussian(&img, 30.0, 6).unwrap()
        );
        assert_eq!(
            apply_poisson(&img, 5.0, 5).unwrap(),
            apply_poisson(&img, 5.0, 5).unwrap()
        );
    }

    #[test]
    fn independent_seeds_uncorrelated() {
        let img = mid_gray_megapixel();
        let a = apply_gaussian(&img, 25.0, 100).unwrap();
        let b = apply_gaussian(&img, 25.0, 101).unwrap();
        let ra: Vec<f64> = a.data().iter().map(|v| *v as f64 - 0.5).collect();
        let rb: Vec<f64> = b.data().iter().map(|v| *v as f64 - 0.5).collect();
        let dot: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
        let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() < 0.01);
    }
}
