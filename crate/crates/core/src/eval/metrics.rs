use serde::Serialize;

use crate::dataio::{ImageTensor, MaskTensor};
use crate::error::{Error, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricPair {
    pub psnr: f64,
    pub ssim: f64,
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1 / MSE)` over every channel of two `[0, 1]` images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(se / a.data().len() as f64))
}

/// PSNR restricted to pixels the mask marks as dropped.
pub fn psnr_dropped(a: &ImageTensor, b: &ImageTensor, mask: &MaskTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if (mask.height(), mask.width()) != (a.height(), a.width()) {
        return Err(Error::Shape("mask and image sizes differ".into()));
    }
    let c = a.channels();
    let (mut se, mut n) = (0.0, 0usize);
    for (p, &keep) in mask.data().iter().enumerate() {
        if keep == 0 {
            for ch in 0..c {
                let d = a.data()[p * c + ch] as f64 - b.data()[p * c + ch] as f64;
                se += d * d;
            }
            n += c;
        }
    }
    Ok(if n == 0 { PSNR_CAP } else { psnr_from_mse(se / n as f64) })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub(crate) fn gaussian_window() -> [f64; SSIM_WIN] {
    let r = (SSIM_WIN / 2) as f64;
    let mut w = [0.0; SSIM_WIN];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, no padding, averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|p| a.data()[p * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|p| b.data()[p * c + ch] as f64).collect();
        let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..h * w).map(f).collect() };
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&prod(&|p| pa[p] * pa[p]), h, w, &k);
        let e_bb = filter_valid(&prod(&|p| pb[p] * pb[p]), h, w, &k);
        let e_ab = filter_valid(&prod(&|p| pa[p] * pb[p]), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

pub fn metric_pair(restored: &ImageTensor, reference: &ImageTensor) -> Result<MetricPair> {
    Ok(MetricPair {
        psnr: psnr(restored, reference)?,
        ssim: ssim(restored, reference)?,
    })
}
