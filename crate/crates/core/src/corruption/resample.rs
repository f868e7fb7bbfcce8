//! Separable interpolation used by the downscale corruption.
//!
//! Sampling follows the half-pixel-centre convention
//! (`src = (dst + 0.5) · in/out − 0.5`) with replicated borders and no
//! anti-aliasing prefilter, so a 2× bilinear reduction averages each 2×2 block.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataio::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Bicubic,
    Lanczos,
    Bilinear,
    Hamming,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Bicubic, Kernel::Lanczos, Kernel::Bilinear, Kernel::Hamming];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Bicubic => "bicubic",
            Kernel::Lanczos => "lanczos",
            Kernel::Bilinear => "bilinear",
            Kernel::Hamming => "hamming",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown interpolation kernel '{s}'")))
    }

    fn support(self) -> f64 {
        match self {
            Kernel::Bilinear | Kernel::Hamming => 1.0,
            Kernel::Bicubic => 2.0,
            Kernel::Lanczos => 4.0,
        }
    }

    fn weight(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Kernel::Bilinear => (1.0 - x).max(0.0),
            Kernel::Bicubic => {
                const A: f64 = -0.75;
                if x < 1.0 {
                    ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
                } else {
                    0.0
                }
            }
            Kernel::Lanczos => {
                if x < 4.0 {
                    sinc(x) * sinc(x / 4.0)
                } else {
                    0.0
                }
            }
            Kernel::Hamming => {
                if x < 1.0 {
                    sinc(x) * (0.54 + 0.46 * (PI * x).cos())
                } else {
                    0.0
                }
            }
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Per-output-sample tap list `(first_index, weights)`.
fn taps(kernel: Kernel, input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    let support = kernel.support();
    (0..output)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            let lo = (centre - support).floor() as isize + 1;
            let hi = (centre + support).ceil() as isize - 1;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| {
                    let w = kernel.weight(centre - i as f64);
                    (i.clamp(0, input as isize - 1) as usize, w)
                })
                .filter(|(_, w)| *w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|(_, w)| w).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resizes to `out_h`×`out_w` with the given kernel. Values are not clipped.
pub fn resize(img: &ImageTensor, out_h: usize, out_w: usize, kernel: Kernel) -> ImageTensor {
    let (h, w, c) = img.shape();
    let tx = taps(kernel, w, out_w);
    let ty = taps(kernel, h, out_h);
    let mut horiz = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (ox, t) in tx.iter().enumerate() {
            for k in 0..c {
                horiz[(y * out_w + ox) * c + k] = t.iter().map(|&(x, wt)| wt * img.get(y, x, k) as f64).sum();
            }
        }
    }
    let mut data = vec![0.0f32; out_h * out_w * c];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..out_w {
            for k in 0..c {
                let v: f64 = t.iter().map(|&(y, wt)| wt * horiz[(y * out_w + ox) * c + k]).sum();
                data[(oy * out_w + ox) * c + k] = v as f32;
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data).expect("finite interpolation")
}

/// Integer-factor reduction with `kernel`.
pub fn downscale(img: &ImageTensor, scale: usize, kernel: Kernel) -> Result<ImageTensor> {
    check_scale(img, scale)?;
    Ok(resize(img, img.height() / scale, img.width() / scale, kernel))
}

fn check_scale(img: &ImageTensor, scale: usize) -> Result<()> {
    if !(2..=4).contains(&scale) {
        return Err(Error::Param(format!("scale must be 2, 3 or 4, got {scale}")));
    }
    if !img.height().is_multiple_of(scale) || !img.width().is_multiple_of(scale) {
        return Err(Error::Param(format!(
            "{}x{} image is not divisible by scale {scale}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Downscales with `kernel`, then restores the original grid with bicubic
/// interpolation; output is clipped to `[0, 1]`.
pub fn apply_downscale(img: &ImageTensor, scale: usize, kernel: Kernel) -> Result<ImageTensor> {
    let small = downscale(img, scale, kernel)?;
    Ok(resize(&small, img.height(), img.width(), Kernel::Bicubic).clamped())
}
