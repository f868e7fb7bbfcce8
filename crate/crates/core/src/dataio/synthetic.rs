//! Procedural test scenes: smooth shading, oriented texture and a handful of
//! flat shapes with soft edges. Used for desk-scale runs where no photo
//! dataset is available.

use rand::Rng;

use super::ImageTensor;
use crate::rng;

struct Shape {
    disk: bool,
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    color: [f32; 3],
}

impl Shape {
    /// Signed distance-like coverage in `[0, 1]` with a one-pixel ramp.
    fn coverage(&self, y: f32, x: f32) -> f32 {
        let d = if self.disk {
            let dy = (y - self.cy) / self.ry;
            let dx = (x - self.cx) / self.rx;
            ((dy * dy + dx * dx).sqrt() - 1.0) * self.ry.min(self.rx)
        } else {
            ((y - self.cy).abs() - self.ry).max((x - self.cx).abs() - self.rx)
        };
        (0.5 - d).clamp(0.0, 1.0)
    }
}

/// One RGB scene of `size`×`size`, fully determined by `seed`.
pub fn toy_image(seed: u64, size: usize) -> ImageTensor {
    let mut r = rng::stream(seed, &[0x70_79]);
    let s = size as f32;
    let c0: [f32; 3] = std::array::from_fn(|_| r.random_range(0.25..0.75));
    let c1: [f32; 3] = std::array::from_fn(|_| r.random_range(0.25..0.75));
    let angle: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.0..std::f32::consts::TAU),
                r.random_range(0.05..0.35),
                r.random_range(0.0..6.3),
                r.random_range(0.02..0.06),
            )
        })
        .collect();
    let shapes: Vec<Shape> = (0..r.random_range(4..8))
        .map(|_| Shape {
            disk: r.random_bool(0.5),
            cy: r.random_range(0.0..s),
            cx: r.random_range(0.0..s),
            ry: r.random_range(s * 0.06..s * 0.25),
            rx: r.random_range(s * 0.06..s * 0.25),
            color: std::array::from_fn(|_| r.random_range(0.15..0.85)),
        })
        .collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let (yf, xf) = (y as f32, x as f32);
        let t = ((xf * ca + yf * sa) / s + 1.0) * 0.5;
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for &(dir, freq, phase, amp) in &waves {
            v += amp * (freq * (xf * dir.cos() + yf * dir.sin()) + phase + c as f32 * 0.4).sin();
        }
        for sh in &shapes {
            let a = sh.coverage(yf, xf);
            v = v * (1.0 - a) + sh.color[c] * a;
        }
        v.clamp(0.1, 0.9)
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn toy_set(count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| toy_image(rng::derive_seed(seed, &[i as u64]), size))
        .collect()
}
