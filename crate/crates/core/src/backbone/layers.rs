//! Layer definitions shared by parameter creation and forward passes.
//!
//! Every network is written once against a [`ParamSource`]. At build time
//! the source creates and records fresh tensors; afterwards it hands back the
//! graph variables already bound for the group, in the same order.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BackboneConfig, BackboneKind};
use crate::autograd::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in ±√(3/fan_in).
    FanIn(usize),
    /// Normal(0, 0.02²) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

pub(crate) trait ParamSource<T: Real> {
    fn fetch(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], init: Init) -> Var;
}

/// Creates parameters on first use.
pub(crate) struct Creator<T> {
    pub rng: ChaCha8Rng,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSource<T> for Creator<T> {
    fn fetch(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], init: Init) -> Var {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::TruncNormal => {
                let normal = Normal::new(0.0, 0.02).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 0.04 {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::new(shape.to_vec(), data.into_iter().map(T::from_f64_lossy).collect());
        self.names.push(name.to_string());
        self.tensors.push(t.clone());
        g.param(t)
    }
}

/// Replays already-bound variables in creation order.
pub(crate) struct Cursor<'a> {
    pub vars: &'a [Var],
    pub pos: usize,
}

impl<T: Real> ParamSource<T> for Cursor<'_> {
    fn fetch(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], _init: Init) -> Var {
        let v = *self
            .vars
            .get(self.pos)
            .unwrap_or_else(|| panic!("parameter list exhausted at {name}"));
        assert_eq!(g.shape(v), shape, "parameter {name} has unexpected shape");
        self.pos += 1;
        v
    }
}

#[allow(clippy::too_many_arguments)]
fn conv<T: Real>(
    g: &mut Graph<T>,
    src: &mut dyn ParamSource<T>,
    name: &str,
    x: Var,
    k: usize,
    stride: usize,
    cin: usize,
    cout: usize,
) -> Var {
    let w = src.fetch(g, &format!("{name}.w"), &[k, k, cin, cout], Init::FanIn(k * k * cin));
    let b = src.fetch(g, &format!("{name}.b"), &[cout], Init::Zeros);
    let pad = if stride == 1 { k / 2 } else { 0 };
    g.conv2d(x, w, Some(b), stride, pad)
}

fn linear<T: Real>(g: &mut Graph<T>, src: &mut dyn ParamSource<T>, name: &str, x: Var, cin: usize, cout: usize) -> Var {
    let w = src.fetch(g, &format!("{name}.w"), &[cin, cout], Init::TruncNormal);
    let b = src.fetch(g, &format!("{name}.b"), &[cout], Init::Zeros);
    g.linear(x, w, Some(b))
}

fn layer_norm<T: Real>(g: &mut Graph<T>, src: &mut dyn ParamSource<T>, name: &str, x: Var, c: usize) -> Var {
    let gamma = src.fetch(g, &format!("{name}.gamma"), &[c], Init::Ones);
    let beta = src.fetch(g, &format!("{name}.beta"), &[c], Init::Zeros);
    g.layer_norm(x, gamma, beta)
}

/// Geometry of one (possibly shifted) window layout.
struct Windows {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    win: usize,
    shift: usize,
}

impl Windows {
    fn count(&self) -> usize {
        (self.h / self.win) * (self.w / self.win)
    }

    fn tokens(&self) -> usize {
        self.win * self.win
    }

    /// Indices pulling part `part` of a `[B,H,W,stride]` tensor into
    /// `[B·windows·heads, tokens, head_dim]` after rolling by `-shift`.
    fn partition(&self, stride: usize, part: usize) -> Rc<Vec<usize>> {
        let d = self.c / self.heads;
        let (nwy, nwx) = (self.h / self.win, self.w / self.win);
        let mut idx = Vec::with_capacity(self.b * self.h * self.w * self.c);
        for bi in 0..self.b {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for hd in 0..self.heads {
                        for ty in 0..self.win {
                            for tx in 0..self.win {
                                let y = (wy * self.win + ty + self.shift) % self.h;
                                let x = (wx * self.win + tx + self.shift) % self.w;
                                let base = ((bi * self.h + y) * self.w + x) * stride + part * self.c + hd * d;
                                idx.extend(base..base + d);
                            }
                        }
                    }
                }
            }
        }
        Rc::new(idx)
    }

    /// Inverse of [`Windows::partition`] for a single part.
    fn merge(&self) -> Rc<Vec<usize>> {
        let d = self.c / self.heads;
        let n = self.tokens();
        let nwx = self.w / self.win;
        let mut idx = Vec::with_capacity(self.b * self.h * self.w * self.c);
        for bi in 0..self.b {
            for y in 0..self.h {
                let yr = (y + self.h - self.shift) % self.h;
                for x in 0..self.w {
                    let xr = (x + self.w - self.shift) % self.w;
                    let win_id = (yr / self.win) * nwx + xr / self.win;
                    let t = (yr % self.win) * self.win + xr % self.win;
                    for hd in 0..self.heads {
                        let base = (((bi * self.count() + win_id) * self.heads + hd) * n + t) * d;
                        idx.extend(base..base + d);
                    }
                }
            }
        }
        Rc::new(idx)
    }

    /// Additive mask that blocks attention between tokens that were not
    /// neighbours before the cyclic shift.
    fn shift_mask<T: Real>(&self) -> Tensor<T> {
        let n = self.tokens();
        let nwx = self.w / self.win;
        let region = |v: usize, size: usize| -> usize {
            if v < size - self.win {
                0
            } else if v < size - self.shift {
                1
            } else {
                2
            }
        };
        let blocked = T::from_f64_lossy(-100.0);
        let mut per_window = Vec::with_capacity(self.count() * n * n);
        for wi in 0..self.count() {
            let (wy, wx) = (wi / nwx, wi % nwx);
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    region(wy * self.win + t / self.win, self.h) * 3 + region(wx * self.win + t % self.win, self.w)
                })
                .collect();
            for &a in &ids {
                per_window.extend(ids.iter().map(|&b| if a == b { T::zero() } else { blocked }));
            }
        }
        let mut data = Vec::with_capacity(self.b * self.heads * per_window.len());
        for _ in 0..self.b {
            for wi in 0..self.count() {
                let slab = &per_window[wi * n * n..(wi + 1) * n * n];
                for _ in 0..self.heads {
                    data.extend_from_slice(slab);
                }
            }
        }
        Tensor::new(vec![self.b * self.count() * self.heads, n, n], data)
    }
}

/// Pre-norm windowed self-attention block with an MLP, both residual.
fn attention_block<T: Real>(
    cfg: &BackboneConfig,
    g: &mut Graph<T>,
    src: &mut dyn ParamSource<T>,
    name: &str,
    x: Var,
    shifted: bool,
) -> Var {
    let s = g.shape(x).to_vec();
    let c = cfg.channels;
    let win = cfg.window.min(s[1]).min(s[2]);
    let shift = if shifted && s[1] > win && s[2] > win {
        win / 2
    } else {
        0
    };
    let geo = Windows {
        b: s[0],
        h: s[1],
        w: s[2],
        c,
        heads: cfg.heads,
        win,
        shift,
    };
    let d = c / cfg.heads;
    let rows = geo.b * geo.count() * geo.heads;
    let n = geo.tokens();

    let h = layer_norm(g, src, &format!("{name}.ln1"), x, c);
    let qkv = linear(g, src, &format!("{name}.qkv"), h, c, 3 * c);
    let q = g.gather(qkv, geo.partition(3 * c, 0), &[rows, n, d]);
    let k = g.gather(qkv, geo.partition(3 * c, 1), &[rows, n, d]);
    let v = g.gather(qkv, geo.partition(3 * c, 2), &[rows, n, d]);
    let scores = g.bmm(q, k, true);
    let mut scores = g.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    if shift > 0 {
        let mask = g.constant(geo.shift_mask());
        scores = g.add(scores, mask);
    }
    let attn = g.softmax(scores);
    let out = g.bmm(attn, v, false);
    let out = g.gather(out, geo.merge(), &s);
    let out = linear(g, src, &format!("{name}.proj"), out, c, c);
    let x = g.add(x, out);

    let h = layer_norm(g, src, &format!("{name}.ln2"), x, c);
    let h = linear(g, src, &format!("{name}.mlp1"), h, c, 2 * c);
    let h = g.gelu(h);
    let h = linear(g, src, &format!("{name}.mlp2"), h, 2 * c, c);
    g.add(x, h)
}

fn attention_stack<T: Real>(cfg: &BackboneConfig, g: &mut Graph<T>, src: &mut dyn ParamSource<T>, mut x: Var) -> Var {
    for i in 0..cfg.depth {
        x = attention_block(cfg, g, src, &format!("block{i}"), x, i % 2 == 1);
    }
    x
}

/// `[B,h,w,p²c]` → `[B,h·p,w·p,c]`.
fn depth_to_space<T: Real>(g: &mut Graph<T>, x: Var, p: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let c = s[3] / (p * p);
    let mut idx = Vec::with_capacity(s.iter().product());
    for bi in 0..b {
        for yy in 0..h * p {
            for xx in 0..w * p {
                let base = ((bi * h + yy / p) * w + xx / p) * s[3] + ((yy % p) * p + xx % p) * c;
                idx.extend(base..base + c);
            }
        }
    }
    g.gather(x, Rc::new(idx), &[b, h * p, w * p, c])
}

/// Image → latent.
pub(crate) fn encoder<T: Real>(cfg: &BackboneConfig, g: &mut Graph<T>, src: &mut dyn ParamSource<T>, x: Var) -> Var {
    let c = cfg.channels;
    let cin = cfg.input_channels();
    match cfg.kind {
        BackboneKind::ConvSmall => {
            let mut h = x;
            for i in 0..cfg.depth {
                let ci = if i == 0 { cin } else { c };
                h = conv(g, src, &format!("conv{i}"), h, 3, 1, ci, c);
                if i + 1 < cfg.depth {
                    h = g.relu(h);
                }
            }
            h
        }
        BackboneKind::WindowedAttention => {
            let mut h = conv(g, src, "head", x, 3, 1, cin, c);
            if cfg.patch_embed > 1 {
                h = conv(g, src, "embed", h, cfg.patch_embed, cfg.patch_embed, c, c);
            }
            attention_stack(cfg, g, src, h)
        }
    }
}

/// Latent (`latent_mult`·channels wide) → image.
pub(crate) fn decoder<T: Real>(
    cfg: &BackboneConfig,
    g: &mut Graph<T>,
    src: &mut dyn ParamSource<T>,
    z: Var,
    latent_mult: usize,
) -> Var {
    let c = cfg.channels;
    let cout = cfg.image_channels;
    match cfg.kind {
        BackboneKind::ConvSmall => {
            let mut h = z;
            for i in 0..cfg.depth {
                let ci = if i == 0 { latent_mult * c } else { c };
                let co = if i + 1 == cfg.depth { cout } else { c };
                h = conv(g, src, &format!("conv{i}"), h, 3, 1, ci, co);
                if i + 1 < cfg.depth {
                    h = g.relu(h);
                }
            }
            h
        }
        BackboneKind::WindowedAttention => {
            let mut h = z;
            if latent_mult > 1 {
                h = linear(g, src, "fuse", h, latent_mult * c, c);
            }
            h = attention_stack(cfg, g, src, h);
            let p = cfg.patch_embed;
            if p > 1 {
                h = linear(g, src, "unembed", h, c, p * p * c);
                h = depth_to_space(g, h, p);
            }
            conv(g, src, "tail", h, 3, 1, c, cout)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_and_merge_are_inverse() {
        for shift in [0, 2] {
            let geo = Windows {
                b: 2,
                h: 8,
                w: 4,
                c: 6,
                heads: 3,
                win: 4,
                shift,
            };
            let part = geo.partition(6, 0);
            let merge = geo.merge();
            for (i, &m) in merge.iter().enumerate() {
                assert_eq!(part[m], i);
            }
        }
    }

    #[test]
    fn shift_mask_blocks_only_across_regions() {
        let geo = Windows {
            b: 1,
            h: 8,
            w: 8,
            c: 2,
            heads: 1,
            win: 4,
            shift: 2,
        };
        let m: Tensor<f64> = geo.shift_mask();
        let n = 16;
        // The top-left window holds unshifted neighbours only.
        assert!(m.data()[..n * n].iter().all(|&v| v == 0.0));
        // The bottom-right window mixes four regions.
        let last = &m.data()[3 * n * n..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 4 * 4 * 4);
    }
}
