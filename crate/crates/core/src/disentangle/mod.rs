//! Multi-view disentanglement: forward paths, latent mixing and the four
//! loss terms.
//!
//! Each loss only reaches the networks on its own computational path, so a
//! single optimizer over all groups receives correctly scoped gradients:
//!
//! | term  | networks on the path |
//! |-------|----------------------|
//! | scene | G, D                 |
//! | noise | E, F                 |
//! | cross | G, E, R              |
//! | mix   | G, D                 |

mod lemma;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::backbone::{BoundNets, Group, Networks};
use crate::config::KvConfig;
use crate::error::{Error, Result};

pub use lemma::{cholesky_psd, lemma1_grid, verify_lemma1, Lemma1Case, Lemma1Report};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_scene: f64,
    pub w_noise: f64,
    pub w_cross: f64,
    pub lambda_mix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_scene: 1.0,
            w_noise: 1.0,
            w_cross: 1.0,
            lambda_mix: 0.025,
        }
    }
}

impl LossWeights {
    /// Alternative preset with a stronger mixing term.
    pub fn strong_mix() -> Self {
        Self {
            lambda_mix: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_scene, self.w_noise, self.w_cross, self.lambda_mix];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn combine(&self, terms: &LossTerms<f64>) -> f64 {
        self.w_scene * terms.scene
            + self.w_noise * terms.noise
            + self.w_cross * terms.cross
            + self.lambda_mix * terms.mix
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::Config(format!("unknown norm '{s}' (expected l1 or l2)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub norm: Norm,
    /// Probability that a latent element comes from the first view (k = 2).
    pub p: f64,
    /// Use one spatial mask for both the latent and the pixel-space target.
    pub share_mask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            norm: Norm::L1,
            p: 0.5,
            share_mask: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("mix.p = {} outside [0, 1]", self.p)));
        }
        Ok(())
    }

    pub fn read(mut self, kv: &mut KvConfig) -> Result<Self> {
        if let Some(preset) = kv.take::<String>("loss.preset")? {
            self.weights = match preset.as_str() {
                "default" => LossWeights::default(),
                "strong_mix" => LossWeights::strong_mix(),
                _ => return Err(Error::Config(format!("unknown loss preset '{preset}'"))),
            };
        }
        let w = &mut self.weights;
        w.w_scene = kv.take_or("loss.w_scene", w.w_scene)?;
        w.w_noise = kv.take_or("loss.w_noise", w.w_noise)?;
        w.w_cross = kv.take_or("loss.w_cross", w.w_cross)?;
        w.lambda_mix = kv.take_or("loss.lambda_mix", w.lambda_mix)?;
        if let Some(n) = kv.take::<String>("loss.norm")? {
            self.norm = Norm::parse(&n)?;
        }
        self.p = kv.take_or("mix.p", self.p)?;
        self.share_mask = kv.take_or("mix.share_mask", self.share_mask)?;
        self.validate()?;
        Ok(self)
    }

    pub fn write(&self, kv: &mut KvConfig) {
        kv.set("loss.w_scene", self.weights.w_scene);
        kv.set("loss.w_noise", self.weights.w_noise);
        kv.set("loss.w_cross", self.weights.w_cross);
        kv.set("loss.lambda_mix", self.weights.lambda_mix);
        kv.set("loss.norm", self.norm.name());
        kv.set("mix.p", self.p);
        kv.set("mix.share_mask", self.share_mask);
    }
}

/// Per-element source indices: `picks[i] = 0` selects the first input.
pub fn bernoulli_picks<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| u8::from(!rng.random_bool(p))).collect()
}

/// Per-element source indices drawn uniformly from `0..k`.
pub fn categorical_picks<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<u8> {
    assert!((1..=255).contains(&k));
    (0..n).map(|_| rng.random_range(0..k) as u8).collect()
}

/// The 0/1 mask `b` (1 where the first input is kept) for a pick vector.
pub fn picks_to_mask<T: Real>(picks: &[u8]) -> Vec<T> {
    picks
        .iter()
        .map(|&p| if p == 0 { T::one() } else { T::zero() })
        .collect()
}

/// `b ⊙ m + (1 − b) ⊙ n` with `b ~ Bernoulli(p)` elementwise.
pub fn mix_p<T: Real, R: Rng + ?Sized>(m: &Tensor<T>, n: &Tensor<T>, p: f64, rng: &mut R) -> Result<Tensor<T>> {
    if m.shape() != n.shape() {
        return Err(Error::Shape(format!("cannot mix {:?} with {:?}", m.shape(), n.shape())));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("mixing probability {p} outside [0, 1]")));
    }
    let picks = bernoulli_picks(m.len(), p, rng);
    Ok(mix_with_picks(&[m, n], &picks))
}

pub fn mix_with_picks<T: Real>(inputs: &[&Tensor<T>], picks: &[u8]) -> Tensor<T> {
    let data = picks
        .iter()
        .enumerate()
        .map(|(i, &p)| inputs[p as usize].data()[i])
        .collect();
    Tensor::new(inputs[0].shape().to_vec(), data)
}

/// Masks for one mixing draw.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDraw {
    pub latent: Rc<Vec<u8>>,
    pub pixel: Rc<Vec<u8>>,
}

/// Draws the latent mask and the pixel-target mask.
///
/// With two views each element picks view 0 with probability `p`; with
/// more views the pick is uniform. When `share_mask` is set, one pick per
/// latent position is shared by every latent channel and, upsampled by the
/// patch factor, by every pixel under that position.
pub fn draw_mix<R: Rng + ?Sized>(
    k: usize,
    latent_shape: &[usize],
    pixel_shape: &[usize],
    p: f64,
    share_mask: bool,
    rng: &mut R,
) -> MixDraw {
    let draw = |n: usize, rng: &mut R| {
        if k == 2 {
            bernoulli_picks(n, p, rng)
        } else {
            categorical_picks(n, k, rng)
        }
    };
    let latent_len: usize = latent_shape.iter().product();
    let pixel_len: usize = pixel_shape.iter().product();
    if !share_mask {
        let latent = draw(latent_len, rng);
        let pixel = draw(pixel_len, rng);
        return MixDraw {
            latent: Rc::new(latent),
            pixel: Rc::new(pixel),
        };
    }
    let [b, h, w, c] = latent_shape[..] else {
        panic!("latent must be NHWC")
    };
    let [_, ph, pw, pc] = pixel_shape[..] else {
        panic!("pixels must be NHWC")
    };
    let f = ph / h;
    let spatial = draw(b * h * w, rng);
    let latent = (0..latent_len).map(|i| spatial[i / c]).collect();
    let pixel = (0..pixel_len)
        .map(|i| {
            let rest = i / pc;
            let (bi, yy, xx) = (rest / (ph * pw), (rest / pw) % ph, rest % pw);
            spatial[(bi * h + yy / f) * w + xx / f]
        })
        .collect();
    MixDraw {
        latent: Rc::new(latent),
        pixel: Rc::new(pixel),
    }
}

/// A cross-composed reconstruction of view `target` from the scene latent
/// of view `scene_from` and the corruption latent of view `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossPath {
    pub target: usize,
    pub scene_from: usize,
    pub out: Var,
}

/// Every node produced by the forward paths of one view set.
#[derive(Clone, Debug)]
pub struct Paths {
    pub z: Vec<Var>,
    pub u: Vec<Var>,
    /// Scene reconstructions `D(zᵢ)`.
    pub x_hat: Vec<Var>,
    /// Residual estimates `F(uᵢ)`.
    pub eta_hat: Vec<Var>,
    /// One entry per ordered pair `(target, scene_from)`, target ≠ scene_from.
    pub cross: Vec<CrossPath>,
    pub z_mix: Var,
    pub x_mix: Var,
}

/// Runs the encoders on every view, then scene, noise, cross and mixed
/// decoding. `inputs` are what the encoders see (views, plus the mask
/// channel if configured).
#[allow(clippy::needless_range_loop)]
pub fn forward_paths<T: Real>(g: &mut Graph<T>, nets: &BoundNets, inputs: &[Var], mix: &MixDraw) -> Result<Paths> {
    let k = inputs.len();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 views, got {k}")));
    }
    let mut z = Vec::with_capacity(k);
    let mut u = Vec::with_capacity(k);
    for &y in inputs {
        z.push(nets.encode_scene(g, y)?);
        u.push(nets.encode_noise(g, y)?);
    }
    let x_hat = z
        .iter()
        .map(|&zi| nets.decode_scene(g, zi))
        .collect::<Result<Vec<_>>>()?;
    let eta_hat = u
        .iter()
        .map(|&ui| nets.decode_noise(g, ui))
        .collect::<Result<Vec<_>>>()?;
    let mut cross = Vec::with_capacity(k * (k - 1));
    for target in 0..k {
        for scene_from in 0..k {
            if scene_from != target {
                let out = nets.cross_decode(g, z[scene_from], u[target])?;
                cross.push(CrossPath {
                    target,
                    scene_from,
                    out,
                });
            }
        }
    }
    if mix.latent.len() != g.value(z[0]).len() {
        return Err(Error::Shape("latent mix mask does not match latent size".into()));
    }
    let z_mix = g.choose(mix.latent.clone(), &z);
    let x_mix = nets.decode_scene(g, z_mix)?;
    Ok(Paths {
        z,
        u,
        x_hat,
        eta_hat,
        cross,
        z_mix,
        x_mix,
    })
}

/// Mean elementwise `|a − b|` (L1) or `(a − b)²` (L2).
pub fn distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var, norm: Norm) -> Var {
    let d = g.sub(a, b);
    match norm {
        Norm::L1 => g.mean_abs(d),
        Norm::L2 => g.mean_sq(d),
    }
}

/// Sum over ordered pairs, rescaled so that two views give the plain sum.
fn pair_sum<T: Real>(g: &mut Graph<T>, terms: &[Var], k: usize) -> Var {
    let w = T::from_f64_lossy(2.0 / (k * (k - 1)) as f64);
    let weighted: Vec<(Var, T)> = terms.iter().map(|&t| (t, w)).collect();
    g.weighted_sum(&weighted)
}

/// `Σ_{i≠j} ‖x̂ᵢ − yⱼ‖`.
#[allow(clippy::needless_range_loop)]
pub fn loss_scene<T: Real>(g: &mut Graph<T>, x_hat: &[Var], y: &[Var], norm: Norm) -> Var {
    let k = y.len();
    let mut terms = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                terms.push(distance(g, x_hat[i], y[j], norm));
            }
        }
    }
    pair_sum(g, &terms, k)
}

/// `Σ_{i≠j} ‖(yᵢ − η̂ᵢ) − yⱼ‖`.
#[allow(clippy::needless_range_loop)]
pub fn loss_noise<T: Real>(g: &mut Graph<T>, y: &[Var], eta_hat: &[Var], norm: Norm) -> Var {
    let k = y.len();
    let mut terms = Vec::new();
    for i in 0..k {
        let cleaned = g.sub(y[i], eta_hat[i]);
        for j in 0..k {
            if i != j {
                terms.push(distance(g, cleaned, y[j], norm));
            }
        }
    }
    pair_sum(g, &terms, k)
}

/// `Σ ‖R(z_j, uᵢ) − yᵢ‖` over all cross paths.
pub fn loss_cross<T: Real>(g: &mut Graph<T>, cross: &[CrossPath], y: &[Var], norm: Norm) -> Var {
    let terms: Vec<Var> = cross.iter().map(|c| distance(g, c.out, y[c.target], norm)).collect();
    pair_sum(g, &terms, y.len())
}

/// `‖x̂_mix − Mix(y₁, …, y_k)‖` with the pixel-space pick vector.
pub fn loss_mix<T: Real>(g: &mut Graph<T>, x_mix: Var, y: &[Var], pixel_picks: Rc<Vec<u8>>, norm: Norm) -> Var {
    let target = g.choose(pixel_picks, y);
    distance(g, x_mix, target, norm)
}

/// The four loss nodes of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms<V> {
    pub scene: V,
    pub noise: V,
    pub cross: V,
    pub mix: V,
}

impl<V: Copy> LossTerms<V> {
    pub fn as_array(&self) -> [(&'static str, V); 4] {
        [
            ("scene", self.scene),
            ("noise", self.noise),
            ("cross", self.cross),
            ("mix", self.mix),
        ]
    }
}

/// Scalar losses of one step plus, when requested, per-term gradient norms
/// for every parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub l_scene: f64,
    pub l_noise: f64,
    pub l_cross: f64,
    pub l_mix: f64,
    pub total: f64,
    /// term → group → ‖∇‖₂ of that isolated term.
    pub grad_norms: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Weighted total of per-term losses.
pub fn total_loss(terms: &LossTerms<f64>, weights: &LossWeights) -> LossReport {
    LossReport {
        l_scene: terms.scene,
        l_noise: terms.noise,
        l_cross: terms.cross,
        l_mix: terms.mix,
        total: weights.combine(terms),
        grad_norms: BTreeMap::new(),
    }
}

/// Builds all four terms and their weighted total on `g`.
///
/// `targets` are the pixel values of each view; `inputs` what the encoders
/// receive (they coincide unless a mask channel is appended).
pub fn med_objective<T: Real>(
    g: &mut Graph<T>,
    nets: &BoundNets,
    inputs: &[Var],
    targets: &[Var],
    cfg: &LossConfig,
    mix: &MixDraw,
) -> Result<(Var, LossTerms<Var>, Paths)> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape("inputs and targets differ in view count".into()));
    }
    let paths = forward_paths(g, nets, inputs, mix)?;
    if mix.pixel.len() != g.value(targets[0]).len() {
        return Err(Error::Shape("pixel mix mask does not match image size".into()));
    }
    let terms = LossTerms {
        scene: loss_scene(g, &paths.x_hat, targets, cfg.norm),
        noise: loss_noise(g, targets, &paths.eta_hat, cfg.norm),
        cross: loss_cross(g, &paths.cross, targets, cfg.norm),
        mix: loss_mix(g, paths.x_mix, targets, mix.pixel.clone(), cfg.norm),
    };
    let w = &cfg.weights;
    let total = g.weighted_sum(&[
        (terms.scene, T::from_f64_lossy(w.w_scene)),
        (terms.noise, T::from_f64_lossy(w.w_noise)),
        (terms.cross, T::from_f64_lossy(w.w_cross)),
        (terms.mix, T::from_f64_lossy(w.lambda_mix)),
    ]);
    Ok((total, terms, paths))
}

/// Evaluates each loss term in isolation and reports the L2 norm of its
/// gradient on every parameter group.
pub fn scoped_grad_norms<T: Real>(
    nets: &Networks<T>,
    views: &[Tensor<T>],
    cfg: &LossConfig,
    mix: &MixDraw,
) -> Result<LossReport> {
    let mut report = LossReport::default();
    let mut values = LossTerms::<f64>::default();
    for (idx, name) in ["scene", "noise", "cross", "mix"].into_iter().enumerate() {
        let mut g = Graph::new();
        let bound = nets.bind(&mut g, |_| true);
        let vs: Vec<Var> = views.iter().map(|v| g.constant(v.clone())).collect();
        let (_, terms, _) = med_objective(&mut g, &bound, &vs, &vs, cfg, mix)?;
        let node = terms.as_array()[idx].1;
        let value = g.scalar(node).as_f64();
        match idx {
            0 => values.scene = value,
            1 => values.noise = value,
            2 => values.cross = value,
            _ => values.mix = value,
        }
        let grads = g.backward(node);
        let per_group = Group::ALL
            .into_iter()
            .map(|group| {
                let sq: f64 = bound
                    .vars(group)
                    .iter()
                    .map(|&v| grads.get(v).map_or(0.0, Tensor::sum_sq))
                    .sum();
                (group.name().to_string(), sq.sqrt())
            })
            .collect();
        report.grad_norms.insert(name.to_string(), per_group);
    }
    let grad_norms = std::mem::take(&mut report.grad_norms);
    Ok(LossReport {
        grad_norms,
        ..total_loss(&values, &cfg.weights)
    })
}

/// Groups each term is expected to train.
pub fn term_scope(term: &str) -> &'static [Group] {
    match term {
        "scene" => &[Group::Theta, Group::Psi],
        "noise" => &[Group::Rho, Group::Phi],
        "cross" => &[Group::Theta, Group::Rho, Group::Delta],
        "mix" => &[Group::Theta, Group::Psi],
        _ => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_networks, BackboneConfig};
    use crate::rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect())
    }

    fn eval_loss(f: impl FnOnce(&mut Graph<f64>, &[Var]) -> Var, inputs: &[&Tensor<f64>]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    }

    fn brute_l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn mix_endpoints_and_idempotence() {
        let m = random(&[2, 3, 3, 4], 1);
        let n = random(&[2, 3, 3, 4], 2);
        let mut r = rng::stream(3, &[]);
        assert_eq!(mix_p(&m, &n, 1.0, &mut r).unwrap(), m);
        assert_eq!(mix_p(&m, &n, 0.0, &mut r).unwrap(), n);
        assert_eq!(mix_p(&m, &m, 0.5, &mut r).unwrap(), m);
        assert!(mix_p(&m, &random(&[1, 3, 3, 4], 2), 0.5, &mut r).is_err());
    }

    #[test]
    fn bernoulli_mask_is_idempotent() {
        let mut r = rng::stream(4, &[]);
        let b: Vec<f64> = picks_to_mask(&bernoulli_picks(10_000, 0.3, &mut r));
        assert!(b.iter().all(|&v| v * v == v));
        let frac = b.iter().sum::<f64>() / b.len() as f64;
        assert!((frac - 0.3).abs() < 0.02);
    }

    #[test]
    fn shared_mask_matches_latent_and_pixels() {
        let mut r = rng::stream(5, &[]);
        let d = draw_mix(2, &[1, 2, 2, 4], &[1, 4, 4, 3], 0.5, true, &mut r);
        for y in 0..4 {
            for x in 0..4 {
                let pix = d.pixel[(y * 4 + x) * 3];
                assert_eq!(pix, d.latent[((y / 2) * 2 + x / 2) * 4]);
            }
        }
        let d = draw_mix(3, &[1, 2, 2, 4], &[1, 2, 2, 3], 0.5, false, &mut r);
        assert!(d.latent.iter().all(|&p| p < 3));
    }

    #[test]
    fn scene_loss_cases() {
        let y2 = random(&[1, 4, 4, 3], 6);
        let same = eval_loss(|g, v| distance(g, v[0], v[1], Norm::L1), &[&y2, &y2]);
        assert_eq!(same, 0.0);
        let shifted = y2.map(|v| v + 0.1);
        let off = eval_loss(|g, v| distance(g, v[0], v[1], Norm::L1), &[&shifted, &y2]);
        assert!((off - 0.1).abs() < 1e-12);
        let (x1, x2, y1) = (
            random(&[1, 4, 4, 3], 7),
            random(&[1, 4, 4, 3], 8),
            random(&[1, 4, 4, 3], 9),
        );
        let got = eval_loss(|g, v| loss_scene(g, &v[..2], &v[2..], Norm::L1), &[&x1, &x2, &y1, &y2]);
        assert!((got - (brute_l1(&x1, &y2) + brute_l1(&x2, &y1))).abs() < 1e-12);
        let l2 = eval_loss(|g, v| distance(g, v[0], v[1], Norm::L2), &[&x1, &y1]);
        let brute: f64 = x1
            .data()
            .iter()
            .zip(y1.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / x1.len() as f64;
        assert!((l2 - brute).abs() < 1e-12);
    }

    #[test]
    fn noise_loss_cases() {
        let (y1, y2) = (random(&[1, 4, 4, 3], 10), random(&[1, 4, 4, 3], 11));
        let eta1 = Tensor::new(
            y1.shape().to_vec(),
            y1.data().iter().zip(y2.data()).map(|(a, b)| a - b).collect(),
        );
        let eta2 = eta1.map(|v| -v);
        let exact = eval_loss(
            |g, v| loss_noise(g, &v[..2], &v[2..], Norm::L1),
            &[&y1, &y2, &eta1, &eta2],
        );
        assert!(exact < 1e-15);
        let zeros = Tensor::zeros(y1.shape());
        let clean = eval_loss(
            |g, v| loss_noise(g, &v[..2], &v[2..], Norm::L1),
            &[&y1, &y1, &zeros, &zeros],
        );
        assert_eq!(clean, 0.0);
        let (e1, e2) = (random(&[1, 4, 4, 3], 12), random(&[1, 4, 4, 3], 13));
        let got = eval_loss(|g, v| loss_noise(g, &v[..2], &v[2..], Norm::L1), &[&y1, &y2, &e1, &e2]);
        let c1 = Tensor::new(
            y1.shape().to_vec(),
            y1.data().iter().zip(e1.data()).map(|(a, b)| a - b).collect(),
        );
        let c2 = Tensor::new(
            y2.shape().to_vec(),
            y2.data().iter().zip(e2.data()).map(|(a, b)| a - b).collect(),
        );
        assert!((got - (brute_l1(&c1, &y2) + brute_l1(&c2, &y1))).abs() < 1e-12);
    }

    #[test]
    fn cross_and_mix_loss_cases() {
        let (y1, y2) = (random(&[1, 4, 4, 3], 14), random(&[1, 4, 4, 3], 15));
        let run_cross = |a: &Tensor<f64>, b: &Tensor<f64>| {
            eval_loss(
                |g, v| {
                    let cross = [
                        CrossPath {
                            target: 0,
                            scene_from: 1,
                            out: v[2],
                        },
                        CrossPath {
                            target: 1,
                            scene_from: 0,
                            out: v[3],
                        },
                    ];
                    loss_cross(g, &cross, &v[..2], Norm::L1)
                },
                &[&y1, &y2, a, b],
            )
        };
        assert_eq!(run_cross(&y1, &y2), 0.0);
        assert!((run_cross(&y1.map(|v| v + 0.2), &y2.map(|v| v + 0.2)) - 0.4).abs() < 1e-12);
        let (r1, r2) = (random(&[1, 4, 4, 3], 16), random(&[1, 4, 4, 3], 17));
        assert!((run_cross(&r1, &r2) - (brute_l1(&r1, &y1) + brute_l1(&r2, &y2))).abs() < 1e-12);

        let mut r = rng::stream(18, &[]);
        let picks = Rc::new(bernoulli_picks(y1.len(), 0.5, &mut r));
        let xm = random(&[1, 4, 4, 3], 19);
        let got = eval_loss(
            |g, v| loss_mix(g, v[0], &v[1..], picks.clone(), Norm::L1),
            &[&xm, &y1, &y2],
        );
        let target = mix_with_picks(&[&y1, &y2], &picks);
        assert!((got - brute_l1(&xm, &target)).abs() < 1e-12);
        let same = eval_loss(
            |g, v| loss_mix(g, v[0], &v[1..], picks.clone(), Norm::L1),
            &[&y1, &y1, &y1],
        );
        assert_eq!(same, 0.0);
        let all_first = Rc::new(vec![0u8; y1.len()]);
        let end = eval_loss(
            |g, v| loss_mix(g, v[0], &v[1..], all_first.clone(), Norm::L1),
            &[&y1, &y1, &y2],
        );
        assert_eq!(end, 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let unit = LossTerms {
            scene: 1.0,
            noise: 1.0,
            cross: 1.0,
            mix: 1.0,
        };
        assert!((total_loss(&unit, &LossWeights::default()).total - 3.025).abs() < 1e-12);
        let zero = LossWeights {
            w_scene: 0.0,
            w_noise: 0.0,
            w_cross: 0.0,
            lambda_mix: 0.0,
        };
        assert_eq!(total_loss(&unit, &zero).total, 0.0);
        let terms = LossTerms {
            scene: 0.3,
            noise: 0.7,
            cross: 1.1,
            mix: 2.0,
        };
        let only_cross = LossWeights { w_cross: 1.0, ..zero };
        assert_eq!(total_loss(&terms, &only_cross).total, 1.1);
        assert!(LossWeights { w_noise: -1.0, ..zero }.validate().is_err());
    }

    fn small_setup(k: usize) -> (Networks<f64>, Vec<Tensor<f64>>, MixDraw) {
        let cfg = BackboneConfig::conv_small(2, 4);
        let nets = build_networks::<f64>(&cfg, 21).unwrap();
        let views: Vec<_> = (0..k).map(|i| random(&[1, 16, 16, 3], 30 + i as u64)).collect();
        let mut r = rng::stream(22, &[]);
        let mix = draw_mix(k, &[1, 16, 16, 4], &[1, 16, 16, 3], 0.5, false, &mut r);
        (nets, views, mix)
    }

    #[test]
    fn gradient_scoping() {
        let (nets, views, mix) = small_setup(2);
        let rep = scoped_grad_norms(&nets, &views, &LossConfig::default(), &mix).unwrap();
        for (term, groups) in &rep.grad_norms {
            let scope = term_scope(term);
            for group in Group::ALL {
                let n = groups[group.name()];
                if scope.contains(&group) {
                    assert!(n > 1e-8, "{term} should reach {group}");
                } else {
                    assert!(n < 1e-12, "{term} leaked into {group}: {n}");
                }
            }
        }
    }

    #[test]
    fn cross_paths_use_the_right_latents() {
        let (nets, views, mix) = small_setup(3);
        let mut g = Graph::new();
        let b = nets.bind(&mut g, |_| false);
        let vs: Vec<Var> = views.iter().map(|v| g.constant(v.clone())).collect();
        let paths = forward_paths(&mut g, &b, &vs, &mix).unwrap();
        assert_eq!(paths.cross.len(), 6);
        for c in &paths.cross {
            assert_ne!(c.target, c.scene_from);
            let expect = nets
                .cross_decode(g.value(paths.z[c.scene_from]), g.value(paths.u[c.target]))
                .unwrap();
            assert_eq!(g.value(c.out), &expect);
        }
        // The corruption latent feeds both its own decoder and every cross path.
        let u0 = g.value(paths.u[0]).clone();
        assert_eq!(g.value(paths.eta_hat[0]), &nets.decode_noise(&u0).unwrap());
    }

    #[test]
    fn equal_views_give_equal_paths() {
        let (nets, views, _) = small_setup(2);
        let same = [views[0].clone(), views[0].clone()];
        let mut r = rng::stream(23, &[]);
        let mix = draw_mix(2, &[1, 16, 16, 4], &[1, 16, 16, 3], 0.5, false, &mut r);
        let mut g = Graph::new();
        let b = nets.bind(&mut g, |_| false);
        let vs: Vec<Var> = same.iter().map(|v| g.constant(v.clone())).collect();
        let p = forward_paths(&mut g, &b, &vs, &mix).unwrap();
        assert_eq!(g.value(p.x_hat[0]), g.value(p.x_hat[1]));
        assert_eq!(g.value(p.x_mix), g.value(p.x_hat[0]));
    }

    #[test]
    fn swapping_views_with_complement_mask_keeps_total() {
        let (nets, views, mix) = small_setup(2);
        let flip = |p: &Rc<Vec<u8>>| Rc::new(p.iter().map(|&v| 1 - v).collect::<Vec<u8>>());
        let swapped_mix = MixDraw {
            latent: flip(&mix.latent),
            pixel: flip(&mix.pixel),
        };
        let total = |vs: &[Tensor<f64>], mix: &MixDraw| {
            let mut g = Graph::new();
            let b = nets.bind(&mut g, |_| false);
            let vars: Vec<Var> = vs.iter().map(|v| g.constant(v.clone())).collect();
            let (t, _, paths) = med_objective(&mut g, &b, &vars, &vars, &LossConfig::default(), mix).unwrap();
            (
                g.scalar(t),
                g.value(paths.x_hat[0]).clone(),
                g.value(paths.x_hat[1]).clone(),
            )
        };
        let (a, a0, a1) = total(&views, &mix);
        let (b, b0, b1) = total(&[views[1].clone(), views[0].clone()], &swapped_mix);
        assert_eq!(a, b);
        assert_eq!((a0, a1), (b1, b0));
    }

    #[test]
    fn k_view_objective_is_finite() {
        let (nets, views, mix) = small_setup(3);
        let mut g = Graph::new();
        let b = nets.bind(&mut g, |_| true);
        let vs: Vec<Var> = views.iter().map(|v| g.constant(v.clone())).collect();
        let (t, _, _) = med_objective(&mut g, &b, &vs, &vs, &LossConfig::default(), &mix).unwrap();
        assert!(g.scalar(t).is_finite());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut kv = KvConfig::parse("loss.preset = strong_mix\nloss.norm = l2\nmix.p = 0.3").unwrap();
        let cfg = LossConfig::default().read(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(cfg.weights.lambda_mix, 0.05);
        assert_eq!(cfg.norm, Norm::L2);
        let mut out = KvConfig::new();
        cfg.write(&mut out);
        assert_eq!(LossConfig::default().read(&mut out).unwrap(), cfg);
    }
}
