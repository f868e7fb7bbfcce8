//! The five networks: scene encoder/decoder, noise encoder/decoder and the
//! cross-compose decoder. No network has a path from its input pixels to its
//! output that bypasses the latent.

mod layers;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng;
use layers::{Creator, Cursor, ParamSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Plain 3×3 conv + ReLU stack at full resolution.
    ConvSmall,
    /// Conv head, patch embedding, shifted-window attention blocks,
    /// patch unembedding, conv tail.
    WindowedAttention,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::ConvSmall => "conv_small",
            BackboneKind::WindowedAttention => "windowed_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv_small" => Ok(BackboneKind::ConvSmall),
            "windowed_attention" => Ok(BackboneKind::WindowedAttention),
            _ => Err(Error::Config(format!("unknown backbone kind '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Conv layers per network (`conv_small`) or attention blocks per network.
    pub depth: usize,
    pub channels: usize,
    pub window: usize,
    pub patch_embed: usize,
    pub heads: usize,
    /// Channels of the images being restored (1 or 3).
    pub image_channels: usize,
    /// Feed a keep/drop mask to the encoders as one extra input channel.
    pub mask_channel: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::windowed_attention()
    }
}

impl BackboneConfig {
    pub fn windowed_attention() -> Self {
        Self {
            kind: BackboneKind::WindowedAttention,
            depth: 2,
            channels: 60,
            window: 8,
            patch_embed: 1,
            heads: 6,
            image_channels: 3,
            mask_channel: false,
        }
    }

    pub fn conv_small(depth: usize, channels: usize) -> Self {
        Self {
            kind: BackboneKind::ConvSmall,
            depth,
            channels,
            window: 1,
            patch_embed: 1,
            heads: 1,
            image_channels: 3,
            mask_channel: false,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + usize::from(self.mask_channel)
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.kind {
            BackboneKind::ConvSmall => 1,
            BackboneKind::WindowedAttention => self.patch_embed * self.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("backbone.depth must be >= 1".into());
        }
        if self.channels == 0 {
            return bad("backbone.channels must be >= 1".into());
        }
        if !matches!(self.image_channels, 1 | 3) {
            return bad(format!(
                "backbone.image_channels must be 1 or 3, got {}",
                self.image_channels
            ));
        }
        if self.kind == BackboneKind::WindowedAttention {
            if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
                return bad(format!(
                    "channels {} not divisible by heads {}",
                    self.channels, self.heads
                ));
            }
            if self.window < 2 {
                return bad("backbone.window must be >= 2".into());
            }
            if self.patch_embed == 0 {
                return bad("backbone.patch_embed must be >= 1".into());
            }
        }
        Ok(())
    }

    /// Rejects spatial sizes the windows cannot tile.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "{h}x{w} input does not tile: sizes must be multiples of patch_embed*window = {m}"
            )));
        }
        Ok(())
    }

    /// Latent spatial size for an `h`×`w` input.
    pub fn latent_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            BackboneKind::ConvSmall => (h, w),
            BackboneKind::WindowedAttention => (h / self.patch_embed, w / self.patch_embed),
        }
    }

    /// Reads `backbone.*` keys over `self`.
    pub fn read(mut self, kv: &mut KvConfig) -> Result<Self> {
        if let Some(kind) = kv.take::<String>("backbone.kind")? {
            let parsed = BackboneKind::parse(&kind)?;
            if parsed != self.kind {
                self = match parsed {
                    BackboneKind::ConvSmall => Self::conv_small(3, 16),
                    BackboneKind::WindowedAttention => Self::windowed_attention(),
                };
            }
        }
        self.depth = kv.take_or("backbone.depth", self.depth)?;
        self.channels = kv.take_or("backbone.channels", self.channels)?;
        self.window = kv.take_or("backbone.window", self.window)?;
        self.patch_embed = kv.take_or("backbone.patch_embed", self.patch_embed)?;
        self.heads = kv.take_or("backbone.heads", self.heads)?;
        self.image_channels = kv.take_or("backbone.image_channels", self.image_channels)?;
        self.mask_channel = kv.take_or("backbone.mask_channel", self.mask_channel)?;
        self.validate()?;
        Ok(self)
    }

    pub fn write(&self, kv: &mut KvConfig) {
        kv.set("backbone.kind", self.kind.name());
        kv.set("backbone.depth", self.depth);
        kv.set("backbone.channels", self.channels);
        kv.set("backbone.window", self.window);
        kv.set("backbone.patch_embed", self.patch_embed);
        kv.set("backbone.heads", self.heads);
        kv.set("backbone.image_channels", self.image_channels);
        kv.set("backbone.mask_channel", self.mask_channel);
    }
}

/// Parameter groups, one per network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Scene encoder G.
    Theta,
    /// Scene decoder D.
    Psi,
    /// Noise encoder E.
    Rho,
    /// Noise decoder F.
    Phi,
    /// Cross-compose decoder R.
    Delta,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Theta, Group::Psi, Group::Rho, Group::Phi, Group::Delta];

    pub fn name(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Psi => "psi",
            Group::Rho => "rho",
            Group::Phi => "phi",
            Group::Delta => "delta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group '{s}'")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamGroup<T> {
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_layout(&self, other: &ParamGroup<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Parameters of all five networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T> {
    pub cfg: BackboneConfig,
    pub groups: Vec<ParamGroup<T>>,
}

/// Scene and corruption latents of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T> {
    pub z: Tensor<T>,
    pub u: Tensor<T>,
    pub source_view: usize,
}

fn run_net<T: Real>(cfg: &BackboneConfig, group: Group, g: &mut Graph<T>, src: &mut dyn ParamSource<T>, x: Var) -> Var {
    match group {
        Group::Theta | Group::Rho => layers::encoder(cfg, g, src, x),
        Group::Psi | Group::Phi => layers::decoder(cfg, g, src, x, 1),
        Group::Delta => layers::decoder(cfg, g, src, x, 2),
    }
}

/// Instantiates all five networks; initialization depends only on `seed`.
pub fn build_networks<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<Networks<T>> {
    cfg.validate()?;
    let m = cfg.size_multiple();
    let groups = Group::ALL
        .into_iter()
        .map(|group| {
            let mut g = Graph::new();
            let width = match group {
                Group::Theta | Group::Rho => cfg.input_channels(),
                Group::Psi | Group::Phi => cfg.channels,
                Group::Delta => 2 * cfg.channels,
            };
            let (h, w) = match group {
                Group::Theta | Group::Rho => (m, m),
                _ => cfg.latent_size(m, m),
            };
            let x = g.constant(Tensor::zeros(&[1, h, w, width]));
            let mut creator = Creator {
                rng: rng::stream(seed, &[0xb0b, group.index() as u64]),
                names: Vec::new(),
                tensors: Vec::new(),
            };
            run_net(cfg, group, &mut g, &mut creator, x);
            ParamGroup {
                names: creator.names,
                tensors: creator.tensors,
            }
        })
        .collect();
    Ok(Networks {
        cfg: cfg.clone(),
        groups,
    })
}

/// Networks placed on a graph; each group is either trainable or frozen.
#[derive(Clone, Debug)]
pub struct BoundNets {
    cfg: BackboneConfig,
    vars: Vec<Vec<Var>>,
}

impl BoundNets {
    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn vars(&self, group: Group) -> &[Var] {
        &self.vars[group.index()]
    }

    fn apply<T: Real>(&self, group: Group, g: &mut Graph<T>, x: Var) -> Var {
        let mut cursor = Cursor {
            vars: &self.vars[group.index()],
            pos: 0,
        };
        let out = run_net(&self.cfg, group, g, &mut cursor, x);
        debug_assert_eq!(cursor.pos, cursor.vars.len(), "unused parameters in {group}");
        out
    }

    fn check_image<T: Real>(&self, g: &Graph<T>, y: Var) -> Result<()> {
        let s = g.shape(y);
        if s.len() != 4 || s[3] != self.cfg.input_channels() {
            return Err(Error::Shape(format!(
                "encoder expects [N,H,W,{}], got {s:?}",
                self.cfg.input_channels()
            )));
        }
        self.cfg.check_size(s[1], s[2])
    }

    fn check_latent<T: Real>(&self, g: &Graph<T>, z: Var, mult: usize) -> Result<()> {
        let s = g.shape(z);
        if s.len() != 4 || s[3] != mult * self.cfg.channels {
            return Err(Error::Shape(format!(
                "decoder expects [N,h,w,{}], got {s:?}",
                mult * self.cfg.channels
            )));
        }
        Ok(())
    }

    /// z = G(y).
    pub fn encode_scene<T: Real>(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        self.check_image(g, y)?;
        Ok(self.apply(Group::Theta, g, y))
    }

    /// x̂ = D(z), unclipped.
    pub fn decode_scene<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        self.check_latent(g, z, 1)?;
        Ok(self.apply(Group::Psi, g, z))
    }

    /// u = E(y).
    pub fn encode_noise<T: Real>(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        self.check_image(g, y)?;
        Ok(self.apply(Group::Rho, g, y))
    }

    /// η̂ = F(u), a signed residual.
    pub fn decode_noise<T: Real>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        self.check_latent(g, u, 1)?;
        Ok(self.apply(Group::Phi, g, u))
    }

    /// ŷ = R([z ‖ u]).
    pub fn cross_decode<T: Real>(&self, g: &mut Graph<T>, z: Var, u: Var) -> Result<Var> {
        self.check_latent(g, z, 1)?;
        self.check_latent(g, u, 1)?;
        if g.shape(z) != g.shape(u) {
            return Err(Error::Shape(format!(
                "scene latent {:?} and noise latent {:?} are not aligned",
                g.shape(z),
                g.shape(u)
            )));
        }
        let zu = g.concat(z, u);
        Ok(self.apply(Group::Delta, g, zu))
    }
}

impl<T: Real> Networks<T> {
    pub fn group(&self, group: Group) -> &ParamGroup<T> {
        &self.groups[group.index()]
    }

    pub fn group_mut(&mut self, group: Group) -> &mut ParamGroup<T> {
        &mut self.groups[group.index()]
    }

    pub fn numel(&self) -> usize {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    /// Places every group on `g`, as trainable leaves where `trainable`
    /// says so and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(Group) -> bool) -> BoundNets {
        let vars = Group::ALL
            .into_iter()
            .map(|group| {
                let train = trainable(group);
                self.group(group)
                    .tensors
                    .iter()
                    .map(|t| {
                        if train {
                            g.param(t.clone())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect()
            })
            .collect();
        BoundNets {
            cfg: self.cfg.clone(),
            vars,
        }
    }

    pub fn cast<U: Real>(&self) -> Networks<U> {
        Networks {
            cfg: self.cfg.clone(),
            groups: self
                .groups
                .iter()
                .map(|p| ParamGroup {
                    names: p.names.clone(),
                    tensors: p.tensors.iter().map(Tensor::cast).collect(),
                })
                .collect(),
        }
    }

    fn infer(&self, x: &Tensor<T>, f: impl FnOnce(&BoundNets, &mut Graph<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nets = self.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = f(&nets, &mut g, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_scene(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(y, |n, g, v| n.encode_scene(g, v))
    }

    pub fn decode_scene(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(z, |n, g, v| n.decode_scene(g, v))
    }

    pub fn encode_noise(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(y, |n, g, v| n.encode_noise(g, v))
    }

    pub fn decode_noise(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(u, |n, g, v| n.decode_noise(g, v))
    }

    pub fn cross_decode(&self, z: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nets = self.bind(&mut g, |_| false);
        let (zv, uv) = (g.constant(z.clone()), g.constant(u.clone()));
        let out = nets.cross_decode(&mut g, zv, uv)?;
        Ok(g.value(out).clone())
    }

    /// D(G(y)) without clipping.
    pub fn restore(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(y, |n, g, v| {
            let z = n.encode_scene(g, v)?;
            n.decode_scene(g, z)
        })
    }

    pub fn latents(&self, y: &Tensor<T>, source_view: usize) -> Result<LatentBundle<T>> {
        Ok(LatentBundle {
            z: self.encode_scene(y)?,
            u: self.encode_noise(y)?,
            source_view,
        })
    }
}

/// Parameters plus optimizer moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub nets: Networks<f32>,
    /// First moments, laid out like `nets.groups`.
    pub m: Vec<ParamGroup<f32>>,
    /// Second moments, laid out like `nets.groups`.
    pub v: Vec<ParamGroup<f32>>,
    pub step: u64,
}

impl TrainState {
    pub fn new(nets: Networks<f32>) -> Self {
        let m: Vec<_> = nets.groups.iter().map(ParamGroup::zeros_like).collect();
        let v = m.clone();
        Self { nets, m, v, step: 0 }
    }

    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(build_networks(cfg, seed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect())
    }

    fn attention_cfg() -> BackboneConfig {
        BackboneConfig {
            channels: 8,
            heads: 2,
            window: 4,
            patch_embed: 2,
            ..BackboneConfig::windowed_attention()
        }
    }

    #[test]
    fn conv_small_shapes() {
        let cfg = BackboneConfig::conv_small(2, 8);
        let nets = build_networks::<f64>(&cfg, 1).unwrap();
        let y = random(&[1, 48, 48, 3], 2);
        let z = nets.encode_scene(&y).unwrap();
        assert_eq!(z.shape(), &[1, 48, 48, 8]);
        let u = nets.encode_noise(&y).unwrap();
        assert_eq!(nets.decode_scene(&z).unwrap().shape(), &[1, 48, 48, 3]);
        assert_eq!(nets.decode_noise(&u).unwrap().shape(), &[1, 48, 48, 3]);
        assert_eq!(nets.cross_decode(&z, &u).unwrap().shape(), &[1, 48, 48, 3]);
    }

    #[test]
    fn attention_shapes() {
        let cfg = BackboneConfig {
            window: 8,
            ..attention_cfg()
        };
        let nets = build_networks::<f64>(&cfg, 1).unwrap();
        let y = random(&[1, 48, 48, 3], 2);
        let z = nets.encode_scene(&y).unwrap();
        assert_eq!(z.shape(), &[1, 24, 24, 8]);
        assert_eq!(nets.restore(&y).unwrap().shape(), &[1, 48, 48, 3]);
        let u = nets.encode_noise(&y).unwrap();
        assert_eq!(nets.cross_decode(&z, &u).unwrap().shape(), &[1, 48, 48, 3]);
    }

    #[test]
    fn round_trip_shape_matrix() {
        let cases = [
            (BackboneConfig::conv_small(1, 4), 8, 12),
            (BackboneConfig::conv_small(3, 6), 5, 7),
            (attention_cfg(), 16, 8),
            (
                BackboneConfig {
                    patch_embed: 1,
                    depth: 1,
                    ..attention_cfg()
                },
                8,
                12,
            ),
            (
                BackboneConfig {
                    image_channels: 1,
                    mask_channel: true,
                    ..BackboneConfig::conv_small(2, 4)
                },
                6,
                6,
            ),
        ];
        for (cfg, h, w) in cases {
            let nets = build_networks::<f64>(&cfg, 3).unwrap();
            let y = random(&[2, h, w, cfg.input_channels()], 4);
            let out = nets.restore(&y).unwrap();
            assert_eq!(out.shape(), &[2, h, w, cfg.image_channels], "{cfg:?}");
            assert!(out.all_finite());
        }
    }

    #[test]
    fn config_errors() {
        let mut cfg = attention_cfg();
        cfg.heads = 3;
        assert!(build_networks::<f32>(&cfg, 0).is_err());
        let cfg = attention_cfg();
        let nets = build_networks::<f32>(&cfg, 0).unwrap();
        assert!(matches!(
            nets.restore(&Tensor::zeros(&[1, 12, 12, 3])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            nets.restore(&Tensor::zeros(&[1, 16, 16, 1])),
            Err(Error::Shape(_))
        ));
        assert!(build_networks::<f32>(&BackboneConfig::conv_small(0, 4), 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        for cfg in [BackboneConfig::conv_small(2, 4), attention_cfg()] {
            let a = build_networks::<f32>(&cfg, 7).unwrap();
            assert_eq!(a, build_networks::<f32>(&cfg, 7).unwrap());
            assert_ne!(a, build_networks::<f32>(&cfg, 8).unwrap());
            assert_ne!(a.group(Group::Theta), a.group(Group::Rho));
        }
    }

    #[test]
    fn zero_inputs_give_finite_deterministic_outputs() {
        for cfg in [BackboneConfig::conv_small(2, 4), attention_cfg()] {
            let nets = build_networks::<f32>(&cfg, 1).unwrap();
            let y = Tensor::zeros(&[1, 8, 8, 3]);
            let z = nets.encode_scene(&y).unwrap();
            let u = nets.encode_noise(&y).unwrap();
            assert!(z.all_finite() && u.all_finite());
            let zeros = Tensor::zeros(z.shape());
            let out = nets.cross_decode(&zeros, &zeros).unwrap();
            assert!(out.all_finite());
            assert_eq!(out, nets.cross_decode(&zeros, &zeros).unwrap());
            assert_eq!(nets.restore(&y).unwrap(), nets.restore(&y).unwrap());
        }
    }

    #[test]
    fn decoders_see_only_latents() {
        // Decoding a fixed latent on a graph that also holds a perturbed image
        // must not depend on that image.
        for cfg in [BackboneConfig::conv_small(2, 4), attention_cfg()] {
            let nets = build_networks::<f64>(&cfg, 1).unwrap();
            let y = random(&[1, 8, 8, 3], 5);
            let z = nets.encode_scene(&y).unwrap();
            let u = nets.encode_noise(&y).unwrap();
            let outputs = |img: &Tensor<f64>| {
                let mut g = Graph::new();
                let b = nets.bind(&mut g, |_| true);
                let yv = g.param(img.clone());
                let _ = b.encode_scene(&mut g, yv).unwrap();
                let zv = g.constant(z.clone());
                let uv = g.constant(u.clone());
                let x = b.decode_scene(&mut g, zv).unwrap();
                let n = b.decode_noise(&mut g, uv).unwrap();
                let c = b.cross_decode(&mut g, zv, uv).unwrap();
                [x, n, c].map(|v| g.value(v).clone())
            };
            let perturbed = y.map(|v| 1.0 - v);
            assert_eq!(outputs(&y), outputs(&perturbed));
        }
    }

    #[test]
    fn finite_difference_per_network() {
        for cfg in [BackboneConfig::conv_small(2, 3), attention_cfg()] {
            let nets = build_networks::<f64>(&cfg, 11).unwrap();
            let y = random(&[1, 8, 8, 3], 12);
            let target = random(&[1, 8, 8, 3], 13);
            let loss_of = |nets: &Networks<f64>, group: Group| -> (f64, Vec<Tensor<f64>>) {
                let mut g = Graph::new();
                let b = nets.bind(&mut g, |gr| gr == group);
                let yv = g.constant(y.clone());
                let out = match group {
                    Group::Theta | Group::Psi => {
                        let z = b.encode_scene(&mut g, yv).unwrap();
                        b.decode_scene(&mut g, z).unwrap()
                    }
                    Group::Rho | Group::Phi => {
                        let u = b.encode_noise(&mut g, yv).unwrap();
                        b.decode_noise(&mut g, u).unwrap()
                    }
                    Group::Delta => {
                        let z = b.encode_scene(&mut g, yv).unwrap();
                        let u = b.encode_noise(&mut g, yv).unwrap();
                        b.cross_decode(&mut g, z, u).unwrap()
                    }
                };
                let t = g.constant(target.clone());
                let d = g.sub(out, t);
                let l = g.mean_sq(d);
                let mut grads = g.backward(l);
                let gs = b.vars(group).iter().map(|&v| grads.take(v).unwrap()).collect();
                (g.scalar(l), gs)
            };
            let mut r = rng::stream(14, &[]);
            for group in Group::ALL {
                let (_, grads) = loss_of(&nets, group);
                for _ in 0..5 {
                    let ti = r.random_range(0..grads.len());
                    let ei = r.random_range(0..grads[ti].len());
                    let h = 1e-6;
                    let mut plus = nets.clone();
                    plus.group_mut(group).tensors[ti].data_mut()[ei] += h;
                    let mut minus = nets.clone();
                    minus.group_mut(group).tensors[ti].data_mut()[ei] -= h;
                    let fd = (loss_of(&plus, group).0 - loss_of(&minus, group).0) / (2.0 * h);
                    let an = grads[ti].data()[ei];
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-7);
                    assert!(rel < 1e-3, "{:?} {group} param {ti}[{ei}]: fd {fd} vs {an}", cfg.kind);
                }
            }
        }
    }
}
