use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamParams;
use crate::backbone::BackboneConfig;
use crate::config::KvConfig;
use crate::corruption::CorruptionPool;
use crate::dataio::{scan_dataset, synthetic, Dataset, Split, SplitRule};
use crate::disentangle::LossConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// All five networks, four loss terms.
    Med,
    /// Scene encoder/decoder regressing one noisy view onto another.
    N2n,
    /// Scene encoder/decoder regressing a noisy view onto the clean patch.
    N2c,
}

impl Schema {
    pub fn name(self) -> &'static str {
        match self {
            Schema::Med => "med",
            Schema::N2n => "n2n",
            Schema::N2c => "n2c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "med" => Ok(Schema::Med),
            "n2n" => Ok(Schema::N2n),
            "n2c" => Ok(Schema::N2c),
            _ => Err(Error::Config(format!(
                "unknown schema '{s}' (expected med, n2n or n2c)"
            ))),
        }
    }
}

/// Where training patches come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Image folder, split by filename hash; training uses the train split.
    Dir { path: PathBuf, split: SplitRule },
    /// Procedural scenes, see [`synthetic::toy_set`].
    Toy { count: usize, size: usize, seed: u64 },
}

impl DataSource {
    /// `toy:COUNT:SIZE:SEED` or a directory path.
    pub fn parse(s: &str, split: SplitRule) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("toy:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let num = |i: usize| -> Result<u64> {
                parts
                    .get(i)
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad toy data spec '{s}' (expected toy:COUNT:SIZE:SEED)")))
            };
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "bad toy data spec '{s}' (expected toy:COUNT:SIZE:SEED)"
                )));
            }
            return Ok(DataSource::Toy {
                count: num(0)? as usize,
                size: num(1)? as usize,
                seed: num(2)?,
            });
        }
        Ok(DataSource::Dir {
            path: PathBuf::from(s),
            split,
        })
    }

    pub fn spec(&self) -> String {
        match self {
            DataSource::Dir { path, .. } => path.display().to_string(),
            DataSource::Toy { count, size, seed } => format!("toy:{count}:{size}:{seed}"),
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DataSource::Dir { path, split: rule } => {
                if !path.exists() {
                    return Err(Error::NotFound(path.clone()));
                }
                Dataset::load(&scan_dataset(path, *rule)?, split)
            }
            DataSource::Toy { count, size, seed } => {
                // Held-out splits use a disjoint seed stream.
                let stream = match split {
                    Split::Train => 0,
                    Split::Val => 1,
                    Split::Test => 2,
                };
                Dataset::from_images(synthetic::toy_set(
                    *count,
                    *size,
                    crate::rng::derive_seed(*seed, &[stream]),
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schema: Schema,
    pub iters: u64,
    pub batch: usize,
    pub patch: usize,
    pub views: usize,
    pub lr: f64,
    pub adam: AdamParams,
    pub decay_every: u64,
    pub decay_ratio: f64,
    pub seed: u64,
    pub pool: CorruptionPool,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub ckpt_every: u64,
    pub keep_ckpts: usize,
    pub augment: bool,
    pub data: Option<DataSource>,
    pub split: SplitRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema: Schema::Med,
            iters: 500_000,
            batch: 8,
            patch: 48,
            views: 2,
            lr: 1e-4,
            adam: AdamParams::default(),
            decay_every: 100_000,
            decay_ratio: 0.5,
            seed: 0,
            pool: CorruptionPool::gaussian(25.0, 25.0),
            loss: LossConfig::default(),
            backbone: BackboneConfig::default(),
            ckpt_every: 10_000,
            keep_ckpts: 3,
            augment: true,
            data: None,
            split: SplitRule::all_train(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.patch == 0 {
            return bad("batch and patch must be >= 1".into());
        }
        if self.views < 2 && self.schema != Schema::N2c {
            return bad(format!("schema {} needs views >= 2", self.schema.name()));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio <= 1.0) {
            return bad(format!("lr.decay_ratio {} outside (0, 1]", self.decay_ratio));
        }
        if self.decay_every == 0 {
            return bad("lr.decay_every must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.keep_ckpts == 0 {
            return bad("keep_ckpts must be >= 1".into());
        }
        self.backbone.validate()?;
        self.backbone.check_size(self.patch, self.patch)?;
        self.loss.validate()
    }

    /// Reads every known key over the defaults. Unknown keys are left for
    /// the caller's [`KvConfig::finish`].
    pub fn read(kv: &mut KvConfig, base_dir: Option<&Path>) -> Result<Self> {
        let mut c = Self::default();
        if let Some(s) = kv.take::<String>("schema")? {
            c.schema = Schema::parse(&s)?;
        }
        c.iters = kv.take_or("iters", c.iters)?;
        c.batch = kv.take_or("batch", c.batch)?;
        c.patch = kv.take_or("patch", c.patch)?;
        c.views = kv.take_or("views", c.views)?;
        c.lr = kv.take_or("lr", c.lr)?;
        c.adam.beta1 = kv.take_or("adam.beta1", c.adam.beta1)?;
        c.adam.beta2 = kv.take_or("adam.beta2", c.adam.beta2)?;
        c.adam.eps = kv.take_or("adam.eps", c.adam.eps)?;
        c.decay_every = kv.take_or("lr.decay_every", c.decay_every)?;
        c.decay_ratio = kv.take_or("lr.decay_ratio", c.decay_ratio)?;
        c.seed = kv.take_or("seed", c.seed)?;
        let inline = kv.take::<String>("pool")?;
        let file = kv.take::<String>("pool.file")?;
        c.pool = match (inline, file) {
            (Some(_), Some(_)) => return Err(Error::Config("set only one of pool and pool.file".into())),
            (Some(p), None) => parse_inline_pool(&p)?,
            (None, Some(f)) => {
                let path = resolve(base_dir, &f);
                if !path.exists() {
                    return Err(Error::NotFound(path));
                }
                CorruptionPool::load(&path)?
            }
            (None, None) => c.pool,
        };
        c.loss = c.loss.read(kv)?;
        c.backbone = c.backbone.read(kv)?;
        c.ckpt_every = kv.take_or("ckpt_every", c.ckpt_every)?;
        c.keep_ckpts = kv.take_or("keep_ckpts", c.keep_ckpts)?;
        c.augment = kv.take_or("augment", c.augment)?;
        if let Some(s) = kv.take::<String>("data.split")? {
            c.split = SplitRule::parse(&s)?;
        }
        if let Some(d) = kv.take::<String>("data")? {
            c.data = Some(match DataSource::parse(&d, c.split)? {
                DataSource::Dir { path, split } => DataSource::Dir {
                    path: resolve(base_dir, &path.to_string_lossy()),
                    split,
                },
                toy => toy,
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let c = Self::read(&mut kv, None)?;
        kv.finish()?;
        Ok(c)
    }

    /// Fully resolved key/value form; [`TrainConfig::from_text`] inverts it.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("schema", self.schema.name());
        kv.set("iters", self.iters);
        kv.set("batch", self.batch);
        kv.set("patch", self.patch);
        kv.set("views", self.views);
        kv.set("lr", self.lr);
        kv.set("adam.beta1", self.adam.beta1);
        kv.set("adam.beta2", self.adam.beta2);
        kv.set("adam.eps", self.adam.eps);
        kv.set("lr.decay_every", self.decay_every);
        kv.set("lr.decay_ratio", self.decay_ratio);
        kv.set("seed", self.seed);
        kv.set("pool", inline_pool(&self.pool));
        self.loss.write(&mut kv);
        self.backbone.write(&mut kv);
        kv.set("ckpt_every", self.ckpt_every);
        kv.set("keep_ckpts", self.keep_ckpts);
        kv.set("augment", self.augment);
        kv.set("data.split", self.split);
        if let Some(d) = &self.data {
            kv.set("data", d.spec());
        }
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        super::adam::lr_at(self.lr, self.decay_every, self.decay_ratio, step)
    }
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path,
    }
}

/// Pool lines joined by `;`, or a preset name (`noise`, `identity`).
pub fn parse_inline_pool(s: &str) -> Result<CorruptionPool> {
    match s.trim() {
        "noise" => Ok(CorruptionPool::noise_pool()),
        "identity" => Ok(CorruptionPool::identity()),
        other => CorruptionPool::parse(&other.replace(';', "\n")),
    }
}

pub fn inline_pool(pool: &CorruptionPool) -> String {
    pool.to_text().trim_end().replace('\n', "; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let text = "schema = n2n\niters = 20\nlr = 0.001\npool = gaussian sigma=5:50; poisson lambda_mean=5:30 2\n\
                    backbone.kind = conv_small\nbackbone.channels = 8\ndata = toy:4:32:1\npatch = 16\n";
        let c = TrainConfig::from_text(text).unwrap();
        assert_eq!(c.schema, Schema::N2n);
        assert_eq!(c.pool.entries().len(), 2);
        assert_eq!(c.backbone.channels, 8);
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_text("decay_ratio = 2").is_err());
        assert!(TrainConfig::from_text("lr.decay_ratio = 0").is_err());
        assert!(TrainConfig::from_text("views = 1").is_err());
        assert!(TrainConfig::from_text("schema = n2c\nviews = 1").is_ok());
        assert!(TrainConfig::from_text("patch = 20").is_err());
        assert!(TrainConfig::from_text("data = toy:3").is_err());
    }

    #[test]
    fn toy_splits_differ() {
        let d = DataSource::parse("toy:2:16:3", SplitRule::all_train()).unwrap();
        let train = d.load(Split::Train).unwrap();
        let test = d.load(Split::Test).unwrap();
        assert_ne!(train.images[0], test.images[0]);
    }
}
