//! Corruption synthesis: noise families, resolution loss and pixel dropping,
//! plus weighted pools that draw a fresh [`CorruptionSpec`] per view.

mod noise;
mod pool;
mod resample;
mod stats;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{ImageTensor, MaskTensor};
use crate::error::{Error, Result};

pub use noise::{
    apply_gaussian, apply_local_var_gaussian, apply_poisson, apply_salt_pepper, apply_speckle, apply_speckle_uniform,
    local_std_map, local_var_noise_field,
};
pub use pool::{sample_spec, CorruptionPool, ParamRange, PoolEntry};
pub use resample::{apply_downscale, downscale, resize, Kernel};
pub use stats::{noise_statistics, NoiseCheck};

/// Default neighbourhood for local-variance Gaussian noise.
pub const DEFAULT_LVG_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    LocalVarGaussian,
    Poisson,
    Speckle,
    SpeckleUniform,
    SaltPepper,
    Downscale,
    DropMask,
    Identity,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Gaussian,
        Family::LocalVarGaussian,
        Family::Poisson,
        Family::Speckle,
        Family::SpeckleUniform,
        Family::SaltPepper,
        Family::Downscale,
        Family::DropMask,
        Family::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::LocalVarGaussian => "local_var_gaussian",
            Family::Poisson => "poisson",
            Family::Speckle => "speckle",
            Family::SpeckleUniform => "speckle_uniform",
            Family::SaltPepper => "salt_pepper",
            Family::Downscale => "downscale",
            Family::DropMask => "drop_mask",
            Family::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption family '{s}'")))
    }

    /// Parameter keys this family accepts, with their defaults when optional.
    pub fn keys(self) -> &'static [(&'static str, Option<f64>)] {
        match self {
            Family::Gaussian => &[("sigma", None)],
            Family::LocalVarGaussian => &[("k", None), ("window", Some(DEFAULT_LVG_WINDOW as f64))],
            Family::Poisson => &[("lambda_mean", None)],
            Family::Speckle => &[("v", None)],
            Family::SaltPepper => &[("r", None), ("per_channel", Some(0.0))],
            Family::Downscale => &[("scale", None)],
            Family::DropMask => &[("drop_ratio", None)],
            Family::SpeckleUniform | Family::Identity => &[],
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One fully-resolved corruption: family, parameters and RNG seed.
///
/// Levels (`sigma`, `lambda_mean`, `v`) are on the 0–255 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: Family,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    pub seed: u64,
}

/// Output of applying a corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub image: ImageTensor,
    /// Present only for pixel dropping.
    pub mask: Option<MaskTensor>,
}

impl CorruptionSpec {
    pub fn new(family: Family, params: &[(&str, f64)], seed: u64) -> Result<Self> {
        let mut spec = Self {
            family,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            kernel: (family == Family::Downscale).then_some(Kernel::Bicubic),
            seed,
        };
        spec.fill_defaults();
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self {
            family: Family::Identity,
            params: BTreeMap::new(),
            kernel: None,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        Self::new(Family::Gaussian, &[("sigma", sigma)], seed)
    }

    pub fn downscale(scale: usize, kernel: Kernel) -> Result<Self> {
        let mut s = Self::new(Family::Downscale, &[("scale", scale as f64)], 0)?;
        s.kernel = Some(kernel);
        Ok(s)
    }

    pub fn drop_mask(drop_ratio: f64, seed: u64) -> Result<Self> {
        Self::new(Family::DropMask, &[("drop_ratio", drop_ratio)], seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn fill_defaults(&mut self) {
        for (key, default) in self.family.keys() {
            if let Some(d) = default {
                self.params.entry(key.to_string()).or_insert(*d);
            }
        }
    }

    pub fn param(&self, key: &str) -> f64 {
        self.params[key]
    }

    /// Checks the parameter set is exactly the family's and every value is
    /// in range.
    pub fn validate(&self) -> Result<()> {
        let keys = self.family.keys();
        for (k, _) in keys {
            if !self.params.contains_key(*k) {
                return Err(Error::Param(format!("{} requires '{k}'", self.family)));
            }
        }
        for k in self.params.keys() {
            if !keys.iter().any(|(name, _)| name == k) {
                return Err(Error::Param(format!("{} does not accept '{k}'", self.family)));
            }
        }
        if (self.family == Family::Downscale) != self.kernel.is_some() {
            return Err(Error::Param("kernel is required for (and only for) downscale".into()));
        }
        let check = |key: &str, ok: &dyn Fn(f64) -> bool, what: &str| -> Result<()> {
            let v = self.params[key];
            if v.is_finite() && ok(v) {
                Ok(())
            } else {
                Err(Error::Param(format!("{} {key}={v}: {what}", self.family)))
            }
        };
        match self.family {
            Family::Gaussian => check("sigma", &|v| v >= 0.0, "must be >= 0"),
            Family::LocalVarGaussian => {
                check("k", &|v| v >= 0.0, "must be >= 0")?;
                check(
                    "window",
                    &|v| v.fract() == 0.0 && v >= 3.0 && (v as usize) % 2 == 1,
                    "must be odd and >= 3",
                )
            }
            Family::Poisson => check("lambda_mean", &|v| v >= 0.0, "must be >= 0"),
            Family::Speckle => check("v", &|v| v >= 0.0, "must be >= 0"),
            Family::SaltPepper => {
                check("r", &|v| (0.0..=1.0).contains(&v), "must lie in [0,1]")?;
                check("per_channel", &|v| v == 0.0 || v == 1.0, "must be 0 or 1")
            }
            Family::Downscale => check("scale", &|v| [2.0, 3.0, 4.0].contains(&v), "must be 2, 3 or 4"),
            Family::DropMask => check("drop_ratio", &|v| (0.0..1.0).contains(&v), "must lie in [0,1)"),
            Family::SpeckleUniform | Family::Identity => Ok(()),
        }
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<Corrupted> {
        self.validate()?;
        let image = match self.family {
            Family::Gaussian => apply_gaussian(img, self.param("sigma"), self.seed)?,
            Family::LocalVarGaussian => {
                apply_local_var_gaussian(img, self.param("k"), self.param("window") as usize, self.seed)?
            }
            Family::Poisson => apply_poisson(img, self.param("lambda_mean"), self.seed)?,
            Family::Speckle => apply_speckle(img, self.param("v"), self.seed)?,
            Family::SpeckleUniform => apply_speckle_uniform(img, self.seed)?,
            Family::SaltPepper => apply_salt_pepper(img, self.param("r"), self.param("per_channel") == 1.0, self.seed)?,
            Family::Downscale => apply_downscale(img, self.param("scale") as usize, self.kernel.expect("validated"))?,
            Family::DropMask => {
                let (image, mask) = apply_drop_mask(img, self.param("drop_ratio"), self.seed)?;
                return Ok(Corrupted {
                    image,
                    mask: Some(mask),
                });
            }
            Family::Identity => img.clone(),
        };
        Ok(Corrupted { image, mask: None })
    }

    /// Short human-readable label, e.g. `gaussian(sigma=25)`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        if let Some(k) = self.kernel {
            parts.push(format!("kernel={}", k.name()));
        }
        format!("{}({})", self.family, parts.join(","))
    }
}

/// Zeroes exactly `round(drop_ratio·H·W)` pixels chosen by a seeded
/// permutation. The mask marks kept pixels with `1`.
pub fn apply_drop_mask(img: &ImageTensor, drop_ratio: f64, seed: u64) -> Result<(ImageTensor, MaskTensor)> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::Param(format!("drop_ratio must lie in [0,1), got {drop_ratio}")));
    }
    let n = img.pixel_count();
    let count = (drop_ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = noise::rng_for(seed);
    let (dropped, _) = order.partial_shuffle(&mut rng, count);
    let mut mask = vec![1u8; n];
    let mut out = img.clone();
    let c = img.channels();
    for &p in dropped.iter() {
        mask[p] = 0;
        out.data_mut()[p * c..(p + 1) * c].fill(0.0);
    }
    Ok((out, MaskTensor::new(img.height(), img.width(), mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(CorruptionSpec::new(Family::Gaussian, &[], 0).is_err());
        assert!(CorruptionSpec::new(Family::Gaussian, &[("sigma", 5.0), ("v", 1.0)], 0).is_err());
        assert!(CorruptionSpec::new(Family::Downscale, &[("scale", 5.0)], 0).is_err());
        assert!(CorruptionSpec::new(Family::DropMask, &[("drop_ratio", 1.0)], 0).is_err());
        let lvg = CorruptionSpec::new(Family::LocalVarGaussian, &[("k", 1.0)], 0).unwrap();
        assert_eq!(lvg.param("window"), 7.0);
        assert!(CorruptionSpec::new(Family::LocalVarGaussian, &[("k", 1.0), ("window", 4.0)], 0).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = CorruptionSpec::downscale(3, Kernel::Lanczos).unwrap().with_seed(42);
        let line = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            line,
            r#"{"family":"downscale","params":{"scale":3.0},"kernel":"lanczos","seed":42}"#
        );
        assert_eq!(serde_json::from_str::<CorruptionSpec>(&line).unwrap(), spec);
    }

    #[test]
    fn drop_mask_exact_counts() {
        let img = ImageTensor::filled(100, 100, 3, 0.6);
        let (same, mask) = apply_drop_mask(&img, 0.0, 1).unwrap();
        assert_eq!(same, img);
        assert_eq!(mask, MaskTensor::ones(100, 100));
        let (out, mask) = apply_drop_mask(&img, 0.9, 1).unwrap();
        assert_eq!(mask.dropped_count(), 9000);
        let zeros = out.data().chunks(3).filter(|p| p.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zeros, 9000);
        assert!(apply_drop_mask(&img, 1.0, 1).is_err());
    }

    #[test]
    fn drop_masks_from_different_seeds_overlap_independently() {
        let img = ImageTensor::filled(100, 100, 1, 0.5);
        let (_, a) = apply_drop_mask(&img, 0.5, 3).unwrap();
        let (_, b) = apply_drop_mask(&img, 0.5, 4).unwrap();
        let both = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| **x == 0 && **y == 0)
            .count();
        let frac = both as f64 / 10_000.0;
        assert!((frac - 0.25).abs() < 0.01, "{frac}");
    }

    #[test]
    fn every_family_is_deterministic_and_in_range() {
        let img = ImageTensor::from_fn(24, 24, 3, |y, x, c| ((y * 5 + x * 3 + c) % 17) as f32 / 16.0);
        let specs = vec![
            CorruptionSpec::gaussian(30.0, 1).unwrap(),
            CorruptionSpec::new(Family::LocalVarGaussian, &[("k", 1.5)], 2).unwrap(),
            CorruptionSpec::new(Family::Poisson, &[("lambda_mean", 20.0)], 3).unwrap(),
            CorruptionSpec::new(Family::Speckle, &[("v", 40.0)], 4).unwrap(),
            CorruptionSpec::new(Family::SpeckleUniform, &[], 5).unwrap(),
            CorruptionSpec::new(Family::SaltPepper, &[("r", 0.2)], 6).unwrap(),
            CorruptionSpec::downscale(4, Kernel::Lanczos).unwrap(),
            CorruptionSpec::drop_mask(0.5, 7).unwrap(),
            CorruptionSpec::identity(),
        ];
        for spec in specs {
            let a = spec.apply(&img).unwrap();
            let b = spec.apply(&img).unwrap();
            assert_eq!(a, b, "{}", spec.label());
            assert!(a.image.in_unit_range(), "{}", spec.label());
            if let Some(m) = a.mask {
                assert!(m.data().iter().all(|&v| v <= 1));
            }
        }
    }
}
