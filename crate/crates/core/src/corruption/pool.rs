use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{CorruptionSpec, Family, Kernel};
use crate::error::{Error, Result};

/// Sampling range for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamRange {
    /// Uniform real on `[lo, hi]`.
    Uniform(f64, f64),
    /// Uniform integer on `[lo, hi]`.
    Integer(i64, i64),
}

impl ParamRange {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ParamRange::Uniform(lo, hi) if lo == hi => lo,
            ParamRange::Uniform(lo, hi) => rng.random_range(lo..=hi),
            ParamRange::Integer(lo, hi) => rng.random_range(lo..=hi) as f64,
        }
    }
}

fn is_integer_key(key: &str) -> bool {
    matches!(key, "scale" | "window" | "per_channel")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub family: Family,
    pub ranges: BTreeMap<String, ParamRange>,
    /// Candidate kernels for downscale entries, chosen uniformly.
    pub kernels: Vec<Kernel>,
    pub weight: f64,
}

impl PoolEntry {
    pub fn new(family: Family, ranges: &[(&str, ParamRange)], weight: f64) -> Self {
        Self {
            family,
            ranges: ranges.iter().map(|(k, r)| (k.to_string(), r.clone())).collect(),
            kernels: if family == Family::Downscale {
                Kernel::ALL.to_vec()
            } else {
                Vec::new()
            },
            weight,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::Config(format!("{} weight must be >= 0", self.family)));
        }
        for (key, range) in &self.ranges {
            if !self.family.keys().iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("{} does not accept '{key}'", self.family)));
            }
            let (lo, hi) = match *range {
                ParamRange::Uniform(lo, hi) => (lo, hi),
                ParamRange::Integer(lo, hi) => (lo as f64, hi as f64),
            };
            if lo > hi {
                return Err(Error::Config(format!("{} {key}: empty range {lo}:{hi}", self.family)));
            }
        }
        // Both endpoints must produce valid specs.
        for pick_hi in [false, true] {
            let mut spec = CorruptionSpec {
                family: self.family,
                params: BTreeMap::new(),
                kernel: self.kernels.first().copied(),
                seed: 0,
            };
            for (key, range) in &self.ranges {
                let v = match *range {
                    ParamRange::Uniform(lo, hi) => {
                        if pick_hi {
                            hi
                        } else {
                            lo
                        }
                    }
                    ParamRange::Integer(lo, hi) => (if pick_hi { hi } else { lo }) as f64,
                };
                spec.params.insert(key.clone(), v);
            }
            spec.fill_defaults();
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Renders the entry as one pool-file line.
    pub fn to_line(&self) -> String {
        let mut parts = vec![self.family.name().to_string()];
        for (k, r) in &self.ranges {
            parts.push(match r {
                ParamRange::Uniform(lo, hi) => format!("{k}={lo}:{hi}"),
                ParamRange::Integer(lo, hi) => format!("{k}={lo}:{hi}"),
            });
        }
        if self.family == Family::Downscale {
            let names: Vec<&str> = self.kernels.iter().map(|k| k.name()).collect();
            parts.push(format!("kernel={}", names.join("|")));
        }
        parts.push(format!("{}", self.weight));
        parts.join(" ")
    }
}

/// Weighted set of corruption families with parameter ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionPool {
    entries: Vec<PoolEntry>,
}

impl CorruptionPool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("corruption pool is empty".into()));
        }
        for e in &entries {
            e.validate()?;
        }
        if entries.iter().all(|e| e.weight == 0.0) {
            return Err(Error::Config("corruption pool has zero total weight".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn identity() -> Self {
        Self::new(vec![PoolEntry::new(Family::Identity, &[], 1.0)]).expect("valid pool")
    }

    /// Gaussian noise with `sigma` uniform on `[lo, hi]`.
    pub fn gaussian(lo: f64, hi: f64) -> Self {
        Self::new(vec![PoolEntry::new(
            Family::Gaussian,
            &[("sigma", ParamRange::Uniform(lo, hi))],
            1.0,
        )])
        .expect("valid pool")
    }

    /// The five noise families at the levels used for pool training.
    pub fn noise_pool() -> Self {
        Self::parse(
            "gaussian sigma=5:50 1\n\
             local_var_gaussian k=0.5:2 1\n\
             poisson lambda_mean=5:30 1\n\
             speckle v=25:50 1\n\
             salt_pepper r=0.05:0.2 1\n",
        )
        .expect("valid builtin pool")
    }

    /// Parses the line format `family key=lo:hi ... weight`.
    ///
    /// `#` starts a comment. A single value `key=v` is a degenerate range,
    /// `kernel=a|b` lists downscale kernels, and a trailing bare number is
    /// the weight (default 1).
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("pool line {}: {msg}", lineno + 1));
            let mut tokens = line.split_whitespace();
            let family = Family::parse(tokens.next().expect("non-empty line")).map_err(|e| err(e.to_string()))?;
            let mut entry = PoolEntry::new(family, &[], 1.0);
            for tok in tokens {
                match tok.split_once('=') {
                    Some(("kernel", list)) => {
                        entry.kernels = list
                            .split('|')
                            .map(Kernel::parse)
                            .collect::<Result<_>>()
                            .map_err(|e| err(e.to_string()))?;
                    }
                    Some((key, range)) => {
                        let (lo, hi) = range.split_once(':').unwrap_or((range, range));
                        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| err(format!("bad number '{s}'")));
                        let (lo, hi) = (parse(lo)?, parse(hi)?);
                        let r = if is_integer_key(key) {
                            if lo.fract() != 0.0 || hi.fract() != 0.0 {
                                return Err(err(format!("'{key}' takes integers")));
                            }
                            ParamRange::Integer(lo as i64, hi as i64)
                        } else {
                            ParamRange::Uniform(lo, hi)
                        };
                        entry.ranges.insert(key.to_string(), r);
                    }
                    None => {
                        entry.weight = tok.parse().map_err(|_| err(format!("bad weight '{tok}'")))?;
                    }
                }
            }
            if family == Family::Downscale && entry.kernels.is_empty() {
                return Err(err("downscale needs at least one kernel".into()));
            }
            for (key, default) in family.keys() {
                if default.is_none() && !entry.ranges.contains_key(*key) {
                    return Err(err(format!("{family} requires '{key}'")));
                }
            }
            entry.validate().map_err(|e| err(e.to_string()))?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }
}

/// Draws a family by weight, each ranged parameter uniformly, and a fresh seed.
pub fn sample_spec<R: Rng + ?Sized>(pool: &CorruptionPool, rng: &mut R) -> Result<CorruptionSpec> {
    let weights: Vec<f64> = pool.entries.iter().map(|e| e.weight).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let entry = &pool.entries[pick.sample(rng)];
    let mut params = BTreeMap::new();
    for (key, range) in &entry.ranges {
        params.insert(key.clone(), range.sample(rng));
    }
    let kernel = if entry.family == Family::Downscale {
        Some(entry.kernels[rng.random_range(0..entry.kernels.len())])
    } else {
        None
    };
    let mut spec = CorruptionSpec {
        family: entry.family,
        params,
        kernel,
        seed: rng.random(),
    };
    spec.fill_defaults();
    spec.validate()?;
    Ok(spec)
}
