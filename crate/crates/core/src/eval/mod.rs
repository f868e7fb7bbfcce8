//! Restoration metrics and benchmark grids.
//!
//! A benchmark corrupts every test image at every grid level with a seed
//! fixed per (image, family, level), so all checkpoints see identical
//! inputs, then reports mean PSNR/SSIM per (checkpoint, level).

mod metrics;
pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use metrics::{metric_pair, psnr, psnr_dropped, ssim, MetricPair, PSNR_CAP};

use crate::backbone::Networks;
use crate::config::KvConfig;
use crate::corruption::{CorruptionSpec, Family};
use crate::dataio::{Dataset, ImageTensor, MaskTensor, Split, SplitRule};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::trainer::{denoise, Checkpoint, DataSource, Tiling};

const EVAL_STREAM: u64 = 0xe7a1;

/// Anything that maps a corrupted image back to a clean estimate.
#[derive(Clone, Debug)]
pub enum Restorer {
    /// Returns its input; the "no model" baseline.
    Identity,
    Model(Box<Networks<f32>>),
}

impl Restorer {
    pub fn restore(&self, img: &ImageTensor, mask: Option<&MaskTensor>, tiling: Option<Tiling>) -> Result<ImageTensor> {
        match self {
            Restorer::Identity => Ok(img.clone()),
            Restorer::Model(nets) => denoise(nets, img, mask, tiling),
        }
    }

    /// `identity` or a checkpoint path.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "identity" {
            return Ok(Restorer::Identity);
        }
        let ck = Checkpoint::load(Path::new(spec))?;
        Ok(Restorer::Model(Box::new(ck.state.nets)))
    }
}

#[derive(Clone, Debug)]
pub struct NamedRestorer {
    pub name: String,
    pub restorer: Restorer,
}

/// A checkpoint reference as written in a grid file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointRef {
    pub name: String,
    /// `identity` or a file path.
    pub source: String,
}

impl CheckpointRef {
    /// `name=path`, a bare path (named by its file stem), or `identity`.
    pub fn parse(s: &str, base_dir: Option<&Path>) -> Result<Self> {
        let s = s.trim();
        let (name, src) = match s.split_once('=') {
            Some((n, p)) => (n.trim().to_string(), p.trim().to_string()),
            None => {
                let stem = Path::new(s).file_stem().and_then(|n| n.to_str()).unwrap_or(s);
                (stem.to_string(), s.to_string())
            }
        };
        if name.is_empty() || src.is_empty() {
            return Err(Error::Config(format!("bad checkpoint reference '{s}'")));
        }
        let source = if src == "identity" {
            src
        } else {
            match base_dir {
                Some(d) if Path::new(&src).is_relative() => d.join(&src).display().to_string(),
                _ => src,
            }
        };
        Ok(Self { name, source })
    }

    pub fn load(&self) -> Result<NamedRestorer> {
        Ok(NamedRestorer {
            name: self.name.clone(),
            restorer: Restorer::load(&self.source)?,
        })
    }
}

/// The parameter a grid level sets for `family`, if any.
pub fn level_key(family: Family) -> Option<&'static str> {
    family.keys().first().map(|(k, _)| *k)
}

/// Corruption for `family` at `level` with the given seed.
pub fn level_spec(family: Family, level: f64, seed: u64) -> Result<CorruptionSpec> {
    match level_key(family) {
        Some(key) => CorruptionSpec::new(family, &[(key, level)], seed),
        None if level == 0.0 => CorruptionSpec::new(family, &[], seed),
        None => Err(Error::Config(format!("{family} has no level parameter; use level 0"))),
    }
}

/// Which images a benchmark runs on.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalData {
    pub source: DataSource,
    /// `None` evaluates every image; toy sets then use their test stream.
    pub split: Option<Split>,
}

impl EvalData {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.source, self.split) {
            (DataSource::Toy { .. }, None) => self.source.load(Split::Test),
            (DataSource::Dir { path, .. }, None) => DataSource::Dir {
                path: path.clone(),
                split: SplitRule::all_train(),
            }
            .load(Split::Train),
            (src, Some(split)) => src.load(split),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkGrid {
    pub dataset: EvalData,
    pub dataset_name: String,
    pub checkpoints: Vec<CheckpointRef>,
    /// Families in [`Family::ALL`] order, each with its levels.
    pub levels: Vec<(Family, Vec<f64>)>,
    pub seed: u64,
    pub tiling: Option<Tiling>,
    /// For `drop_mask`, score only the dropped pixels.
    pub masked_only: bool,
    pub plots: bool,
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Config(format!("cannot parse '{p}' in {key}")))
        })
        .collect()
}

impl BenchmarkGrid {
    /// Reads grid keys:
    ///
    /// ```text
    /// dataset = path/to/images        # or toy:COUNT:SIZE:SEED
    /// dataset.name = cbsd68
    /// dataset.split = all             # all | train | val | test
    /// dataset.rule = 80/10/10         # split rule when dataset.split != all
    /// checkpoints = med=runs/med/final.mvd, identity
    /// grid.gaussian = 15, 25, 50
    /// grid.downscale = 2, 3, 4
    /// seed = 0
    /// tile = 256                      # optional, with overlap
    /// overlap = 32
    /// masked_only = false
    /// plots = true
    /// ```
    pub fn read(kv: &mut KvConfig, base_dir: Option<&Path>) -> Result<Self> {
        let ds: String = kv
            .take("dataset")?
            .ok_or_else(|| Error::Config("grid needs 'dataset'".into()))?;
        let rule = match kv.take::<String>("dataset.rule")? {
            Some(r) => SplitRule::parse(&r)?,
            None => SplitRule::new(80, 10, 10)?,
        };
        let split = match kv.take_or("dataset.split", "all".to_string())?.as_str() {
            "all" => None,
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            other => {
                return Err(Error::Config(format!(
                    "dataset.split must be all, train, val or test, got '{other}'"
                )))
            }
        };
        let source = match DataSource::parse(&ds, rule)? {
            DataSource::Dir { path, split } => DataSource::Dir {
                path: match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path,
                },
                split,
            },
            toy => toy,
        };
        let default_name = match &source {
            DataSource::Dir { path, .. } => path.file_name().and_then(|n| n.to_str()).unwrap_or("data").to_string(),
            DataSource::Toy { .. } => "toy".to_string(),
        };
        let dataset_name = kv.take_or("dataset.name", default_name)?;
        if dataset_name.contains(',') {
            return Err(Error::Config("dataset.name may not contain ','".into()));
        }
        let checkpoints = match kv.take::<String>("checkpoints")? {
            Some(s) => s
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| CheckpointRef::parse(p, base_dir))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let mut levels = Vec::new();
        for key in kv.keys().filter(|k| k.starts_with("grid.")).collect::<Vec<_>>() {
            let family = Family::parse(&key["grid.".len()..])?;
            let raw: String = kv.take(&key)?.expect("key listed");
            let vals: Vec<f64> = parse_list(&key, &raw)?;
            for &v in &vals {
                level_spec(family, v, 0)?;
            }
            levels.push((family, vals));
        }
        // Canonical family order keeps output independent of key order.
        levels.sort_by_key(|(f, _)| *f);
        let tile: Option<usize> = kv.take("tile")?;
        let overlap: usize = kv.take_or("overlap", 32)?;
        Ok(Self {
            dataset: EvalData { source, split },
            dataset_name,
            checkpoints,
            levels,
            seed: kv.take_or("seed", 0)?,
            tiling: tile.map(|tile| Tiling { tile, overlap }),
            masked_only: kv.take_or("masked_only", false)?,
            plots: kv.take_or("plots", true)?,
        })
    }

    pub fn from_text(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let grid = Self::read(&mut kv, base_dir)?;
        kv.finish()?;
        Ok(grid)
    }

    /// Fully resolved key/value form; [`BenchmarkGrid::read`] inverts it.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("dataset", self.dataset.source.spec());
        if let DataSource::Dir { split, .. } = &self.dataset.source {
            kv.set("dataset.rule", split);
        }
        let split = match self.dataset.split {
            None => "all",
            Some(Split::Train) => "train",
            Some(Split::Val) => "val",
            Some(Split::Test) => "test",
        };
        kv.set("dataset.split", split);
        kv.set("dataset.name", &self.dataset_name);
        let refs: Vec<String> = self
            .checkpoints
            .iter()
            .map(|c| format!("{}={}", c.name, c.source))
            .collect();
        kv.set("checkpoints", refs.join(", "));
        for (family, levels) in &self.levels {
            let vals: Vec<String> = levels.iter().map(f64::to_string).collect();
            kv.set(&format!("grid.{family}"), vals.join(", "));
        }
        kv.set("seed", self.seed);
        if let Some(t) = self.tiling {
            kv.set("tile", t.tile);
            kv.set("overlap", t.overlap);
        }
        kv.set("masked_only", self.masked_only);
        kv.set("plots", self.plots);
        kv
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path.parent())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    pub family: Family,
    pub level: f64,
    pub checkpoint: String,
    pub psnr: f64,
    pub ssim: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub const CSV_HEADER: &str = "dataset,family,level,checkpoint,psnr,ssim,n_images";

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.6},{}",
                r.dataset, r.family, r.level, r.checkpoint, r.psnr, r.ssim, r.n_images
            );
        }
        out
    }

    /// One block per family: levels down, checkpoints across, `PSNR/SSIM`
    /// in each cell.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut families: Vec<Family> = Vec::new();
        let mut ckpts: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !families.contains(&r.family) {
                families.push(r.family);
            }
            if !ckpts.contains(&r.checkpoint.as_str()) {
                ckpts.push(&r.checkpoint);
            }
        }
        for fam in families {
            let rows: Vec<&ResultRow> = self.rows.iter().filter(|r| r.family == fam).collect();
            let mut levels: Vec<f64> = Vec::new();
            for r in &rows {
                if !levels.contains(&r.level) {
                    levels.push(r.level);
                }
            }
            let head = format!("{} ({})", fam, level_key(fam).unwrap_or("level"));
            let mut widths = vec![head.len().max(6)];
            widths.extend(ckpts.iter().map(|c| c.len().max(15)));
            let mut line = format!("{:<w$}", head, w = widths[0]);
            for (c, w) in ckpts.iter().zip(&widths[1..]) {
                let _ = write!(line, " | {c:>w$}");
            }
            let _ = writeln!(out, "{}", line.trim_end());
            let _ = writeln!(out, "{}", "-".repeat(line.trim_end().len()));
            for lv in levels {
                let mut line = format!("{:<w$}", lv, w = widths[0]);
                for (c, w) in ckpts.iter().zip(&widths[1..]) {
                    let cell = rows
                        .iter()
                        .find(|r| r.level == lv && r.checkpoint == *c)
                        .map(|r| format!("{:.2}/{:.4}", r.psnr, r.ssim))
                        .unwrap_or_else(|| "-".into());
                    let _ = write!(line, " | {cell:>w$}");
                }
                let _ = writeln!(out, "{line}");
            }
            out.push('\n');
        }
        out
    }

    /// PSNR curves per family, one series per checkpoint.
    pub fn series(&self, family: Family) -> Vec<(String, Vec<(f64, f64)>)> {
        let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.family == family) {
            match out.iter_mut().find(|(n, _)| *n == r.checkpoint) {
                Some((_, pts)) => pts.push((r.level, r.psnr)),
                None => out.push((r.checkpoint.clone(), vec![(r.level, r.psnr)])),
            }
        }
        out
    }

    /// Writes `results.csv`, `results.txt` and, when asked,
    /// `grid_<family>.png` into `dir`.
    pub fn write(&self, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, body) in [("results.csv", self.to_csv()), ("results.txt", self.to_text())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        if plots {
            let mut families: Vec<Family> = self.rows.iter().map(|r| r.family).collect();
            families.dedup();
            for fam in families {
                let series: Vec<Vec<(f64, f64)>> = self.series(fam).into_iter().map(|(_, s)| s).collect();
                let p = dir.join(format!("grid_{fam}.png"));
                plot::save_line_plot(&series, &p)?;
                written.push(p);
            }
        }
        Ok(written)
    }
}

/// Options shared by every evaluation entrypoint.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub tiling: Option<Tiling>,
    pub masked_only: bool,
}

/// Seed for corrupting image `index` at one grid point.
pub fn eval_seed(seed: u64, index: usize, family: Family, level: f64) -> u64 {
    derive_seed(seed, &[EVAL_STREAM, index as u64, family as u64, level.to_bits()])
}

/// Mean PSNR/SSIM of each restorer at each level of one family.
pub fn evaluate(
    data: &Dataset,
    dataset_name: &str,
    restorers: &[NamedRestorer],
    family: Family,
    levels: &[f64],
    opts: EvalOptions,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &level in levels {
        let mut inputs = Vec::with_capacity(data.len());
        for (i, clean) in data.images.iter().enumerate() {
            let spec = level_spec(family, level, eval_seed(opts.seed, i, family, level))?;
            inputs.push(spec.apply(clean)?);
        }
        for r in restorers {
            let (mut p_sum, mut s_sum) = (0.0, 0.0);
            for (clean, c) in data.images.iter().zip(&inputs) {
                let out = r.restorer.restore(&c.image, c.mask.as_ref(), opts.tiling)?;
                p_sum += match (&c.mask, opts.masked_only) {
                    (Some(m), true) => psnr_dropped(&out, clean, m)?,
                    _ => psnr(&out, clean)?,
                };
                s_sum += ssim(&out, clean)?;
            }
            let n = data.len().max(1) as f64;
            rows.push(ResultRow {
                dataset: dataset_name.to_string(),
                family,
                level,
                checkpoint: r.name.clone(),
                psnr: p_sum / n,
                ssim: s_sum / n,
                n_images: data.len(),
            });
        }
    }
    Ok(rows)
}

/// Loads the grid's data and checkpoints and evaluates every level.
pub fn run_benchmark(grid: &BenchmarkGrid) -> Result<ResultTable> {
    if grid.levels.iter().all(|(_, l)| l.is_empty()) {
        return Ok(ResultTable::default());
    }
    let restorers = grid
        .checkpoints
        .iter()
        .map(CheckpointRef::load)
        .collect::<Result<Vec<_>>>()?;
    let data = grid.dataset.load()?;
    let opts = EvalOptions {
        seed: grid.seed,
        tiling: grid.tiling,
        masked_only: grid.masked_only,
    };
    let mut table = ResultTable::default();
    for (family, levels) in &grid.levels {
        table
            .rows
            .extend(evaluate(&data, &grid.dataset_name, &restorers, *family, levels, opts)?);
    }
    Ok(table)
}

/// Super-resolution protocol: bicubic downscale-then-upscale inputs.
pub fn run_sr_eval(
    data: &Dataset,
    dataset_name: &str,
    restorers: &[NamedRestorer],
    scales: &[usize],
    opts: EvalOptions,
) -> Result<ResultTable> {
    let levels: Vec<f64> = scales.iter().map(|&s| s as f64).collect();
    Ok(ResultTable {
        rows: evaluate(data, dataset_name, restorers, Family::Downscale, &levels, opts)?,
    })
}

/// Inpainting protocol: a fraction of pixels zeroed, with the mask handed
/// to models that take it as an input channel.
pub fn run_inpaint_eval(
    data: &Dataset,
    dataset_name: &str,
    restorers: &[NamedRestorer],
    drop_ratios: &[f64],
    opts: EvalOptions,
) -> Result<ResultTable> {
    Ok(ResultTable {
        rows: evaluate(data, dataset_name, restorers, Family::DropMask, drop_ratios, opts)?,
    })
}
