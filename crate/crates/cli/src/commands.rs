//! Resolved per-command settings.
//!
//! Every invocation is first turned into a fully resolved settings value
//! (absolute paths, explicit seeds, the complete training config). That
//! value is what runs, and it is also what the replay file stores, so
//! `mvd replay FILE` repeats the run exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mvd_core::config::KvConfig;
use mvd_core::corruption::{sample_spec, CorruptionPool, CorruptionSpec, Family, Kernel};
use mvd_core::dataio::{ImageTensor, MaskTensor, Split};
use mvd_core::disentangle::{lemma1_grid, verify_lemma1};
use mvd_core::eval::{run_benchmark, BenchmarkGrid};
use mvd_core::rng::{derive_seed, stream};
use mvd_core::trainer::{
    denoise, finetune_init, init_state, inline_pool, parse_inline_pool, run, Checkpoint, DataSource, RunDir,
    StepRecord, Tiling, TrainConfig,
};
use mvd_core::Error;

use crate::{CorruptArgs, DenoiseArgs, EvalArgs, InpaintEvalArgs, ProtocolArgs, SrEvalArgs, TrainArgs, VerifyArgs};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
const REPLAY_HEADER: &str = "# mvd replay file: re-run with `mvd replay <this file>`\n";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    /// A verification suite ran but did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 3,
            CliError::Core(e) => match e {
                Error::Param(_) | Error::Config(_) => 1,
                Error::Numerical(_) => 3,
                Error::Shape(_)
                | Error::Ingest { .. }
                | Error::NotFound(_)
                | Error::Checkpoint(_)
                | Error::Io { .. } => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Flags shared by every subcommand.
pub struct Common {
    pub seed: Option<u64>,
    pub replay: Option<PathBuf>,
    pub deterministic: bool,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| {
        Error::Io {
            path: p.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn apply_overrides(kv: &mut KvConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{o}' is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(())
}

fn take_path(kv: &mut KvConfig, key: &str) -> Result<PathBuf> {
    kv.take::<PathBuf>(key)?
        .ok_or_else(|| CliError::Usage(format!("replay file lacks '{key}'")))
}

/// Image files of a folder, sorted; a single file stays as is.
fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.exists() {
        return Err(Error::NotFound(input.to_path_buf()).into());
    }
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Io {
            path: input.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Output path for `file` when writing into `out` (a folder for folder
/// inputs, otherwise the output file itself).
fn output_for(input: &Path, file: &Path, out: &Path, suffix: &str) -> PathBuf {
    if input.is_dir() {
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        out.join(format!("{stem}{suffix}.png"))
    } else if suffix.is_empty() {
        out.to_path_buf()
    } else {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        out.with_file_name(format!("{stem}{suffix}.png"))
    }
}

fn prepare_output(input: &Path, out: &Path) -> Result<()> {
    let dir = if input.is_dir() { Some(out) } else { out.parent() };
    if let Some(d) = dir.filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum CorruptSource {
    /// A fixed family and parameters; the seed is assigned per image.
    Spec(CorruptionSpec),
    Pool(CorruptionPool),
}

#[derive(Clone, Debug)]
pub struct CorruptSettings {
    pub input: PathBuf,
    pub out: PathBuf,
    pub source: CorruptSource,
    pub seed: u64,
}

impl CorruptSettings {
    pub(crate) fn from_args(common: &Common, a: CorruptArgs) -> Result<Self> {
        let source = match (a.family, a.pool) {
            (Some(f), None) => {
                let family = Family::parse(&f)?;
                let mut params = Vec::new();
                for p in &a.params {
                    let (k, v) = p
                        .split_once('=')
                        .ok_or_else(|| CliError::Usage(format!("--param '{p}' is not key=value")))?;
                    let v: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| CliError::Usage(format!("--param '{p}' has a non-numeric value")))?;
                    params.push((k.trim().to_string(), v));
                }
                let refs: Vec<(&str, f64)> = params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                let mut spec = CorruptionSpec::new(family, &refs, 0)?;
                match (a.kernel, family) {
                    (Some(k), Family::Downscale) => spec.kernel = Some(Kernel::parse(&k)?),
                    (Some(_), _) => return Err(CliError::Usage("--kernel only applies to downscale".into())),
                    (None, _) => {}
                }
                CorruptSource::Spec(spec)
            }
            (None, Some(p)) => {
                if !a.params.is_empty() || a.kernel.is_some() {
                    return Err(CliError::Usage(
                        "--param and --kernel cannot be combined with --pool".into(),
                    ));
                }
                let path = Path::new(&p);
                CorruptSource::Pool(if path.is_file() {
                    CorruptionPool::load(path)?
                } else {
                    parse_inline_pool(&p)?
                })
            }
            _ => return Err(CliError::Usage("give exactly one of --family and --pool".into())),
        };
        Ok(Self {
            input: absolute(&a.input)?,
            out: absolute(&a.out)?,
            source,
            seed: common.seed.unwrap_or(0),
        })
    }

    fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("in", self.input.display());
        kv.set("out", self.out.display());
        kv.set("seed", self.seed);
        match &self.source {
            CorruptSource::Spec(s) => {
                kv.set("family", s.family);
                for (k, v) in &s.params {
                    kv.set(&format!("param.{k}"), v);
                }
                if let Some(k) = s.kernel {
                    kv.set("kernel", k.name());
                }
            }
            CorruptSource::Pool(p) => kv.set("pool", inline_pool(p)),
        }
    }

    fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let input = take_path(kv, "in")?;
        let out = take_path(kv, "out")?;
        let seed = kv.take_or("seed", 0)?;
        let source = if let Some(p) = kv.take::<String>("pool")? {
            CorruptSource::Pool(parse_inline_pool(&p)?)
        } else {
            let family = Family::parse(&kv.take::<String>("family")?.unwrap_or_default())?;
            let keys: Vec<String> = kv.keys().filter(|k| k.starts_with("param.")).collect();
            let mut params = Vec::new();
            for k in keys {
                let v: f64 = kv.take(&k)?.expect("listed key");
                params.push((k["param.".len()..].to_string(), v));
            }
            let refs: Vec<(&str, f64)> = params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            let mut spec = CorruptionSpec::new(family, &refs, 0)?;
            if let Some(k) = kv.take::<String>("kernel")? {
                spec.kernel = Some(Kernel::parse(&k)?);
            }
            CorruptSource::Spec(spec)
        };
        Ok(Self {
            input,
            out,
            source,
            seed,
        })
    }

    fn replay_default(&self) -> PathBuf {
        if self.input.is_dir() {
            self.out.join("replay.cfg")
        } else {
            self.out.with_extension("replay.cfg")
        }
    }

    fn execute(&self) -> Result<()> {
        let files = list_images(&self.input)?;
        prepare_output(&self.input, &self.out)?;
        for (i, file) in files.iter().enumerate() {
            let img = ImageTensor::load_png(file)?;
            let seed = derive_seed(self.seed, &[i as u64]);
            let spec = match &self.source {
                CorruptSource::Spec(s) => s.clone().with_seed(seed),
                CorruptSource::Pool(p) => sample_spec(p, &mut stream(seed, &[1]))?.with_seed(seed),
            };
            let c = spec.apply(&img)?;
            let dest = output_for(&self.input, file, &self.out, "");
            c.image.save_png(&dest)?;
            if let Some(m) = &c.mask {
                m.to_image()
                    .save_png(&output_for(&self.input, file, &self.out, "_mask"))?;
            }
            println!("{} -> {} [{}]", file.display(), dest.display(), spec.label());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub finetune_from: Option<PathBuf>,
    pub config: TrainConfig,
    pub log_every: u64,
}

fn absolutize_data(cfg: &mut TrainConfig) -> Result<()> {
    if let Some(DataSource::Dir { path, .. }) = &mut cfg.data {
        *path = absolute(path)?;
    }
    Ok(())
}

impl TrainSettings {
    pub(crate) fn from_args(common: &Common, a: TrainArgs) -> Result<Self> {
        let (mut kv, base) = match (&a.resume, &a.config) {
            (Some(ck), _) => (Checkpoint::load(ck)?.config.to_kv(), None),
            (None, Some(path)) => (KvConfig::load(path)?, path.parent().map(Path::to_path_buf)),
            (None, None) => (KvConfig::new(), None),
        };
        apply_overrides(&mut kv, &a.overrides)?;
        if let Some(n) = a.iters {
            kv.set("iters", n);
        }
        if let Some(s) = common.seed {
            kv.set("seed", s);
        }
        let mut config = TrainConfig::read(&mut kv, base.as_deref())?;
        kv.finish()?;
        absolutize_data(&mut config)?;
        if config.data.is_none() {
            return Err(CliError::Usage(
                "training needs 'data' (a folder or toy:COUNT:SIZE:SEED)".into(),
            ));
        }
        Ok(Self {
            out: absolute(&a.out)?,
            resume: a.resume.as_deref().map(absolute).transpose()?,
            finetune_from: a.finetune_from.as_deref().map(absolute).transpose()?,
            config,
            log_every: a.log_every,
        })
    }

    fn to_kv(&self, kv: &mut KvConfig) {
        kv.merge(&self.config.to_kv());
        kv.set("out", self.out.display());
        if let Some(p) = &self.resume {
            kv.set("resume", p.display());
        }
        if let Some(p) = &self.finetune_from {
            kv.set("finetune_from", p.display());
        }
        kv.set("log_every", self.log_every);
    }

    fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        Ok(Self {
            out: take_path(kv, "out")?,
            resume: kv.take("resume")?,
            finetune_from: kv.take("finetune_from")?,
            log_every: kv.take_or("log_every", 100)?,
            config: TrainConfig::read(kv, None)?,
        })
    }

    fn execute(&self, deterministic: bool) -> Result<()> {
        let cfg = &self.config;
        let data = cfg.data.as_ref().expect("checked at resolution").load(Split::Train)?;
        let state = if let Some(p) = &self.resume {
            let ck = Checkpoint::load(p)?;
            if ck.state.step > cfg.iters {
                return Err(CliError::Usage(format!(
                    "checkpoint is at step {} which is past iters = {}",
                    ck.state.step, cfg.iters
                )));
            }
            eprintln!("resuming from step {}", ck.state.step);
            ck.state
        } else if let Some(p) = &self.finetune_from {
            let init = finetune_init(&Checkpoint::load(p)?, cfg)?;
            let names: Vec<&str> = init.loaded.iter().map(|g| g.name()).collect();
            eprintln!("loaded pretrained groups: {}", names.join(", "));
            init.state
        } else {
            init_state(cfg)?
        };
        let dir = RunDir::new(&self.out)?;
        eprintln!(
            "training {} for {} steps on {} images ({} parameters)",
            cfg.schema.name(),
            cfg.iters,
            data.len(),
            state.nets.numel()
        );
        let t0 = Instant::now();
        let every = self.log_every;
        let mut on_step = |r: &StepRecord| {
            let done = r.step + 1;
            if every > 0 && (done.is_multiple_of(every) || done == cfg.iters) {
                let t = &r.terms;
                let mut line = format!(
                    "step {done}/{} loss {:.5} (scene {:.4} noise {:.4} cross {:.4} mix {:.4}) lr {:.3e}",
                    cfg.iters, r.total, t.scene, t.noise, t.cross, t.mix, r.lr
                );
                if !deterministic {
                    line.push_str(&format!(" {:.1}s", t0.elapsed().as_secs_f64()));
                }
                eprintln!("{line}");
            }
        };
        let ck = run(cfg, &data, state, Some(&dir), &mut on_step)?;
        println!("wrote {} (step {})", dir.final_path().display(), ck.state.step);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseSettings {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub tiling: Option<Tiling>,
    pub mask: Option<PathBuf>,
}

fn load_mask(path: &Path) -> Result<MaskTensor> {
    let img = ImageTensor::load_png(path)?;
    let c = img.channels();
    let data: Vec<u8> = img.data().chunks(c).map(|px| u8::from(px[0] > 0.5)).collect();
    Ok(MaskTensor::new(img.height(), img.width(), data)?)
}

impl DenoiseSettings {
    pub(crate) fn from_args(a: DenoiseArgs) -> Result<Self> {
        if a.mask.is_some() && a.input.is_dir() {
            return Err(CliError::Usage("--mask needs a single input image".into()));
        }
        Ok(Self {
            ckpt: absolute(&a.ckpt)?,
            input: absolute(&a.input)?,
            out: absolute(&a.out)?,
            tiling: a.tile.map(|tile| Tiling {
                tile,
                overlap: a.overlap,
            }),
            mask: a.mask.as_deref().map(absolute).transpose()?,
        })
    }

    fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("ckpt", self.ckpt.display());
        kv.set("in", self.input.display());
        kv.set("out", self.out.display());
        if let Some(t) = self.tiling {
            kv.set("tile", t.tile);
            kv.set("overlap", t.overlap);
        }
        if let Some(m) = &self.mask {
            kv.set("mask", m.display());
        }
    }

    fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let tile: Option<usize> = kv.take("tile")?;
        let overlap = kv.take_or("overlap", 32)?;
        Ok(Self {
            ckpt: take_path(kv, "ckpt")?,
            input: take_path(kv, "in")?,
            out: take_path(kv, "out")?,
            tiling: tile.map(|tile| Tiling { tile, overlap }),
            mask: kv.take("mask")?,
        })
    }

    fn replay_default(&self) -> PathBuf {
        if self.input.is_dir() {
            self.out.join("replay.cfg")
        } else {
            self.out.with_extension("replay.cfg")
        }
    }

    fn execute(&self) -> Result<()> {
        let nets = Checkpoint::load(&self.ckpt)?.state.nets;
        let mask = self.mask.as_deref().map(load_mask).transpose()?;
        let files = list_images(&self.input)?;
        prepare_output(&self.input, &self.out)?;
        for file in &files {
            let img = ImageTensor::load_png(file)?;
            let restored = denoise(&nets, &img, mask.as_ref(), self.tiling)?;
            let dest = output_for(&self.input, file, &self.out, "");
            restored.save_png(&dest)?;
            println!("{} -> {}", file.display(), dest.display());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub grid: BenchmarkGrid,
    pub out: PathBuf,
}

fn absolutize_grid(grid: &mut BenchmarkGrid) -> Result<()> {
    if let DataSource::Dir { path, .. } = &mut grid.dataset.source {
        *path = absolute(path)?;
    }
    for c in &mut grid.checkpoints {
        if c.source != "identity" {
            c.source = absolute(Path::new(&c.source))?.display().to_string();
        }
    }
    Ok(())
}

impl EvalSettings {
    fn from_kv_grid(mut kv: KvConfig, base: Option<&Path>, out: &Path) -> Result<Self> {
        let mut grid = BenchmarkGrid::read(&mut kv, base)?;
        kv.finish()?;
        absolutize_grid(&mut grid)?;
        Ok(Self {
            grid,
            out: absolute(out)?,
        })
    }

    pub(crate) fn from_grid_args(common: &Common, a: EvalArgs) -> Result<Self> {
        let mut kv = KvConfig::load(&a.grid)?;
        apply_overrides(&mut kv, &a.overrides)?;
        if let Some(s) = common.seed {
            kv.set("seed", s);
        }
        Self::from_kv_grid(kv, a.grid.parent(), &a.out)
    }

    fn protocol_kv(common: &Common, a: &ProtocolArgs) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("dataset", &a.data);
        kv.set("dataset.split", &a.split);
        kv.set("checkpoints", a.ckpts.join(","));
        kv.set("seed", common.seed.unwrap_or(0));
        if let Some(t) = a.tile {
            kv.set("tile", t);
            kv.set("overlap", a.overlap);
        }
        kv
    }

    pub(crate) fn from_sr_args(common: &Common, a: SrEvalArgs) -> Result<Self> {
        let mut kv = Self::protocol_kv(common, &a.common);
        let scales: Vec<String> = a.scales.iter().map(usize::to_string).collect();
        kv.set("grid.downscale", scales.join(","));
        Self::from_kv_grid(kv, None, &a.common.out)
    }

    pub(crate) fn from_inpaint_args(common: &Common, a: InpaintEvalArgs) -> Result<Self> {
        let mut kv = Self::protocol_kv(common, &a.common);
        let ratios: Vec<String> = a.ratios.iter().map(f64::to_string).collect();
        kv.set("grid.drop_mask", ratios.join(","));
        kv.set("masked_only", a.masked_only);
        Self::from_kv_grid(kv, None, &a.common.out)
    }

    fn to_kv(&self, kv: &mut KvConfig) {
        kv.merge(&self.grid.to_kv());
        kv.set("out", self.out.display());
    }

    fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        Ok(Self {
            out: take_path(kv, "out")?,
            grid: BenchmarkGrid::read(kv, None)?,
        })
    }

    fn execute(&self) -> Result<()> {
        let table = run_benchmark(&self.grid)?;
        table.write(&self.out, self.grid.plots)?;
        print!("{}", table.to_text());
        println!("wrote {}", self.out.join("results.csv").display());
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VerifySettings {
    pub lemma1: bool,
    pub noise_stats: bool,
    pub samples: usize,
    pub tolerance_scale: f64,
    pub seed: u64,
}

/// Side of the square images the noise-statistics suite uses (1M pixels).
const NOISE_STATS_SIDE: usize = 1000;

impl VerifySettings {
    pub(crate) fn from_args(common: &Common, a: VerifyArgs) -> Self {
        let all = !a.lemma1 && !a.noise_stats;
        Self {
            lemma1: a.lemma1 || all,
            noise_stats: a.noise_stats || all,
            samples: a.samples,
            tolerance_scale: a.tolerance_scale,
            seed: common.seed.unwrap_or(0),
        }
    }

    fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("lemma1", self.lemma1);
        kv.set("noise_stats", self.noise_stats);
        kv.set("samples", self.samples);
        kv.set("tolerance_scale", self.tolerance_scale);
        kv.set("seed", self.seed);
    }

    fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        Ok(Self {
            lemma1: kv.take_or("lemma1", true)?,
            noise_stats: kv.take_or("noise_stats", true)?,
            samples: kv.take_or("samples", 100_000)?,
            tolerance_scale: kv.take_or("tolerance_scale", 1.0)?,
            seed: kv.take_or("seed", 0)?,
        })
    }

    fn execute(&self) -> Result<()> {
        let mut failures = 0;
        if self.lemma1 {
            println!("mixing invariance ({} samples per case)", self.samples);
            for (i, case) in lemma1_grid().iter().enumerate() {
                let r = verify_lemma1(
                    case,
                    self.samples,
                    derive_seed(self.seed, &[i as u64]),
                    self.tolerance_scale,
                )?;
                failures += usize::from(!r.pass);
                println!(
                    "  [{}] d={} p={:.2} mean err {:.2e} (tol {:.2e}) cov err/tol {:.3}",
                    if r.pass { "pass" } else { "FAIL" },
                    case.mu.len(),
                    case.p,
                    r.mean_err,
                    r.mean_tol,
                    r.cov_ratio
                );
            }
        }
        if self.noise_stats {
            println!(
                "noise statistics ({} pixels per check)",
                NOISE_STATS_SIDE * NOISE_STATS_SIDE
            );
            let checks = mvd_core::corruption::noise_statistics(
                NOISE_STATS_SIDE,
                derive_seed(self.seed, &[0x5747]),
                self.tolerance_scale,
            )?;
            for c in checks {
                failures += usize::from(!c.pass);
                println!(
                    "  [{}] {}: {:.6} (expected {:.6} ± {:.6})",
                    if c.pass { "pass" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.expected,
                    c.tolerance
                );
            }
        }
        if failures > 0 {
            return Err(CliError::Failed(format!("{failures} verification check(s) failed")));
        }
        println!("all checks passed");
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Kind {
    Corrupt(CorruptSettings),
    Train(TrainSettings),
    Denoise(DenoiseSettings),
    Eval(EvalSettings),
    Verify(VerifySettings),
}

macro_rules! into_kind {
    ($($t:ident => $v:ident),*) => {
        $(impl From<$t> for Kind {
            fn from(s: $t) -> Self {
                Kind::$v(s)
            }
        })*
    };
}

into_kind!(CorruptSettings => Corrupt, TrainSettings => Train, DenoiseSettings => Denoise, EvalSettings => Eval, VerifySettings => Verify);

/// A resolved invocation.
#[derive(Clone, Debug)]
pub struct Settings {
    pub kind: Kind,
    pub deterministic: bool,
}

impl Settings {
    fn command(&self) -> &'static str {
        match self.kind {
            Kind::Corrupt(_) => "corrupt",
            Kind::Train(_) => "train",
            Kind::Denoise(_) => "denoise",
            Kind::Eval(_) => "eval",
            Kind::Verify(_) => "verify",
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        match &self.kind {
            Kind::Corrupt(s) => s.to_kv(&mut kv),
            Kind::Train(s) => s.to_kv(&mut kv),
            Kind::Denoise(s) => s.to_kv(&mut kv),
            Kind::Eval(s) => s.to_kv(&mut kv),
            Kind::Verify(s) => s.to_kv(&mut kv),
        }
        kv.set("command", self.command());
        kv.set("deterministic", self.deterministic);
        kv
    }

    pub fn from_replay(path: &Path) -> Result<Self> {
        let mut kv = KvConfig::load(path)?;
        let command: String = kv
            .take("command")?
            .ok_or_else(|| CliError::Usage(format!("{} is not a replay file (no 'command')", path.display())))?;
        let deterministic = kv.take_or("deterministic", false)?;
        let kind = match command.as_str() {
            "corrupt" => CorruptSettings::from_kv(&mut kv)?.into(),
            "train" => TrainSettings::from_kv(&mut kv)?.into(),
            "denoise" => DenoiseSettings::from_kv(&mut kv)?.into(),
            "eval" => EvalSettings::from_kv(&mut kv)?.into(),
            "verify" => VerifySettings::from_kv(&mut kv)?.into(),
            other => return Err(CliError::Usage(format!("unknown command '{other}' in replay file"))),
        };
        kv.finish()?;
        Ok(Self { kind, deterministic })
    }

    fn replay_default(&self) -> PathBuf {
        match &self.kind {
            Kind::Corrupt(s) => s.replay_default(),
            Kind::Train(s) => s.out.join("replay.cfg"),
            Kind::Denoise(s) => s.replay_default(),
            Kind::Eval(s) => s.out.join("replay.cfg"),
            Kind::Verify(_) => PathBuf::from("mvd-verify.replay.cfg"),
        }
    }

    fn write_replay(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d).map_err(|e| Error::Io {
                path: d.to_path_buf(),
                source: e,
            })?;
        }
        let body = format!("{REPLAY_HEADER}{}", self.to_kv().to_text());
        std::fs::write(path, body).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }

    /// Writes the replay file, then runs.
    pub fn execute(&self, replay: Option<&Path>) -> Result<()> {
        let path = replay.map(Path::to_path_buf).unwrap_or_else(|| self.replay_default());
        self.write_replay(&path)?;
        match &self.kind {
            Kind::Corrupt(s) => s.execute(),
            Kind::Train(s) => s.execute(self.deterministic),
            Kind::Denoise(s) => s.execute(),
            Kind::Eval(s) => s.execute(),
            Kind::Verify(s) => s.execute(),
        }
    }
}
