//! Optimization loop for the multi-view schema and the two single-network
//! baselines, with checkpointing, resumption and fine-tuning.
//!
//! Every random draw of step `s` comes from streams derived from
//! `(seed, s)`, so a run resumed from a checkpoint at step `s` repeats the
//! uninterrupted run exactly.

mod adam;
mod checkpoint;
mod config;
mod denoise;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::backbone::{BoundNets, Group, TrainState};
use crate::dataio::{batch_viewsets, BatchSpec, Dataset, ImageTensor, MaskTensor, ViewSet};
use crate::disentangle::{distance, draw_mix, med_objective, LossTerms};
use crate::error::{Error, Result};
use crate::rng;

pub use adam::{adam_update, lr_at, AdamParams};
pub use checkpoint::{periodic_name, rotate, Checkpoint, FORMAT_VERSION};
pub use config::{inline_pool, parse_inline_pool, DataSource, Schema, TrainConfig};
pub use denoise::{denoise, denoise_batch, Tiling};

const MIX_STREAM: u64 = 0x6d69;
const INIT_STREAM: u64 = 0x1417;

pub const LOG_HEADER: &str = "step,lr,l_scene,l_noise,l_cross,l_mix,total";

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub terms: LossTerms<f64>,
    pub total: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, t.scene, t.noise, t.cross, t.mix, self.total
        )
    }
}

/// Groups updated under `schema`.
pub fn trains_group(schema: Schema, group: Group) -> bool {
    schema == Schema::Med || matches!(group, Group::Theta | Group::Psi)
}

/// Fresh networks for `cfg`.
pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    TrainState::build(&cfg.backbone, rng::derive_seed(cfg.seed, &[INIT_STREAM]))
}

/// Stacks view `i` of every item, appending the keep-mask as an extra
/// channel when the backbone expects one.
fn stack_view(batch: &[ViewSet], i: usize, mask_channel: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let imgs: Vec<&ImageTensor> = batch.iter().map(|v| &v.views[i]).collect();
    let pixels: Tensor<f32> = ImageTensor::stack(&imgs)?;
    if !mask_channel {
        return Ok((pixels.clone(), pixels));
    }
    let masks: Vec<Option<&MaskTensor>> = batch.iter().map(|v| v.masks[i].as_ref()).collect();
    Ok((with_mask_channel(&pixels, &masks), pixels))
}

/// `[N,H,W,C]` + per-item masks → `[N,H,W,C+1]`; missing masks mean "all kept".
pub(crate) fn with_mask_channel(pixels: &Tensor<f32>, masks: &[Option<&MaskTensor>]) -> Tensor<f32> {
    let s = pixels.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(n * h * w * (c + 1));
    for (b, mask) in masks.iter().enumerate().take(n) {
        for p in 0..h * w {
            let base = (b * h * w + p) * c;
            data.extend_from_slice(&pixels.data()[base..base + c]);
            data.push(mask.map_or(1.0, |m| m.data()[p] as f32));
        }
    }
    Tensor::new(vec![n, h, w, c + 1], data)
}

/// Computes the loss of step `step` and applies one optimizer update.
pub fn train_step(cfg: &TrainConfig, data: &Dataset, state: &mut TrainState, step: u64) -> Result<StepRecord> {
    // ReLU maps NaN to zero, so a poisoned weight may not reach the loss.
    for (group, p) in Group::ALL.into_iter().zip(&state.nets.groups) {
        if let Some(i) = p.tensors.iter().position(|t| !t.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite parameter {group}.{} at step {step}",
                p.names[i]
            )));
        }
    }
    let k = if cfg.schema == Schema::N2c {
        cfg.views.max(2)
    } else {
        cfg.views
    };
    let spec = BatchSpec {
        batch: cfg.batch,
        views: k,
        patch: cfg.patch,
        augment: cfg.augment,
    };
    let mut batch = batch_viewsets(data, &cfg.pool, &spec, cfg.seed, step)?;
    let clean = if cfg.schema == Schema::N2c {
        let imgs: Vec<&ImageTensor> = batch.iter().map(|v| v.clean().expect("fresh view set")).collect();
        Some(ImageTensor::stack::<f32>(&imgs)?)
    } else {
        None
    };
    // Self-supervised schemas never see the clean patch.
    if cfg.schema != Schema::N2c {
        batch = batch.into_iter().map(ViewSet::strip_clean).collect();
    }
    let mask_channel = cfg.backbone.mask_channel;
    let stacked = (0..k)
        .map(|i| stack_view(&batch, i, mask_channel))
        .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::<f32>::new();
    let nets = state.nets.bind(&mut g, |grp| trains_group(cfg.schema, grp));
    let mut inputs = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for (input, pixels) in &stacked {
        let iv = g.constant(input.clone());
        inputs.push(iv);
        targets.push(if mask_channel { g.constant(pixels.clone()) } else { iv });
    }

    let (total, terms) = match cfg.schema {
        Schema::Med => {
            let s = g.shape(inputs[0]).to_vec();
            let (lh, lw) = cfg.backbone.latent_size(s[1], s[2]);
            let latent = [s[0], lh, lw, cfg.backbone.channels];
            let pixel = g.shape(targets[0]).to_vec();
            let mut r = rng::stream(cfg.seed, &[step, MIX_STREAM]);
            let mix = draw_mix(k, &latent, &pixel, cfg.loss.p, cfg.loss.share_mask, &mut r);
            let (total, t, _) = med_objective(&mut g, &nets, &inputs, &targets, &cfg.loss, &mix)?;
            let terms = LossTerms {
                scene: g.scalar(t.scene).as_f64(),
                noise: g.scalar(t.noise).as_f64(),
                cross: g.scalar(t.cross).as_f64(),
                mix: g.scalar(t.mix).as_f64(),
            };
            (total, terms)
        }
        Schema::N2n | Schema::N2c => {
            let target = match clean {
                Some(c) => g.constant(c),
                None => targets[1],
            };
            let total = single_path_loss(&mut g, &nets, inputs[0], target, cfg)?;
            let terms = LossTerms {
                scene: g.scalar(total).as_f64(),
                ..LossTerms::default()
            };
            (total, terms)
        }
    };
    let total_value = g.scalar(total).as_f64();
    if !total_value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {total_value} at step {step}"
        )));
    }
    let grads = g.backward(total);
    let lr = cfg.lr_at(step);
    let mut updates = Vec::new();
    for group in Group::ALL.into_iter().filter(|&grp| trains_group(cfg.schema, grp)) {
        for (i, &v) in nets.vars(group).iter().enumerate() {
            let grad = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            if !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {}.{} at step {step}",
                    group,
                    state.nets.group(group).names[i]
                )));
            }
            updates.push((group, i, grad));
        }
    }
    let t = step + 1;
    for (group, i, grad) in updates {
        let gi = group.index();
        adam_update(
            state.nets.groups[gi].tensors[i].data_mut(),
            grad.data(),
            state.m[gi].tensors[i].data_mut(),
            state.v[gi].tensors[i].data_mut(),
            t,
            lr,
            &cfg.adam,
        );
    }
    state.step = t;
    Ok(StepRecord {
        step,
        lr,
        terms,
        total: total_value,
    })
}

/// `‖D(G(y)) − target‖`.
fn single_path_loss<T: Real>(
    g: &mut Graph<T>,
    nets: &BoundNets,
    y: Var,
    target: Var,
    cfg: &TrainConfig,
) -> Result<Var> {
    let z = nets.encode_scene(g, y)?;
    let x = nets.decode_scene(g, z)?;
    Ok(distance(g, x, target, cfg.loss.norm))
}

/// Output files of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn final_path(&self) -> PathBuf {
        self.root.join("final.mvd")
    }

    /// Opens the CSV log for appending from `step`, discarding rows written
    /// after that step by an interrupted run.
    fn open_log(&self, step: u64) -> Result<File> {
        let path = self.log_path();
        let mut kept = vec![LOG_HEADER.to_string()];
        if step > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if row_step.is_some_and(|s| s < step) {
                    kept.push(line);
                }
            }
        }
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for line in kept {
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(f)
    }

    fn open_events(&self, fresh: bool) -> Result<File> {
        let path = self.events_path();
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))
    }
}

fn event(f: &mut File, path: &Path, value: serde_json::Value) -> Result<()> {
    writeln!(f, "{value}").map_err(|e| Error::io(path, e))
}

/// Trains from `state` until `cfg.iters` steps are done.
///
/// With an output directory, appends to the CSV and event logs, writes
/// periodic checkpoints (keeping the newest `cfg.keep_ckpts`) and a final
/// checkpoint. A non-finite loss aborts the run after saving the state
/// that produced it as `nan_snapshot.mvd`.
pub fn run(
    cfg: &TrainConfig,
    data: &Dataset,
    mut state: TrainState,
    out: Option<&RunDir>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if state.nets.cfg != cfg.backbone {
        return Err(Error::Config(
            "state backbone differs from the run configuration".into(),
        ));
    }
    let mut logs = match out {
        Some(dir) => {
            let mut events = dir.open_events(state.step == 0)?;
            let kind = if state.step == 0 { "start" } else { "resume" };
            event(
                &mut events,
                &dir.events_path(),
                serde_json::json!({"event": kind, "step": state.step, "schema": cfg.schema.name(), "params": state.nets.numel()}),
            )?;
            Some((dir, dir.open_log(state.step)?, events))
        }
        None => None,
    };
    while state.step < cfg.iters {
        let step = state.step;
        let snapshot = logs.as_ref().map(|_| state.clone());
        let rec = match train_step(cfg, data, &mut state, step) {
            Ok(rec) => rec,
            Err(Error::Numerical(msg)) => {
                if let (Some((dir, _, events)), Some(snap)) = (logs.as_mut(), snapshot) {
                    let path = dir.root.join("nan_snapshot.mvd");
                    Checkpoint {
                        config: cfg.clone(),
                        state: snap,
                    }
                    .save(&path)?;
                    event(
                        events,
                        &dir.events_path(),
                        serde_json::json!({"event": "abort", "step": step, "reason": msg, "snapshot": "nan_snapshot.mvd"}),
                    )?;
                    return Err(Error::Numerical(format!("{msg}; snapshot saved to {}", path.display())));
                }
                return Err(Error::Numerical(msg));
            }
            Err(e) => return Err(e),
        };
        on_step(&rec);
        if let Some((dir, log, events)) = logs.as_mut() {
            writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io(dir.log_path(), e))?;
            if cfg.ckpt_every > 0 && state.step.is_multiple_of(cfg.ckpt_every) && state.step < cfg.iters {
                let name = periodic_name(state.step);
                Checkpoint {
                    config: cfg.clone(),
                    state: state.clone(),
                }
                .save(&dir.checkpoint_dir().join(&name))?;
                rotate(&dir.checkpoint_dir(), cfg.keep_ckpts)?;
                event(
                    events,
                    &dir.events_path(),
                    serde_json::json!({"event": "checkpoint", "step": state.step, "file": name}),
                )?;
            }
        }
    }
    let ck = Checkpoint {
        config: cfg.clone(),
        state,
    };
    if let Some((dir, log, events)) = logs.as_mut() {
        log.flush().map_err(|e| Error::io(dir.log_path(), e))?;
        ck.save(&dir.final_path())?;
        event(
            events,
            &dir.events_path(),
            serde_json::json!({"event": "done", "step": ck.state.step, "file": "final.mvd"}),
        )?;
    }
    Ok(ck)
}

/// Trains `cfg` from scratch.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&RunDir>) -> Result<Checkpoint> {
    run(cfg, data, init_state(cfg)?, out, &mut |_| {})
}

/// Continues a checkpoint up to `iters` total steps (its own target when
/// `None`).
pub fn resume(ck: Checkpoint, iters: Option<u64>, data: &Dataset, out: Option<&RunDir>) -> Result<Checkpoint> {
    let mut cfg = ck.config;
    if let Some(n) = iters {
        cfg.iters = n;
    }
    run(&cfg, data, ck.state, out, &mut |_| {})
}

/// Initial state for fine-tuning under `cfg` from a pretrained checkpoint.
#[derive(Clone, Debug)]
pub struct FinetuneInit {
    pub state: TrainState,
    pub loaded: Vec<Group>,
}

/// Copies the scene encoder/decoder (all five networks when `cfg` is
/// `med`) from `pre`, and initializes everything else fresh.
pub fn finetune_init(pre: &Checkpoint, cfg: &TrainConfig) -> Result<FinetuneInit> {
    let mut state = init_state(cfg)?;
    let wanted: Vec<Group> = Group::ALL
        .into_iter()
        .filter(|&g| trains_group(cfg.schema, g))
        .collect();
    let mismatched: Vec<&str> = wanted
        .iter()
        .filter(|&&g| !state.nets.group(g).same_layout(pre.state.nets.group(g)))
        .map(|g| g.name())
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "pretrained backbone is incompatible; mismatched groups: {}",
            mismatched.join(", ")
        )));
    }
    for &g in &wanted {
        state.nets.groups[g.index()] = pre.state.nets.group(g).clone();
    }
    Ok(FinetuneInit { state, loaded: wanted })
}

pub fn finetune(pre: &Checkpoint, cfg: &TrainConfig, data: &Dataset, out: Option<&RunDir>) -> Result<Checkpoint> {
    run(cfg, data, finetune_init(pre, cfg)?.state, out, &mut |_| {})
}
