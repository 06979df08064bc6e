//! Student/teacher training, schedules and dataset embedding.

mod embed;
mod optim;
mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embed::{embed_dataset, embed_images, load_channel_images};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::Schedules;

use crate::augment::{make_views, sample_sibling, AugmentConfig, ViewProvenance, ViewSet};
use crate::dataio::{ChannelSet, DatasetManifest, SiteKey};
use crate::encoder::{
    backward, batch_patches, ema_update, forward, init_params, write_checkpoint, Checkpoint,
    CheckpointMeta, EncoderConfig, HeadRows, ModelParams,
};
use crate::error::{Error, Result};
use crate::objective::{total_loss, update_center, CenterState, LossComponents, LossWeights};
use crate::rng::{hash_str, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub ema_momentum_start: f64,
    pub ema_momentum_end: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub channel_set: ChannelSet,
    pub augment: AugmentConfig,
    /// `tau_t` here is ignored; the teacher temperature follows the schedule.
    pub loss: LossWeights,
    /// `in_channels` is derived from `channel_set`.
    pub encoder: EncoderConfig,
    /// Relative to the output directory.
    pub metrics_file: String,
    pub checkpoint_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 5e-4,
            warmup_epochs: 3,
            weight_decay: 0.04,
            ema_momentum_start: 0.992,
            ema_momentum_end: 0.999,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 10,
            grad_clip: 3.0,
            seed: 0,
            channel_set: ChannelSet::Fluorescent,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            encoder: EncoderConfig::default(),
            metrics_file: "metrics.jsonl".into(),
            checkpoint_dir: "checkpoints".into(),
        }
    }
}

impl TrainConfig {
    /// Batch 128, learning rate 2e-5, 10 warmup epochs over 100 epochs.
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            base_lr: 2e-5,
            warmup_epochs: 10,
            tau_t_warmup_epochs: 30,
            ..Self::default()
        }
    }

    /// Copy with derived fields filled in: encoder input channels from the
    /// channel set, augmentation output and patch size from the encoder.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.encoder.in_channels = c.channel_set.n_channels();
        c.augment.output_size = c.encoder.image_size;
        c.augment.patch_size = c.encoder.patch_size;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if self.warmup_epochs > self.epochs {
            bad.push(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size < 2 {
            bad.push(format!("batch_size {} must be >= 2", self.batch_size));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            bad.push(format!("base_lr {} must be >= 0", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        let m = (self.ema_momentum_start, self.ema_momentum_end);
        if !((0.0..=1.0).contains(&m.0) && (0.0..=1.0).contains(&m.1)) {
            bad.push(format!("ema momentum {m:?} must be in [0, 1]"));
        }
        if !(self.tau_t_start > 0.0 && self.tau_t_end > 0.0) {
            bad.push("teacher temperatures must be > 0".to_string());
        }
        if self.channel_set == ChannelSet::All {
            bad.push("train one model per channel set: fluorescent or brightfield".to_string());
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        let r = self.resolved();
        r.encoder.validate()?;
        r.augment.validate()?;
        LossWeights { tau_t: r.tau_t_start, ..r.loss }.validate()
    }

    pub fn schedules(&self, steps_per_epoch: usize) -> Schedules {
        let spe = steps_per_epoch as u64;
        Schedules {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs as u64 * spe,
            total_steps: self.epochs as u64 * spe,
            momentum_start: self.ema_momentum_start,
            momentum_end: self.ema_momentum_end,
            tau_t_start: self.tau_t_start,
            tau_t_end: self.tau_t_end,
            tau_t_warmup_steps: self.tau_t_warmup_epochs as u64 * spe,
        }
    }
}

/// Number of optimization steps per epoch (incomplete last batches are
/// dropped).
pub fn steps_per_epoch(n_sites: usize, batch_size: usize) -> usize {
    (n_sites / batch_size.min(n_sites).max(1)).max(1)
}

/// Everything that evolves during training. Randomness is derived from
/// `(seed, step)`, so the step counter is the only RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub center: CenterState<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    pub epoch: u64,
}

impl TrainState {
    /// Student from `init_params(seed)`, teacher an exact copy.
    pub fn new(cfg: &EncoderConfig, seed: u64, weight_decay: f64) -> Result<Self> {
        let student = init_params::<f32>(cfg, seed)?;
        Ok(Self {
            teacher: student.clone(),
            center: CenterState::zeros(cfg.n_prototypes),
            optimizer: AdamW::new(&student, weight_decay),
            student,
            step: 0,
            epoch: 0,
        })
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub dino: f64,
    pub local_agg: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub lr: f64,
    pub momentum: f64,
    pub tau_t: f64,
    pub grad_norm: f64,
}

/// Per-step hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct StepParams {
    pub lr: f64,
    pub momentum: f64,
    pub tau_t: f64,
    pub grad_clip: f64,
}

/// One optimization step on a batch of view sets.
pub fn train_step(
    state: &mut TrainState,
    views: &[ViewSet],
    weights: &LossWeights,
    hp: StepParams,
) -> Result<StepMetrics> {
    let cfg = state.student.config.clone();
    let b = views.len();
    let v1: Vec<_> = views.iter().map(|v| &v.v1).collect();
    let v2: Vec<_> = views.iter().map(|v| &v.v2).collect();
    let masks: Vec<_> = views.iter().map(|v| v.v1_mask.clone()).collect();
    let x1 = batch_patches::<f32>(&v1, &cfg)?;
    let x2 = batch_patches::<f32>(&v2, &cfg)?;

    let (s_masked, c_masked) = forward(&state.student, x1.clone(), b, Some(&masks), HeadRows::Masked)?;
    let (s_sib, c_sib) = forward(&state.student, x2, b, None, HeadRows::None)?;
    let rows = HeadRows::Explicit(s_masked.patch_rows.clone());
    let (t_anchor, _) = forward(&state.teacher, x1, b, None, rows)?;

    let w = LossWeights { tau_t: hp.tau_t, ..*weights };
    let loss = total_loss(&s_masked, &s_sib, &t_anchor, &w, &state.center).map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFiniteLoss {
            step: state.step,
            detail: what,
        },
        other => other,
    })?;

    let mut grads = state.student.zeros_like();
    backward(&state.student, &c_masked, &loss.masked_view_grads, &mut grads)?;
    backward(&state.student, &c_sib, &loss.sibling_view_grads, &mut grads)?;
    let grad_norm = clip_grad_norm(&mut grads, hp.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: "gradient norm is not finite".into(),
        });
    }
    state.optimizer.step(&mut state.student, &grads, hp.lr);
    if !state.student.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: "student parameters became non-finite".into(),
        });
    }
    ema_update(&mut state.teacher, &state.student, hp.momentum as f32)?;
    update_center(&mut state.center.instance, &t_anchor.cls_logits.view(), weights.center_momentum);
    update_center(&mut state.center.patch, &t_anchor.patch_logits.view(), weights.center_momentum);

    let LossComponents {
        dino,
        local_agg,
        ibot,
        koleo,
    } = loss.components;
    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        total: f64::from(loss.total),
        dino,
        local_agg,
        ibot,
        koleo,
        lr: hp.lr,
        momentum: hp.momentum,
        tau_t: hp.tau_t,
        grad_norm,
    };
    state.step += 1;
    Ok(metrics)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub steps: u64,
    pub state: TrainState,
}

/// Builds the view sets for one step. Each slot has its own RNG stream keyed
/// on `(seed, step, slot)`, so the result is independent of thread count.
pub fn build_batch(
    wells: &[Vec<crate::dataio::CellImage>],
    keys: &[Vec<SiteKey>],
    order: &[(usize, usize)],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<ViewSet>> {
    order
        .par_iter()
        .enumerate()
        .map(|(slot, &(w, s))| {
            let mut rng = stream(seed, &[hash_str("views"), step, slot as u64]);
            let sib = sample_sibling(wells[w].len(), s, &mut rng);
            let prov = ViewProvenance {
                anchor: keys[w][s].clone(),
                sibling: keys[w][sib].clone(),
            };
            make_views(&wells[w][s], &wells[w][sib], cfg, Some(prov), &mut rng)
        })
        .collect()
}

fn epoch_order(n_wells_sites: &[usize], seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    use rand::seq::SliceRandom;
    let mut all: Vec<(usize, usize)> = n_wells_sites
        .iter()
        .enumerate()
        .flat_map(|(w, &n)| (0..n).map(move |s| (w, s)))
        .collect();
    all.shuffle(&mut stream(seed, &[hash_str("epoch_order"), epoch]));
    all
}

/// Trains one channel model on `manifest`, writing metrics and per-epoch
/// checkpoints under `out_dir`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let out_dir = out_dir.as_ref();
    let (keys, wells) = load_channel_images(manifest, cfg.channel_set)?;
    if let Some(k) = wells.iter().position(|w| w.len() < 2) {
        return Err(Error::Manifest(vec![format!(
            "well {}/{} has a single site; sibling sampling needs at least two",
            keys[k][0].plate_id, keys[k][0].well_position
        )]));
    }
    let sizes: Vec<usize> = wells.iter().map(Vec::len).collect();
    let n_sites: usize = sizes.iter().sum();
    let batch = cfg.batch_size.min(n_sites);
    let spe = steps_per_epoch(n_sites, cfg.batch_size);
    let sched = cfg.schedules(spe);
    info!(
        "training {} model: {} wells, {} sites, {} steps/epoch, {} epochs",
        cfg.channel_set,
        wells.len(),
        n_sites,
        spe,
        cfg.epochs
    );

    let ck_dir = out_dir.join(&cfg.checkpoint_dir);
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let metrics_path = out_dir.join(&cfg.metrics_file);
    let mut metrics_out = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );

    let mut state = TrainState::new(&cfg.encoder, cfg.seed, cfg.weight_decay)?;
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs as u64 {
        state.epoch = epoch;
        let order = epoch_order(&sizes, cfg.seed, epoch);
        for chunk in order.chunks_exact(batch).take(spe) {
            let step = state.step;
            let views = build_batch(&wells, &keys, chunk, &cfg.augment, cfg.seed, step)?;
            let hp = StepParams {
                lr: sched.lr(step),
                momentum: sched.momentum(step),
                tau_t: sched.tau_t(step),
                grad_clip: cfg.grad_clip,
            };
            let m = train_step(&mut state, &views, &cfg.loss, hp)?;
            debug!("step {} total {:.4}", m.step, m.total);
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(metrics_out, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        metrics_out.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let path = ck_dir.join(format!("epoch_{:03}.cpck", epoch + 1));
        let ck = Checkpoint {
            meta: CheckpointMeta {
                encoder: cfg.encoder.clone(),
                channel_set: cfg.channel_set,
                step: state.step,
                epoch: epoch + 1,
            },
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            center: state.center.clone(),
        };
        write_checkpoint(&ck, &path)?;
        info!("epoch {} done at step {}", epoch + 1, state.step);
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        final_checkpoint: checkpoints.last().cloned().expect("epochs >= 1"),
        checkpoints,
        metrics_path,
        steps: state.step,
        state,
    })
}
