//! Parallel flow-matching training: every cell of a grid is noised, predicted
//! and penalized in a single forward/backward pass.
//!
//! The loop follows the phase plan for data selection and the alpha schedule
//! for the flow-loss weight, clips gradients to global norm 1, updates with
//! AdamW, writes `metrics.csv`, and checkpoints periodically. Training state
//! (weights, moments, RNG position, running averages) round-trips through the
//! checkpoint, so a resumed run continues the exact loss stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Zip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig, Params, RngState,
    TrainProgress,
};
use crate::condition::{Condition, Label};
use crate::curriculum::{AlphaSchedule, PhasePlan};
use crate::data::{coarse_labels, load_dataset_dir, synth_dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::flow::{
    base_loss, base_loss_grad, flow_loss, flow_loss_grad, total_loss, LossBreakdown, NoisySample,
};
use crate::layout::{GridTensor, LayoutSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const RUNNING_DECAY: f64 = 0.98;

/// Architecture knobs; frame geometry comes from the training layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            patch_size: d.patch_size,
            embed_dim: d.embed_dim,
            depth: d.depth,
            heads: d.heads,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synth {
        kind: DatasetKind,
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A folder of frame folders (or a single frame folder).
    Folder { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Must equal the phase plan's total when given.
    #[serde(default)]
    pub total_steps: Option<u64>,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Defaults to a ramp from 0 to 0.5 across the fine phase.
    #[serde(default)]
    pub alpha_schedule: Option<AlphaSchedule>,
    pub phase_plan: PhasePlan,
    #[serde(default = "default_dropout")]
    pub cond_dropout_prob: f64,
    /// 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub layout: LayoutSpec,
    #[serde(default)]
    pub model: ModelSection,
    pub datasets: BTreeMap<String, DatasetSource>,
}

fn default_dropout() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn total_steps(&self) -> u64 {
        self.phase_plan.total_steps()
    }

    pub fn alpha_schedule(&self) -> Result<AlphaSchedule> {
        match self.alpha_schedule {
            Some(s) => Ok(s),
            None => AlphaSchedule::over_fine_phase(0.5, &self.phase_plan),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            cond_vocab: Label::COUNT,
            time_embed_dim: m.time_embed_dim,
            frame_h: self.layout.frame_h,
            frame_w: self.layout.frame_w,
            channels: self.layout.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.layout.validate()?;
        self.model_config().validate()?;
        self.alpha_schedule()?.validate()?;
        if let Some(t) = self.total_steps {
            if t != self.total_steps() {
                return bad(format!(
                    "total_steps {t} differs from coarse + fine = {}",
                    self.total_steps()
                ));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return bad(format!(
                "cond_dropout_prob must lie in [0, 1), got {}",
                self.cond_dropout_prob
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps be positive".into());
        }
        if o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be nonnegative".into());
        }
        for name in [&self.phase_plan.coarse_dataset, &self.phase_plan.fine_dataset] {
            if !self.datasets.contains_key(name) {
                return bad(format!("phase plan names unknown dataset '{name}'"));
            }
        }
        Ok(())
    }
}

/// Training examples keyed by dataset name.
pub type Datasets = BTreeMap<String, Vec<(GridTensor, Condition)>>;

/// Materializes every dataset of `cfg`. Relative folder paths are taken
/// relative to `base_dir`.
pub fn resolve_datasets(cfg: &TrainConfig, base_dir: &Path) -> Result<Datasets> {
    cfg.datasets
        .iter()
        .map(|(name, src)| {
            let items = match src {
                DatasetSource::Synth { kind, count, seed } => {
                    synth_dataset(*kind, *count, &cfg.layout, *seed)?
                }
                DatasetSource::Folder { path } => {
                    let p = if path.is_absolute() {
                        path.clone()
                    } else {
                        base_dir.join(path)
                    };
                    load_dataset_dir(&p, &cfg.layout)?
                }
            };
            Ok((name.clone(), items))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub moment1: Params,
    pub moment2: Params,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Exponential running averages of (base, flow, total).
    pub running: [f64; 3],
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(cfg.model_config(), cfg.seed)?;
        let moment1 = model.params().zeros_like();
        let moment2 = model.params().zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            model,
            moment1,
            moment2,
            step: 0,
            rng,
            running: [0.0; 3],
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let progress = ckpt.progress.ok_or_else(|| {
            Error::Config("checkpoint carries no training state to resume".into())
        })?;
        Ok(TrainState {
            model: ckpt.model,
            moment1: progress.moment1,
            moment2: progress.moment2,
            step: progress.step,
            rng: progress.rng.restore()?,
            running: progress.running,
        })
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            progress: Some(TrainProgress {
                step: self.step,
                rng: RngState::capture(&self.rng),
                running: self.running,
                moment1: self.moment1.clone(),
                moment2: self.moment2.clone(),
            }),
            meta,
        }
    }

    fn update_running(&mut self, loss: &LossBreakdown) {
        let now = [loss.base, loss.flow, loss.total];
        for (r, v) in self.running.iter_mut().zip(now) {
            *r = if self.step == 0 {
                v
            } else {
                RUNNING_DECAY * *r + (1.0 - RUNNING_DECAY) * v
            };
        }
    }
}

/// One optimizer update on `batch` with flow-loss weight `alpha`.
///
/// Each example draws its own `t ~ U(0,1)` and `eps ~ N(0, I)`; with
/// probability `cond_dropout_prob` its condition is replaced by the null
/// condition. Reported losses are batch means.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(GridTensor, Condition)],
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::NegativeAlpha(alpha));
    }
    let layout = state_layout(batch)?;
    let mut prepared = Vec::with_capacity(batch.len());
    for (clean, cond) in batch {
        if clean.layout() != &layout {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes layouts {:?} and {:?}",
                layout,
                clean.layout()
            )));
        }
        let sample = NoisySample::draw(clean, &mut state.rng)?;
        let dropped = state.rng.gen::<f64>() < cfg.cond_dropout_prob;
        let cond = if dropped { cond.to_null() } else { cond.clone() };
        prepared.push((sample, cond));
    }
    fit_step(state, &prepared, alpha, cfg)
}

/// One optimizer update on already noised samples; draws no randomness.
pub fn fit_step(
    state: &mut TrainState,
    samples: &[(NoisySample, Condition)],
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::NegativeAlpha(alpha));
    }
    let multi_cell = samples[0].0.x_t.layout().frame_count() >= 2;
    let inv_b = 1.0 / samples.len() as f64;
    let mut grads = state.model.params().zeros_like();
    let (mut base_sum, mut flow_sum) = (0.0, 0.0);

    for (sample, cond) in samples {
        let (pred, cache) = state.model.forward(&sample.x_t, sample.t, cond)?;
        let target = &sample.target_velocity;
        base_sum += base_loss(&pred, target)?;
        let mut d_out = base_loss_grad(&pred, target)?;
        if multi_cell {
            flow_sum += flow_loss(&pred, target)?;
            if alpha > 0.0 {
                d_out.scaled_add(alpha, &flow_loss_grad(&pred, target)?);
            }
        }
        d_out.mapv_inplace(|g| g * inv_b);
        state.model.backward(&cache, &d_out, &mut grads);
    }

    let loss = total_loss(base_sum * inv_b, flow_sum * inv_b, alpha)?;
    if !loss.total.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            base: loss.base,
            flow: loss.flow,
        });
    }
    adamw_update(state, &mut grads, cfg);
    state.update_running(&loss);
    state.step += 1;
    Ok(loss)
}

fn state_layout(batch: &[(GridTensor, Condition)]) -> Result<LayoutSpec> {
    Ok(*batch[0].0.layout())
}

fn adamw_update(state: &mut TrainState, grads: &mut Params, cfg: &TrainConfig) {
    let o = &cfg.optimizer;
    if o.grad_clip > 0.0 {
        let norm = grads.global_norm();
        if norm > o.grad_clip {
            grads.scale(o.grad_clip / norm);
        }
    }
    let k = (state.step + 1) as i32;
    let c1 = 1.0 - o.beta1.powi(k);
    let c2 = 1.0 - o.beta2.powi(k);
    let lr = cfg.learning_rate;
    let params = state.model.params_mut().tensors_mut();
    let m1 = state.moment1.tensors_mut();
    let m2 = state.moment2.tensors_mut();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.tensors())
        .zip(m1.iter_mut())
        .zip(m2.iter_mut())
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = o.beta1 * *m + (1.0 - o.beta1) * g;
            *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + o.eps);
            *p -= lr * (update + o.weight_decay * *p);
        });
    }
}

/// Draws the batch for the state's current step: phase-selected dataset,
/// indices uniform with replacement, labels coarsened outside detailed phases.
pub fn next_batch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    datasets: &Datasets,
) -> Result<Vec<(GridTensor, Condition)>> {
    let phase = cfg.phase_plan.phase_at(state.step)?;
    let items = datasets
        .get(phase.dataset)
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::DatasetExhausted(phase.dataset.to_string()))?;
    (0..cfg.batch_size)
        .map(|_| {
            let (grid, cond) = &items[state.rng.gen_range(0..items.len())];
            if grid.layout() != &cfg.layout {
                return Err(Error::ShapeMismatch(format!(
                    "dataset '{}' has layout {:?}, config expects {:?}",
                    phase.dataset,
                    grid.layout(),
                    cfg.layout
                )));
            }
            let mut cond = cond.clone();
            if !phase.detailed_labels {
                cond.content_labels = coarse_labels(&cond.content_labels);
            }
            Ok((grid.clone(), cond))
        })
        .collect()
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn run_until(
    state: &mut TrainState,
    cfg: &TrainConfig,
    datasets: &Datasets,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    let schedule = cfg.alpha_schedule()?;
    let until = until.min(cfg.total_steps());
    while state.step < until {
        let alpha = schedule.alpha_at(state.step);
        let batch = next_batch(state, cfg, datasets)?;
        let loss = train_step(state, &batch, alpha, cfg)?;
        on_step(state, &loss)?;
    }
    Ok(())
}

/// Trains in memory from a fresh state and returns the state with its loss stream.
pub fn train_in_memory(
    cfg: &TrainConfig,
    datasets: &Datasets,
) -> Result<(TrainState, Vec<LossBreakdown>)> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg)?;
    let mut losses = Vec::with_capacity(cfg.total_steps() as usize);
    run_until(&mut state, cfg, datasets, cfg.total_steps(), |_, l| {
        losses.push(*l);
        Ok(())
    })?;
    Ok((state, losses))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// Losses of the steps run by this invocation.
    pub losses: Vec<LossBreakdown>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

fn csv_row(step: u64, l: &LossBreakdown) -> String {
    format!("{step},{:e},{:e},{},{:e}\n", l.base, l.flow, l.alpha, l.total)
}

const CSV_HEADER: &str = "step,base,flow,alpha,total\n";

/// Keeps the CSV rows of steps before `step` (for resuming).
fn truncate_metrics(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(CSV_HEADER.into()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::from(CSV_HEADER);
    for line in text.lines().skip(1) {
        let s: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
        if s.is_some_and(|s| s < step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Full training run writing into `out_dir`: `metrics.csv`, periodic
/// `step_XXXXXXXX.ckpt`, and `final.ckpt`. With `resume`, training state is
/// restored from that checkpoint and the metrics log is cut back to it.
pub fn train(
    cfg: &TrainConfig,
    datasets: &Datasets,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::from_checkpoint(load_checkpoint(p)?)?;
            if s.model.config() != &cfg.model_config() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    p.display()
                )));
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let meta = serde_json::to_value(cfg).expect("config serializes");
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut csv = truncate_metrics(&metrics_path, state.step)?;
    let mut losses = Vec::new();
    let every = cfg.checkpoint_every;

    run_until(&mut state, cfg, datasets, cfg.total_steps(), |st, loss| {
        losses.push(*loss);
        csv.push_str(&csv_row(st.step - 1, loss));
        if every > 0 && st.step % every == 0 && st.step < cfg.total_steps() {
            crate::io::write_atomic(&metrics_path, csv.as_bytes())?;
            save_checkpoint(&out_dir.join(checkpoint_name(st.step)), &st.to_checkpoint(meta.clone()))?;
        }
        Ok(())
    })?;

    crate::io::write_atomic(&metrics_path, csv.as_bytes())?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &state.to_checkpoint(meta))?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(coarse: u64, fine: u64) -> TrainConfig {
        let text = format!(
            r#"
seed = 3
batch_size = 2
learning_rate = 1e-3
checkpoint_every = 0

[layout]
rows = 2
cols = 2
frame_h = 8
frame_w = 8
channels = 1

[model]
patch_size = 4
embed_dim = 16
depth = 1
heads = 2
time_embed_dim = 8

[phase_plan]
coarse_steps = {coarse}
fine_steps = {fine}
coarse_dataset = "trans"
fine_dataset = "trans"

[datasets.trans]
source = "synth"
kind = "translate"
count = 4
seed = 1
"#
        );
        TrainConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn config_parses_and_defaults() {
        let cfg = tiny_config(2, 3);
        assert_eq!(cfg.cond_dropout_prob, 0.1);
        assert_eq!(cfg.optimizer.grad_clip, 1.0);
        let s = cfg.alpha_schedule().unwrap();
        assert_eq!((s.alpha_max, s.ramp_start, s.ramp_end), (0.5, 2, 5));
        let again = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = tiny_config(1, 1);
        cfg.cond_dropout_prob = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(1, 1);
        cfg.total_steps = Some(5);
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(1, 1);
        cfg.phase_plan.fine_dataset = "nope".into();
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::from_toml("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn zero_alpha_total_is_base() {
        let cfg = tiny_config(0, 3);
        let data = resolve_datasets(&cfg, Path::new(".")).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        let batch = next_batch(&mut state, &cfg, &data).unwrap();
        let l = train_step(&mut state, &batch, 0.0, &cfg).unwrap();
        assert_eq!(l.total, l.base);
        assert!(l.flow > 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn coarse_phase_coarsens_labels() {
        let cfg = tiny_config(2, 1);
        let data = resolve_datasets(&cfg, Path::new(".")).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        for (_, c) in next_batch(&mut state, &cfg, &data).unwrap() {
            assert!(c
                .content_labels
                .iter()
                .all(|l| matches!(l, Label::Motion | Label::Static)));
        }
        state.step = 2;
        let fine = next_batch(&mut state, &cfg, &data).unwrap();
        assert!(fine[0].1.content_labels.len() > 1);
    }

    #[test]
    fn empty_dataset_is_exhausted() {
        let cfg = tiny_config(1, 0);
        let mut data = resolve_datasets(&cfg, Path::new(".")).unwrap();
        data.get_mut("trans").unwrap().clear();
        let mut state = TrainState::new(&cfg).unwrap();
        assert!(matches!(
            next_batch(&mut state, &cfg, &data),
            Err(Error::DatasetExhausted(_))
        ));
    }
}
