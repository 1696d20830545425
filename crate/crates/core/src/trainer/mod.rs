//! Training loop: uniform sampling over allowed (class, task) pairs, Adam with
//! per-epoch exponential learning-rate decay, periodic validation and
//! best-epoch checkpointing.

pub mod adam;
pub mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use promptseg_autograd::{ParamStore, Tensor};

use crate::eval_harness::{dice, eval_point, predict};
use crate::nn::Graph;
use crate::prompt_encoders::{PromptInput, Strategy, TextMode};
use crate::seg_model::{ModelConfig, SegModel};
use crate::synth_data::{derive_seed, Dataset, Sample, Split, UnitClass};
use crate::task_engine::{
    compute_task_mask, enumerate_training_tasks_with, render_prompt_indexed, requires_point, sample_point, Phase,
    PromptBank, Regime, TaskSpec,
};
use crate::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub val_every: usize,
    pub strategy: Strategy,
    pub regime: Regime,
    pub text_mode: TextMode,
    pub prompt_phase_train_split: usize,
    /// Restrict dt/capsule to task 1 alone in the incomplete regime.
    pub incomplete_task1_only: bool,
    pub seed: u64,
    /// Seed for validation points and prompt variants.
    pub val_seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Linear learning-rate ramp over the first steps; 0 disables it.
    pub warmup_steps: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (epochs, samples_per_epoch, val_every) = match preset {
            Preset::Desk => (200, 200, 20),
            Preset::Paper => (900, 1000, 100),
        };
        Self {
            lr0: 0.001,
            lr_decay: 0.99,
            epochs,
            samples_per_epoch,
            batch_size: 1,
            val_every,
            strategy: Strategy::TwoSet,
            regime: Regime::Complete,
            text_mode: TextMode::Lora,
            prompt_phase_train_split: 15,
            incomplete_task1_only: false,
            seed: 1,
            val_seed: 0x005E_ED0F_7A11,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            warmup_steps: 1000,
            model: ModelConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm < 0.0 {
            return bad(format!("grad_clip_norm {} must be non-negative", self.grad_clip_norm));
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.val_every == 0 {
            return bad("epochs, samples_per_epoch and val_every must be positive".into());
        }
        self.model.validate()
    }

    /// Training (class, task) pairs under the configured regime.
    pub fn allowed_pairs(&self) -> Vec<(UnitClass, u8)> {
        UnitClass::ALL
            .into_iter()
            .flat_map(|c| {
                enumerate_training_tasks_with(c, self.regime, self.incomplete_task1_only)
                    .into_iter()
                    .map(move |t| (c, t))
            })
            .collect()
    }
}

/// `lr0 · lr_decay^epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi(epoch as i32)
}

/// Multiplier in `(0, 1]` applied during the first `warmup` steps.
pub fn warmup_factor(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Builds the conditioning input for a task, caching frozen text states.
pub struct PromptSource<'a> {
    pub bank: &'a PromptBank,
    cache: HashMap<String, Arc<Tensor<f32>>>,
}

impl<'a> PromptSource<'a> {
    pub fn new(bank: &'a PromptBank) -> Self {
        Self { bank, cache: HashMap::new() }
    }

    /// Returns the input and, for free text, the variant used.
    pub fn input<R: Rng + ?Sized>(
        &mut self,
        model: &SegModel,
        store: &ParamStore<f32>,
        spec: &TaskSpec,
        phase: Phase,
        rng: &mut R,
    ) -> Result<(PromptInput<f32>, Option<usize>)> {
        match model.strategy {
            Strategy::OneSet | Strategy::TwoSet => Ok((
                PromptInput::Ids { unit: spec.unit_class.index(), task: spec.task_id as usize - 1 },
                None,
            )),
            Strategy::FreeText => {
                let (variant, text) = render_prompt_indexed(self.bank, spec, phase, rng)?;
                if model.text_mode() == Some(TextMode::Frozen) {
                    let state = match self.cache.get(&text) {
                        Some(s) => Arc::clone(s),
                        None => {
                            let s = Arc::new(model.prompt.text_state(store, &text)?);
                            self.cache.insert(text, Arc::clone(&s));
                            s
                        }
                    };
                    Ok((PromptInput::TextState(state), Some(variant)))
                } else {
                    Ok((PromptInput::Text(text), Some(variant)))
                }
            }
        }
    }
}

/// Counts of contract breaches observed during training; all stay zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    /// Samples whose (class, task) is outside the regime.
    pub regime: u64,
    /// Free-text prompts drawn from the held-out variants.
    pub prompt_split: u64,
    /// Gradients that reached a frozen tensor.
    pub frozen_grads: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDice {
    pub unit_class: UnitClass,
    pub task_id: u8,
    pub dice: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub steps: usize,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mean_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<Vec<CellDice>>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub violations: Violations,
    /// Per-step losses of the first epoch.
    pub first_epoch_losses: Vec<f32>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

/// Mean Dice per (class, task) on `split`, over the given pairs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &SegModel,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    split: Split,
    pairs: &[(UnitClass, u8)],
    prompts: &mut PromptSource,
    phase: Phase,
    seed: u64,
) -> Result<Vec<CellDice>> {
    let mut out = Vec::with_capacity(pairs.len());
    for &(class, task) in pairs {
        let (mut sum, mut count) = (0.0, 0usize);
        for sample in dataset.of(split, class) {
            let Some(spec) = eval_point(&sample.masks, &sample.patch.sample_id, task, seed)? else { continue };
            let target = compute_task_mask(&sample.masks, &spec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, spec_key(&sample.patch.sample_id, task)));
            let (input, _) = prompts.input(model, store, &spec, phase, &mut rng)?;
            let pred = predict(model, store, &sample.patch.pixels, &input, spec.point)?;
            sum += dice(&pred, &target)?;
            count += 1;
        }
        if count > 0 {
            out.push(CellDice { unit_class: class, task_id: task, dice: sum / count as f64, count });
        }
    }
    Ok(out)
}

/// Stable key for per-(sample, task) evaluation randomness.
pub fn spec_key(sample_id: &str, task: u8) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes().chain([0xff, task]) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn draw_spec(sample: &Sample, task: u8, rng: &mut ChaCha8Rng) -> Result<Option<TaskSpec>> {
    let point = if requires_point(task) {
        match sample_point(&sample.masks, task, rng) {
            Ok(p) => Some(p),
            Err(Error::NoValidPoint { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    TaskSpec::new(task, sample.patch.unit_class, point).map(Some)
}

pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    bank: &PromptBank,
    dataset_hash: Option<String>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if bank.train_split != config.prompt_phase_train_split {
        return Err(Error::Config(format!(
            "prompt bank splits at {}, config expects {}",
            bank.train_split, config.prompt_phase_train_split
        )));
    }
    let model_cfg = config.model.clone();
    if let Some(s) = dataset.samples.first() {
        if s.patch.height != model_cfg.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}px, model expects {}px",
                s.patch.height, model_cfg.image_size
            )));
        }
    }
    model_cfg.validate()?;
    let train_by_class: HashMap<UnitClass, Vec<&Sample>> =
        UnitClass::ALL.into_iter().map(|c| (c, dataset.of(Split::Train, c))).collect();
    let pairs: Vec<(UnitClass, u8)> =
        config.allowed_pairs().into_iter().filter(|(c, _)| !train_by_class[c].is_empty()).collect();
    if pairs.is_empty() {
        return Err(Error::Config("no allowed (class, task) pair has training samples".into()));
    }
    if dataset.split(Split::Val).next().is_none() {
        return Err(Error::Config("dataset has no validation samples".into()));
    }

    let (model, mut store) = SegModel::new::<f32>(&model_cfg, config.strategy, config.text_mode, config.seed)?;
    let frozen: Vec<bool> = store.ids().map(|id| !store.is_trainable(id)).collect();
    let mut adam = Adam::new(config.adam, store.len());
    let mut prompts = PromptSource::new(bank);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7EA1));
    let allowed: std::collections::HashSet<(UnitClass, u8)> = config.allowed_pairs().into_iter().collect();

    let mut violations = Violations::default();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut first_epoch_losses = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>, Adam<f32>)> = None;
    let start = Instant::now();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        while steps < config.samples_per_epoch {
            let (class, task) = pairs[rng.random_range(0..pairs.len())];
            let pool = &train_by_class[&class];
            let sample = pool[rng.random_range(0..pool.len())];
            let Some(spec) = draw_spec(sample, task, &mut rng)? else { continue };
            if !allowed.contains(&(spec.unit_class, spec.task_id)) {
                violations.regime += 1;
            }
            let target = compute_task_mask(&sample.masks, &spec)?;
            let (input, variant) = prompts.input(&model, &store, &spec, Phase::Train, &mut rng)?;
            if variant.is_some_and(|v| v >= config.prompt_phase_train_split) {
                violations.prompt_split += 1;
            }
            let mut g = Graph::training(&store, derive_seed(config.seed, step as u64));
            let out = model.forward(&mut g, &sample.patch.pixels, &input, spec.point)?;
            let loss = model.loss(&mut g, out.logits, &target)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("sample {} task {} class {}", sample.patch.sample_id, spec.task_id, class),
                });
            }
            let mut grads = g.tape.backward(loss)?;
            drop(g);
            let norm = grads.norm();
            if config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm {
                grads.scale((config.grad_clip_norm / norm) as f32);
            }
            violations.frozen_grads += grads.iter().filter(|(id, _)| frozen[id.index()]).count() as u64;
            adam.update(&mut store, &grads, lr * warmup_factor(step, config.warmup_steps));
            if epoch == 0 {
                first_epoch_losses.push(lv);
            }
            loss_sum += lv as f64;
            steps += 1;
            step += 1;
        }
        let mut m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / steps as f64,
            steps,
            elapsed_s: start.elapsed().as_secs_f64(),
            val_mean_dice: None,
            val: None,
        };
        if (epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs {
            let cells =
                evaluate_split(&model, &store, dataset, Split::Val, &pairs, &mut prompts, Phase::Train, config.val_seed)?;
            let mean = mean_dice(&cells);
            if best.as_ref().is_none_or(|b| mean > b.1) {
                best = Some((epoch, mean, store.clone(), adam.clone()));
            }
            m.val_mean_dice = Some(mean);
            m.val = Some(cells);
            m.elapsed_s = start.elapsed().as_secs_f64();
        }
        on_epoch(&m);
        metrics.push(m);
    }

    let (best_epoch, best_val_dice, best_store, best_adam) = best.expect("last epoch always validates");
    let checkpoint = Checkpoint::capture(
        &model,
        &best_store,
        Some(&best_adam),
        config,
        dataset_hash,
        bank.hash(),
        best_epoch,
        best_val_dice,
    );
    Ok(TrainOutcome { checkpoint, metrics, violations, first_epoch_losses, best_epoch, best_val_dice })
}

/// Unweighted mean over cells (each cell already averages its patches).
pub fn mean_dice(cells: &[CellDice]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    cells.iter().map(|c| c.dice).sum::<f64>() / cells.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.001);
        assert!((lr_at(1, &c) - 0.00099).abs() < 1e-15);
        assert!((lr_at(100, &c) - 3.660e-4).abs() < 1e-7);
    }

    #[test]
    fn presets() {
        let p = TrainConfig::preset(Preset::Paper);
        assert_eq!((p.epochs, p.samples_per_epoch, p.val_every), (900, 1000, 100));
        let d = TrainConfig::preset(Preset::Desk);
        assert_eq!((d.epochs, d.samples_per_epoch, d.val_every), (200, 200, 20));
        assert!(TrainConfig { batch_size: 2, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.5, ..d }.validate().is_err());
    }

    #[test]
    fn incomplete_pairs_exclude_composite_unseen_tasks() {
        let c = TrainConfig { regime: Regime::Incomplete, ..TrainConfig::default() };
        let pairs = c.allowed_pairs();
        assert_eq!(pairs.len(), 9 + 9 + 2 + 2);
        assert!(pairs.iter().all(|&(cl, t)| !(matches!(cl, UnitClass::Dt | UnitClass::Capsule) && t > 2)));
    }
}
