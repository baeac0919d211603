//! Meta-training: Adam on the meta-batch loss, periodic validation, early
//! stopping and best-model selection.

use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;

use crate::encoder::{EncoderParams, Mode};
use crate::episodes::{
    derive_seed, sample_episode_with, sample_meta_batch, stream_rng, ClassIndexedDataset, Episode,
    EpisodeConfig,
};
use crate::error::{Error, Result};
use crate::heads::{episode_gradients, score_queries, Head};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update. On a shape mismatch or a non-finite
    /// gradient nothing is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::contract(format!(
                    "adam: parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::numeric(
                    "adam",
                    format!("gradient of parameter {i} is not finite"),
                ));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = self.step_count as i32;
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to all encoder tensors.
pub fn adam_step(
    state: &mut OptimizerState<f64>,
    params: &mut EncoderParams,
    grads: &[Tensor<f64>],
) -> Result<()> {
    let mut refs: Vec<&mut Tensor<f64>> = params.tensors.iter_mut().map(|t| &mut t.value).collect();
    state.step(&mut refs, grads)
}

/// Accuracy summary over a set of tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub tasks: usize,
}

impl ValidationReport {
    /// Mean of per-task accuracies with a 95% normal interval using the
    /// sample standard deviation.
    pub fn from_accuracies(acc: &[f64]) -> Result<Self> {
        if acc.is_empty() {
            return Err(Error::contract("no task accuracies to summarize"));
        }
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let std = if acc.len() > 1 {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let half = 1.96 * std / n.sqrt();
        Ok(ValidationReport {
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
            tasks: acc.len(),
        })
    }

    /// The selection rule: a higher interval lower bound wins; lower bounds
    /// equal to five decimals fall back to the mean.
    pub fn beats(&self, other: &ValidationReport) -> bool {
        let a = (self.ci_low * 1e5).round();
        let b = (other.ci_low * 1e5).round();
        a > b || (a == b && self.mean > other.mean)
    }
}

/// Fraction of queries on the right side of the 0.5 threshold.
pub fn task_accuracy(probabilities: &[f64], labels: &[f64]) -> f64 {
    let correct = probabilities
        .iter()
        .zip(labels)
        .filter(|&(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count();
    correct as f64 / labels.len() as f64
}

/// Samples validation task `t` for a given seed; shared by every scorer so
/// that reports are comparable.
pub fn validation_episode(
    dataset: &ClassIndexedDataset,
    config: &EpisodeConfig,
    seed: u64,
    task: u64,
) -> Result<Episode> {
    let mut rng = stream_rng(seed, task);
    sample_episode_with(dataset, config.shot, config.query_per_side, &mut rng, seed)
}

/// Validates an arbitrary episode scorer over `num_tasks` tasks.
pub fn validate_with<F>(
    scorer: F,
    dataset: &ClassIndexedDataset,
    config: &EpisodeConfig,
    num_tasks: usize,
    seed: u64,
) -> Result<ValidationReport>
where
    F: Fn(&Episode) -> Result<Vec<f64>> + Sync,
{
    let acc: Vec<f64> = (0..num_tasks as u64)
        .into_par_iter()
        .map(|t| {
            let ep = validation_episode(dataset, config, seed, t)?;
            let p = scorer(&ep)?;
            Ok(task_accuracy(&p, &ep.labels))
        })
        .collect::<Result<_>>()?;
    ValidationReport::from_accuracies(&acc)
}

/// Eval-mode scores of an episode's queries.
pub fn score_episode(
    head: impl Into<Head>,
    params: &EncoderParams,
    dataset: &ClassIndexedDataset,
    episode: &Episode,
) -> Result<Vec<f64>> {
    score_episode_inner(head.into(), params, dataset, episode)
}

fn score_episode_inner(
    head: Head,
    params: &EncoderParams,
    dataset: &ClassIndexedDataset,
    episode: &Episode,
) -> Result<Vec<f64>> {
    let support = dataset.gather(&episode.support)?;
    let queries = dataset.gather(&episode.queries)?;
    score_queries(head, params, &support, &queries)
}

pub fn validate(
    params: &EncoderParams,
    head: impl Into<Head>,
    dataset: &ClassIndexedDataset,
    config: &EpisodeConfig,
    num_tasks: usize,
    seed: u64,
) -> Result<ValidationReport> {
    validate_inner(params, head.into(), dataset, config, num_tasks, seed)
}

fn validate_inner(
    params: &EncoderParams,
    head: Head,
    dataset: &ClassIndexedDataset,
    config: &EpisodeConfig,
    num_tasks: usize,
    seed: u64,
) -> Result<ValidationReport> {
    validate_with(
        |ep| score_episode(head, params, dataset, ep),
        dataset,
        config,
        num_tasks,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episode: EpisodeConfig,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub patience: usize,
    pub validation_tasks: usize,
    /// Hard stop; `None` relies on patience alone.
    pub max_steps: Option<usize>,
    /// Fraction of skipped episodes within one evaluation window that
    /// aborts training.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episode: EpisodeConfig::default(),
            adam: AdamConfig::default(),
            eval_every: 100,
            patience: 10,
            validation_tasks: 500,
            max_steps: None,
            max_skip_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if self.eval_every == 0 || self.patience == 0 || self.validation_tasks == 0 {
            return Err(Error::config(
                "eval_every, patience and validation_tasks must be positive",
            ));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.adam.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean meta-batch loss since the previous evaluation; `None` at step 0.
    pub train_loss: Option<f64>,
    pub validation: ValidationReport,
}

impl EvalRecord {
    pub fn csv_line(&self) -> String {
        let loss = self.train_loss.map(|l| format!("{l}")).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.step, loss, self.validation.mean, self.validation.ci_low
        )
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,train_loss,val_mean,val_ci_low";

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub optimizer: OptimizerState<f64>,
    pub best_params: EncoderParams,
    pub best_validation: Option<EvalRecord>,
    pub evals_since_improvement: usize,
    pub history: Vec<EvalRecord>,
    pub steps: usize,
    pub skipped_episodes: usize,
}

/// Result of one meta-batch update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean episode loss and gradient over a meta-batch followed by one Adam
/// step. Episodes whose SVDD problem fails are skipped.
pub fn train_step(
    state: &mut TrainState,
    head: impl Into<Head>,
    dataset: &ClassIndexedDataset,
    episodes: &[Episode],
) -> Result<StepOutcome> {
    train_step_inner(state, head.into(), dataset, episodes)
}

fn train_step_inner(
    state: &mut TrainState,
    head: Head,
    dataset: &ClassIndexedDataset,
    episodes: &[Episode],
) -> Result<StepOutcome> {
    let params = &state.params;
    let results: Vec<_> = episodes
        .par_iter()
        .map(|ep| episode_gradients(head, params, dataset, ep, Mode::Train))
        .collect();
    let mut sum_grads: Option<Vec<Tensor<f64>>> = None;
    let mut loss = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let mut stats = Vec::new();
    for (ep, r) in episodes.iter().zip(results) {
        match r {
            Ok(g) => {
                used += 1;
                loss += g.output.loss;
                stats.push(g.batch_stats);
                match &mut sum_grads {
                    None => sum_grads = Some(g.grads),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g.grads) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            Err(e @ (Error::Solver { .. } | Error::Differentiation(_))) => {
                skipped += 1;
                warn!("skipping episode (seed {}): {e}", ep.seed);
            }
            Err(e) => return Err(e),
        }
    }
    let Some(mut grads) = sum_grads else {
        return Ok(StepOutcome {
            loss: f64::NAN,
            used,
            skipped,
        });
    };
    let scale = 1.0 / used as f64;
    for g in &mut grads {
        *g = g.map(|x| x * scale);
    }
    adam_step(&mut state.optimizer, &mut state.params, &grads)?;
    for s in &stats {
        state.params.update_running_stats(s);
    }
    Ok(StepOutcome {
        loss: loss * scale,
        used,
        skipped,
    })
}

fn write_log(log: &mut Option<&mut dyn Write>, line: &str) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Runs meta-training from `init` until patience runs out (or `max_steps`).
///
/// Validation happens at step 0 and every `eval_every` steps after. The
/// returned state holds the best parameters under [`ValidationReport::beats`].
pub fn meta_train(
    train: &ClassIndexedDataset,
    validation: &ClassIndexedDataset,
    head: impl Into<Head>,
    init: EncoderParams,
    config: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<TrainState> {
    meta_train_inner(train, validation, head.into(), init, config, seed, log)
}

fn meta_train_inner(
    train: &ClassIndexedDataset,
    validation: &ClassIndexedDataset,
    head: Head,
    init: EncoderParams,
    config: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainState> {
    config.validate()?;
    let needed = config.episode.shot + config.episode.query_per_side;
    train.require_class_size(needed)?;
    validation.require_class_size(needed)?;
    let train_seed = derive_seed(seed, 0);
    let val_seed = derive_seed(seed, 1);

    let tensors: Vec<Tensor<f64>> = init.tensors.iter().map(|t| t.value.clone()).collect();
    let mut state = TrainState {
        optimizer: OptimizerState::new(&tensors, config.adam),
        best_params: init.clone(),
        params: init,
        best_validation: None,
        evals_since_improvement: 0,
        history: Vec::new(),
        steps: 0,
        skipped_episodes: 0,
    };
    write_log(&mut log, TRAIN_LOG_HEADER)?;

    let window_capacity = config.eval_every * config.episode.meta_batch;
    let mut window_skipped = 0usize;
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    loop {
        if state.steps % config.eval_every == 0 {
            let report = validate(
                &state.params,
                head,
                validation,
                &config.episode,
                config.validation_tasks,
                val_seed,
            )?;
            let record = EvalRecord {
                step: state.steps,
                train_loss: (window_steps > 0).then(|| window_loss / window_steps as f64),
                validation: report,
            };
            info!(
                "step {}: validation accuracy {:.4} (ci low {:.4})",
                record.step, report.mean, report.ci_low
            );
            write_log(&mut log, &record.csv_line())?;
            state.history.push(record);
            let improved = state
                .best_validation
                .map_or(true, |b| report.beats(&b.validation));
            if improved {
                state.best_validation = Some(record);
                state.best_params = state.params.clone();
                state.evals_since_improvement = 0;
            } else {
                state.evals_since_improvement += 1;
            }
            window_skipped = 0;
            window_loss = 0.0;
            window_steps = 0;
            if state.evals_since_improvement >= config.patience {
                break;
            }
        }
        if config.max_steps.is_some_and(|m| state.steps >= m) {
            break;
        }
        let batch_seed = derive_seed(train_seed, state.steps as u64);
        let episodes = sample_meta_batch(train, &config.episode, batch_seed)?;
        let outcome = train_step(&mut state, head, train, &episodes)?;
        state.steps += 1;
        state.skipped_episodes += outcome.skipped;
        window_skipped += outcome.skipped;
        if outcome.used > 0 {
            window_loss += outcome.loss;
            window_steps += 1;
        }
        if window_skipped as f64 > config.max_skip_fraction * window_capacity as f64 {
            return Err(Error::numeric(
                "meta_train",
                format!(
                    "{window_skipped} of the last window's episodes failed to solve (limit {:.0}%)",
                    config.max_skip_fraction * 100.0
                ),
            ));
        }
    }
    Ok(state)
}
