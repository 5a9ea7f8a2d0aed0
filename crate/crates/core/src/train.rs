//! Losses, the Adam optimizer, and teacher-forced training loops.
//!
//! Sequence losses follow the sum-over-steps convention: the expander
//! step loss is `α·NLL(node) + β·NLL(level)` and the generator step loss
//! is plain NLL, both summed over non-pad steps of a sequence. For batch
//! training the per-sequence sums are averaged across the batch, which
//! keeps learning-rate semantics independent of batch size.

use crate::data::{self, EncodedRecord, ExpanderItem, GeneratorItem};
use crate::model::{ExpanderModel, GeneratorModel, ModelError, ParseInput, SeqInput};
use crate::tensor::{Graph, ParamStore, Reduction, TensorError, Var};
use serde::Serialize;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("invalid train config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Node-loss weight (expander).
    pub alpha: f64,
    /// Level-loss weight (expander).
    pub beta: f64,
    /// Global gradient-norm clip, applied before the update.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    /// Stop early once full-corpus teacher-forced accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// How often to poll full-corpus accuracy for early stopping.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            batch_size: 16,
            seed: 1,
            alpha: 0.5,
            beta: 0.5,
            clip_norm: Some(1.0),
            checkpoint_every: None,
            checkpoint_path: None,
            target_accuracy: None,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(TrainError::Config(
                "need alpha >= 0, beta >= 0, alpha + beta > 0".into(),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        OptimizerState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }
}

/// One Adam update from the gradients currently stored on the parameters.
/// Missing gradients count as zero. Non-finite gradients abort, naming
/// the offending parameter.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if let Some(grad) = store.get(id).grad() {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Tensor(TensorError::NonFiniteGrad {
                    name: store.name(id).to_string(),
                }));
            }
        }
    }

    let clip_scale = match config.clip_norm {
        Some(max_norm) => {
            let mut sq = 0.0;
            for &id in &ids {
                if let Some(grad) = store.get(id).grad() {
                    sq += grad.iter().map(|g| g * g).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for &id in &ids {
        let idx = id.0;
        let tensor = store.get_mut(id);
        let numel = tensor.numel();
        let grad: Vec<f64> = match tensor.grad() {
            Some(g) => g.iter().map(|g| g * clip_scale).collect(),
            None => vec![0.0; numel],
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = tensor.data_mut();
        for e in 0..numel {
            m[e] = config.beta1 * m[e] + (1.0 - config.beta1) * grad[e];
            v[e] = config.beta2 * v[e] + (1.0 - config.beta2) * grad[e] * grad[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            data[e] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// `α·NLL(nodes) + β·NLL(levels)`, summed over unmasked steps.
#[allow(clippy::too_many_arguments)]
pub fn loss_syntax(
    g: &mut Graph,
    node_logits: Var,
    level_logits: Var,
    node_targets: &[usize],
    level_targets: &[usize],
    alpha: f64,
    beta: f64,
    step_mask: Option<&[bool]>,
) -> std::result::Result<Var, TensorError> {
    let node_lp = g.log_softmax(node_logits)?;
    let node_nll = g.nll_loss(node_lp, node_targets, Reduction::Sum, step_mask)?;
    let level_lp = g.log_softmax(level_logits)?;
    let level_nll = g.nll_loss(level_lp, level_targets, Reduction::Sum, step_mask)?;
    let a = g.scale(node_nll, alpha);
    let b = g.scale(level_nll, beta);
    g.add(a, b)
}

/// Plain NLL over unmasked steps, summed.
pub fn loss_text(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    step_mask: Option<&[bool]>,
) -> std::result::Result<Var, TensorError> {
    let lp = g.log_softmax(logits)?;
    g.nll_loss(lp, targets, Reduction::Sum, step_mask)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_per_token: f64,
    pub accuracy: f64,
    pub wall_ms: u64,
}

/// Training log plus summary facts.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub param_count: usize,
    /// Full-corpus teacher-forced accuracy at the end of training.
    pub final_accuracy: f64,
    pub steps_run: usize,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

/// Teacher-forced evaluation statistics over a whole record list.
#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub loss_sum: f64,
    pub tokens: usize,
    pub loss_per_token: f64,
    pub accuracy: f64,
}

fn trimmed(p: &data::Padded) -> &[usize] {
    let n = p.real.iter().filter(|&&b| b).count();
    &p.ids[..n]
}

/// Count argmax hits of `logits[t×V]` rows against targets.
fn argmax_hits(values: &[f64], classes: usize, targets: &[usize]) -> Vec<bool> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &values[r * classes..(r + 1) * classes];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == t
        })
        .collect()
}

struct BatchOutcome {
    loss_values: Vec<f64>,
    correct: usize,
    tokens: usize,
    loss_vars: Vec<Var>,
}

fn expander_batch_pass(
    model: &ExpanderModel,
    g: &mut Graph,
    items: &[ExpanderItem],
    records: &[EncodedRecord],
    alpha: f64,
    beta: f64,
) -> Result<BatchOutcome> {
    let mut out = BatchOutcome {
        loss_values: Vec::with_capacity(items.len()),
        correct: 0,
        tokens: 0,
        loss_vars: Vec::with_capacity(items.len()),
    };
    for item in items {
        let r = &records[item.record];
        let prefix_n = trimmed(&item.dec_nodes.input);
        let prefix_l = trimmed(&item.dec_levels.input);
        let (node_logits, level_logits) = model.forward_ids(
            g,
            ParseInput::unpadded(&r.src_parse),
            ParseInput::unpadded(&r.template),
            ParseInput { node_ids: prefix_n, level_ids: prefix_l, real: None },
        )?;
        let node_targets = trimmed(&item.dec_nodes.target);
        let level_targets = trimmed(&item.dec_levels.target);
        let loss = loss_syntax(
            g,
            node_logits,
            level_logits,
            node_targets,
            level_targets,
            alpha,
            beta,
            None,
        )?;
        let n_hits = argmax_hits(g.value(node_logits), model.config.node_vocab_size, node_targets);
        let l_hits = argmax_hits(g.value(level_logits), model.config.level_vocab_size, level_targets);
        out.correct += n_hits
            .iter()
            .zip(l_hits.iter())
            .filter(|(a, b)| **a && **b)
            .count();
        out.tokens += node_targets.len();
        out.loss_values.push(g.value(loss)[0]);
        out.loss_vars.push(loss);
    }
    Ok(out)
}

fn generator_batch_pass(
    model: &GeneratorModel,
    g: &mut Graph,
    items: &[GeneratorItem],
    records: &[EncodedRecord],
) -> Result<BatchOutcome> {
    let mut out = BatchOutcome {
        loss_values: Vec::with_capacity(items.len()),
        correct: 0,
        tokens: 0,
        loss_vars: Vec::with_capacity(items.len()),
    };
    for item in items {
        let r = &records[item.record];
        let prefix = trimmed(&item.dec_text.input);
        let logits = model.forward_ids(
            g,
            ParseInput::unpadded(&r.tgt_parse),
            &item.guide_level_values,
            SeqInput::unpadded(&r.src_text),
            SeqInput { ids: prefix, real: None },
        )?;
        let targets = trimmed(&item.dec_text.target);
        let loss = loss_text(g, logits, targets, None)?;
        let hits = argmax_hits(g.value(logits), model.config.text_vocab_size, targets);
        out.correct += hits.iter().filter(|h| **h).count();
        out.tokens += targets.len();
        out.loss_values.push(g.value(loss)[0]);
        out.loss_vars.push(loss);
    }
    Ok(out)
}

/// Teacher-forced loss and accuracy of the expander over `records`.
pub fn evaluate_expander(
    model: &ExpanderModel,
    records: &[EncodedRecord],
    alpha: f64,
    beta: f64,
) -> Result<EvalStats> {
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let items: Vec<ExpanderItem> = data::make_expander_batches(records, records.len(), 0, 0)
        .remove(0);
    let mut g = Graph::new();
    let out = expander_batch_pass(model, &mut g, &items, records, alpha, beta)?;
    Ok(stats_from(&out))
}

/// Teacher-forced loss and accuracy of the generator over `records`.
pub fn evaluate_generator(model: &GeneratorModel, records: &[EncodedRecord]) -> Result<EvalStats> {
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let items: Vec<GeneratorItem> = data::make_generator_batches(records, records.len(), 0, 0)
        .remove(0);
    let mut g = Graph::new();
    let out = generator_batch_pass(model, &mut g, &items, records)?;
    Ok(stats_from(&out))
}

fn stats_from(out: &BatchOutcome) -> EvalStats {
    let loss_sum: f64 = out.loss_values.iter().sum();
    EvalStats {
        loss_sum,
        tokens: out.tokens,
        loss_per_token: loss_sum / out.tokens.max(1) as f64,
        accuracy: out.correct as f64 / out.tokens.max(1) as f64,
    }
}

enum Trainee<'a> {
    Expander(&'a mut ExpanderModel),
    Generator(&'a mut GeneratorModel),
}

/// Teacher-forced training shared by both models.
fn train_loop(
    mut trainee: Trainee,
    records: &[EncodedRecord],
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut state = match &trainee {
        Trainee::Expander(m) => OptimizerState::new(m.store()),
        Trainee::Generator(m) => OptimizerState::new(m.store()),
    };
    let mut log = TrainLog {
        param_count: match &trainee {
            Trainee::Expander(m) => m.param_count(),
            Trainee::Generator(m) => m.param_count(),
        },
        ..TrainLog::default()
    };

    let started = Instant::now();
    let mut step = 0;
    let mut epoch = 0;
    'outer: while step < config.steps {
        let batches = data::epoch_order(records.len(), config.batch_size, config.seed, epoch);
        for batch_indices in batches {
            if step >= config.steps {
                break 'outer;
            }
            step += 1;
            let rebased: Vec<EncodedRecord> =
                batch_indices.iter().map(|&i| records[i].clone()).collect();
            let out = match &mut trainee {
                Trainee::Expander(model) => {
                    let batch: Vec<ExpanderItem> =
                        data::make_expander_batches(&rebased, rebased.len(), 0, 0).remove(0);
                    let mut g = Graph::new();
                    let out = expander_batch_pass(model, &mut g, &batch, &rebased, config.alpha, config.beta)?;
                    finish_step(&mut g, &out, model.store_mut(), &mut state, config)?;
                    out
                }
                Trainee::Generator(model) => {
                    let batch: Vec<GeneratorItem> =
                        data::make_generator_batches(&rebased, rebased.len(), 0, 0).remove(0);
                    let mut g = Graph::new();
                    let out = generator_batch_pass(model, &mut g, &batch, &rebased)?;
                    finish_step(&mut g, &out, model.store_mut(), &mut state, config)?;
                    out
                }
            };

            let stats = stats_from(&out);
            log.records.push(StepRecord {
                step,
                loss: stats.loss_sum / out.loss_values.len() as f64,
                loss_per_token: stats.loss_per_token,
                accuracy: stats.accuracy,
                wall_ms: started.elapsed().as_millis() as u64,
            });

            if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
                if step % every == 0 {
                    match &trainee {
                        Trainee::Expander(m) => m.save(path)?,
                        Trainee::Generator(m) => m.save(path)?,
                    }
                }
            }

            if let Some(target) = config.target_accuracy {
                if step % config.eval_every == 0 {
                    let acc = match &trainee {
                        Trainee::Expander(m) => {
                            evaluate_expander(m, records, config.alpha, config.beta)?.accuracy
                        }
                        Trainee::Generator(m) => evaluate_generator(m, records)?.accuracy,
                    };
                    if acc >= target {
                        break 'outer;
                    }
                }
            }
        }
        epoch += 1;
    }

    log.steps_run = step;
    log.final_accuracy = match &trainee {
        Trainee::Expander(m) => evaluate_expander(m, records, config.alpha, config.beta)?.accuracy,
        Trainee::Generator(m) => evaluate_generator(m, records)?.accuracy,
    };
    if let Some(path) = &config.checkpoint_path {
        match &trainee {
            Trainee::Expander(m) => m.save(path)?,
            Trainee::Generator(m) => m.save(path)?,
        }
    }
    Ok(log)
}

/// Train the syntax expander with teacher forcing.
pub fn train_expander(
    model: &mut ExpanderModel,
    records: &[EncodedRecord],
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_loop(Trainee::Expander(model), records, config)
}

/// Train the guided text generator with teacher forcing. Guides come
/// from each record's target parse; substitute records (e.g. root stubs)
/// to train ablations.
pub fn train_generator(
    model: &mut GeneratorModel,
    records: &[EncodedRecord],
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_loop(Trainee::Generator(model), records, config)
}

fn finish_step(
    g: &mut Graph,
    out: &BatchOutcome,
    store: &mut ParamStore,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let batch_loss = g.average(&out.loss_vars)?;
    g.backward(batch_loss)?;
    store.zero_grads();
    g.export_grads(store);
    adam_step(store, state, config)
}
