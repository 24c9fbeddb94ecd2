//! Training loop: hybrid-negative batch assembly, warmup + cosine learning
//! rate schedule, AdamW updates, and checkpointing.
//!
//! Every source of randomness is derived from `(seed, epoch)` or
//! `(seed, step)` streams of a counter-based generator, so a run is
//! bit-reproducible and a resume from checkpoint replays the exact batch
//! sequence an unbroken run would have seen.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainerState};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, ModeFlags, TapeCandidates};
use crate::model::{forward_on_tape, ModelParameters, ParamVars};
use crate::tensor::{Tape, Tensor, VarId};
use crate::vocab::Vocabulary;

/// One query with its labeled documents, as read from training jsonl.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub positive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
}

/// Optimization hyperparameters. Defaults are the desk-scale recipe:
/// 500 steps, batch 8, one mined hard negative plus seven in-batch
/// negatives (k = 9), 3% warmup into cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub tau: f64,
    pub in_batch_negatives: usize,
    pub hard_negatives_per_example: usize,
    pub mode: ModeFlags,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Freeze the distillation teacher (the standard reading); set false to
    /// let gradients flow through it.
    pub detach_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.03,
            tau: 0.05,
            in_batch_negatives: 7,
            hard_negatives_per_example: 1,
            mode: ModeFlags {
                use_cod: true,
                use_sd: true,
            },
            seed: 0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            detach_teacher: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Input("steps must be positive".into()));
        }
        if self.warmup_fraction <= 0.0 || self.warmup_fraction >= 1.0 {
            return Err(Error::Input(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.in_batch_negatives >= self.batch_size {
            return Err(Error::Input(format!(
                "in_batch_negatives {} must be below batch_size {}",
                self.in_batch_negatives, self.batch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be positive".into()));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Input(format!("tau must be positive, got {}", self.tau)));
        }
        if self.peak_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Input("peak_lr and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Warmup length in steps, never below one so the ramp always exists.
    fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.steps as f64).round() as usize).max(1)
    }
}

/// Linear ramp `0 -> peak` over the warmup steps, then cosine decay
/// `peak -> 0` over the remainder.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::Input(format!(
            "step {step} outside schedule of {} steps",
            cfg.steps
        )));
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        Ok(cfg.peak_lr * step as f64 / warmup as f64)
    } else {
        let progress = (step - warmup) as f64 / (cfg.steps - warmup) as f64;
        Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Text-level plan for one query in a batch; `docs[0]` is the positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedCandidates {
    pub query: String,
    pub instruction: Option<String>,
    pub docs: Vec<String>,
}

/// Assemble candidate pools for a batch of examples: each query keeps its
/// mined hard negative (when present) and samples positives of the other
/// in-batch examples, never its own positive, without replacement.
pub fn assemble_batch(
    examples: &[&TrainingExample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<PlannedCandidates> {
    let mut plans = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut docs = vec![ex.positive.clone()];
        if cfg.hard_negatives_per_example > 0 {
            if let Some(neg) = &ex.negative {
                if neg == &ex.positive {
                    log::warn!(
                        "dropping hard negative equal to the positive for query {:?}",
                        ex.query
                    );
                } else {
                    docs.push(neg.clone());
                }
            }
        }
        // Sample in-batch negatives from the other queries' positives.
        let mut pool: Vec<usize> = (0..examples.len()).filter(|&j| j != i).collect();
        shuffle(&mut pool, rng);
        let mut taken = 0;
        for j in pool {
            if taken == cfg.in_batch_negatives {
                break;
            }
            let cand = &examples[j].positive;
            if cand == &ex.positive {
                log::warn!(
                    "skipping in-batch negative identical to the positive for query {:?}",
                    ex.query
                );
                continue;
            }
            if docs.contains(cand) {
                continue;
            }
            docs.push(cand.clone());
            taken += 1;
        }
        if docs.len() < 2 {
            log::warn!(
                "dropping query {:?}: no usable negatives in this batch",
                ex.query
            );
            continue;
        }
        plans.push(PlannedCandidates {
            query: ex.query.clone(),
            instruction: ex.instruction.clone(),
            docs,
        });
    }
    plans
}

/// Fisher-Yates with the caller's generator.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const EPOCH_STREAM_BASE: u64 = 1 << 32;
const BATCH_STREAM_BASE: u64 = 1 << 33;

/// Deterministic batch schedule: a fresh permutation of the dataset per
/// epoch, consumed in `batch_size` chunks. A trailing short chunk still
/// trains (its queries fall back to hard negatives only).
struct BatchSchedule {
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
    seed: u64,
    batch_size: usize,
}

impl BatchSchedule {
    fn new(n: usize, seed: u64, batch_size: usize) -> Self {
        let mut s = BatchSchedule {
            order: (0..n).collect(),
            epoch: 0,
            cursor: 0,
            seed,
            batch_size,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = stream_rng(self.seed, EPOCH_STREAM_BASE + self.epoch);
        shuffle(&mut self.order, &mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        chunk
    }

    /// Advance to the state just after `steps` batches were drawn.
    fn skip(&mut self, steps: usize) {
        for _ in 0..steps {
            let _ = self.next_batch();
        }
    }
}

/// Decoupled-weight-decay Adam. Per element:
/// `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`,
/// `theta -= lr * (mhat / (sqrt(vhat) + eps) + wd * theta)`
/// with bias-corrected `mhat = m / (1 - b1^t)`, `vhat = v / (1 - b2^t)`.
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParameters, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        AdamW {
            m,
            v,
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn from_state(state: &TrainerState, cfg: &TrainConfig) -> Self {
        AdamW {
            m: state.adam_m.iter().map(|t| t.data().to_vec()).collect(),
            v: state.adam_v.iter().map(|t| t.data().to_vec()).collect(),
            t: state.step,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn to_state(&self, params: &ModelParameters) -> TrainerState {
        let mut shapes = Vec::new();
        params.for_each(|_, t| shapes.push(t.shape().to_vec()));
        TrainerState {
            step: self.t,
            adam_m: self
                .m
                .iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::new(s.clone(), d.clone()).expect("moment shape"))
                .collect(),
            adam_v: self
                .v
                .iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::new(s.clone(), d.clone()).expect("moment shape"))
                .collect(),
        }
    }

    /// One update over gradients aligned with `for_each` order.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        params.for_each_mut(|_, tensor| {
            let g = grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
            idx += 1;
        });
    }
}

/// Per-step record mirrored into the loss-log CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_t: f64,
    pub total: f64,
}

pub fn loss_log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,lr,l_c,l_t,total\n");
    for entry in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            entry.step, entry.lr, entry.l_c, entry.l_t, entry.total
        );
    }
    out
}

/// Session controls for [`train`]: persistence plus an optional early halt.
#[derive(Default)]
pub struct TrainSession<'a> {
    pub checkpoint_path: Option<&'a Path>,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub loss_log_path: Option<&'a Path>,
    /// Stop after this many optimizer steps while keeping the full
    /// schedule, so a later resume continues the same trajectory.
    pub stop_after: Option<usize>,
}

/// Encode every unique document of a batch once and hand each plan its
/// candidate step nodes.
fn encode_batch(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParameters,
    vocab: &Vocabulary,
    plans: &[PlannedCandidates],
    flags: ModeFlags,
) -> Result<Vec<TapeCandidates>> {
    let encoder = crate::model::Encoder::new(params, vocab)?;
    let use_cod_tokens = flags.use_cod || flags.use_sd;
    let m = params.config.cod_length;

    let mut doc_nodes: std::collections::BTreeMap<String, Vec<VarId>> =
        std::collections::BTreeMap::new();
    for plan in plans {
        for text in &plan.docs {
            if doc_nodes.contains_key(text) {
                continue;
            }
            let (ids, steps) = if use_cod_tokens {
                (encoder.doc_cod_token_ids(text, m)?, m)
            } else {
                (encoder.doc_plain_token_ids(text)?, 1)
            };
            let hidden = forward_on_tape(tape, pv, &params.config, &ids)?;
            let len = ids.len();
            let mut nodes = Vec::with_capacity(steps);
            for s in 0..steps {
                nodes.push(tape.row(hidden, len - steps + s)?);
            }
            doc_nodes.insert(text.clone(), nodes);
        }
    }

    let mut candidate_sets = Vec::with_capacity(plans.len());
    for plan in plans {
        let qids = encoder.query_token_ids(&plan.query, plan.instruction.as_deref())?;
        let hidden = forward_on_tape(tape, pv, &params.config, &qids)?;
        let query = tape.row(hidden, qids.len() - 1)?;
        let doc_steps: Vec<Vec<VarId>> = plan
            .docs
            .iter()
            .map(|text| doc_nodes[text].clone())
            .collect();
        candidate_sets.push(TapeCandidates::new(query, doc_steps)?);
    }
    Ok(candidate_sets)
}

/// Run (or resume) the optimization loop, mutating `params` in place and
/// returning the per-step loss log from the executed steps.
pub fn train(
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    params: &mut ModelParameters,
    vocab: &Vocabulary,
    resume: Option<&TrainerState>,
    session: &TrainSession,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.query.trim().is_empty() || ex.positive.trim().is_empty() {
            return Err(Error::Input(format!(
                "training example {i} has an empty query or positive"
            )));
        }
    }

    let vocab_hash = vocab.content_hash();
    let mut schedule = BatchSchedule::new(examples.len(), cfg.seed, cfg.batch_size);
    let start_step = resume.map(|s| s.step).unwrap_or(0);
    if start_step > cfg.steps {
        return Err(Error::Input(format!(
            "checkpoint is at step {start_step}, beyond the configured {} steps",
            cfg.steps
        )));
    }
    schedule.skip(start_step);
    let mut adam = match resume {
        Some(state) => AdamW::from_state(state, cfg),
        None => AdamW::new(params, cfg),
    };

    let end_step = session.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut log = Vec::with_capacity(end_step.saturating_sub(start_step));
    for step in start_step..end_step {
        let lr = lr_schedule(step, cfg)?;
        let batch_indices = schedule.next_batch();
        let batch: Vec<&TrainingExample> = batch_indices.iter().map(|&i| &examples[i]).collect();
        let mut rng = stream_rng(cfg.seed, BATCH_STREAM_BASE + step as u64);
        let plans = assemble_batch(&batch, cfg, &mut rng);
        if plans.is_empty() {
            return Err(Error::Input(format!(
                "step {step}: every example in the batch was dropped (examples {batch_indices:?})"
            )));
        }

        let mut tape = Tape::new();
        let pv = ParamVars::leaf_into(&mut tape, params);
        let candidate_sets = encode_batch(&mut tape, &pv, params, vocab, &plans, cfg.mode)?;

        let mut totals = Vec::with_capacity(candidate_sets.len());
        let mut breakdowns: Vec<LossBreakdown> = Vec::with_capacity(candidate_sets.len());
        for tc in &candidate_sets {
            let nodes = total_loss(&mut tape, tc, cfg.tau, cfg.mode, cfg.detach_teacher)?;
            breakdowns.push(nodes.breakdown(&tape));
            totals.push(nodes.total);
        }
        let summed = tape.sum_scalars(&totals)?;
        let batch_loss = tape.scale(summed, 1.0 / totals.len() as f64);

        let loss_value = tape.scalar(batch_loss);
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss_value} at step {step} on batch {batch_indices:?}"
            )));
        }

        tape.backward(batch_loss)?;
        let grads = pv.grads(&tape);
        adam.step(params, &grads, lr);

        let n = breakdowns.len() as f64;
        log.push(StepLog {
            step,
            lr,
            l_c: breakdowns.iter().map(|b| b.l_c).sum::<f64>() / n,
            l_t: breakdowns.iter().map(|b| b.l_t).sum::<f64>() / n,
            total: loss_value,
        });

        if let Some(path) = session.checkpoint_path {
            if session.checkpoint_every > 0 && (step + 1) % session.checkpoint_every == 0 {
                checkpoint::save(path, params, &vocab_hash, Some(&adam.to_state(params)))?;
            }
        }
    }

    if let Some(path) = session.checkpoint_path {
        checkpoint::save(path, params, &vocab_hash, Some(&adam.to_state(params)))?;
    }
    if let Some(path) = session.loss_log_path {
        std::fs::write(path, loss_log_to_csv(&log))?;
    }
    Ok(log)
}

/// Parse training examples from jsonl with `query`, `positive`, optional
/// `negative` and `instruction` fields.
pub fn load_training_data(path: &Path) -> Result<Vec<TrainingExample>> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, lineno + 1, format!("bad training json: {e}")))?;
        if ex.query.trim().is_empty() || ex.positive.trim().is_empty() {
            return Err(Error::format(
                path,
                lineno + 1,
                "training example needs nonempty query and positive",
            ));
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::Input(format!(
            "training data {} is empty",
            path.display()
        )));
    }
    Ok(examples)
}
