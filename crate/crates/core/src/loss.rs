//! Contrastive and self-distillation training objectives.
//!
//! The contrastive loss is the negative log-probability of the positive
//! document under a temperature-scaled softmax of per-document scores; in
//! max-over-steps mode the gradient routes only through each document's
//! winning step (subgradient of max, lowest index on ties). The
//! self-distillation loss is `KL(P || Q)` between the best-step ranking
//! distribution `P` and the final-step distribution `Q`; `P` is treated as a
//! frozen teacher by default, so gradients reach only the final-step
//! embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::CandidateSet;
use crate::tensor::{dot, log_softmax_slice, Tape, VarId};

/// Which per-document score feeds the contrastive softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Best thinking step (max over step scores).
    FMax,
    /// Final step only.
    LastStep,
}

/// Ablation switches; see [`ModePreset`] for the four named combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    pub use_cod: bool,
    pub use_sd: bool,
}

/// The four training modes: plain contrastive on the end-of-sequence
/// embedding, deliberation with max-over-steps scoring, self-distillation on
/// top of a final-step contrastive term, and both combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModePreset {
    Vanilla,
    Cod,
    Sd,
    Debater,
}

impl ModePreset {
    pub fn flags(self) -> ModeFlags {
        match self {
            ModePreset::Vanilla => ModeFlags {
                use_cod: false,
                use_sd: false,
            },
            ModePreset::Cod => ModeFlags {
                use_cod: true,
                use_sd: false,
            },
            ModePreset::Sd => ModeFlags {
                use_cod: false,
                use_sd: true,
            },
            ModePreset::Debater => ModeFlags {
                use_cod: true,
                use_sd: true,
            },
        }
    }

    pub fn all() -> [ModePreset; 4] {
        [
            ModePreset::Vanilla,
            ModePreset::Sd,
            ModePreset::Cod,
            ModePreset::Debater,
        ]
    }
}

impl std::fmt::Display for ModePreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModePreset::Vanilla => "vanilla",
            ModePreset::Cod => "cod",
            ModePreset::Sd => "sd",
            ModePreset::Debater => "debater",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ModePreset::Vanilla),
            "cod" => Ok(ModePreset::Cod),
            "sd" => Ok(ModePreset::Sd),
            "debater" => Ok(ModePreset::Debater),
            other => Err(Error::Input(format!(
                "unknown mode {other:?}; expected vanilla, cod, sd, or debater"
            ))),
        }
    }
}

/// A candidate pool whose embeddings live on a [`Tape`]. `doc_steps[0]` is
/// the positive document; each inner vector holds that document's step
/// embedding nodes in step order.
#[derive(Debug, Clone)]
pub struct TapeCandidates {
    pub query: VarId,
    pub doc_steps: Vec<Vec<VarId>>,
}

impl TapeCandidates {
    pub fn new(query: VarId, doc_steps: Vec<Vec<VarId>>) -> Result<Self> {
        if doc_steps.len() < 2 {
            return Err(Error::Input(format!(
                "contrastive training needs at least 2 candidates, got {}",
                doc_steps.len()
            )));
        }
        if doc_steps.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("candidate with no step embeddings".into()));
        }
        Ok(TapeCandidates { query, doc_steps })
    }

    /// Leaf a value-level candidate set onto `tape`.
    pub fn from_values(tape: &mut Tape, cands: &CandidateSet) -> Result<Self> {
        let query = tape.leaf_vector(&cands.query);
        let doc_steps = cands
            .docs
            .iter()
            .map(|steps| steps.0.iter().map(|s| tape.leaf_vector(s)).collect())
            .collect();
        TapeCandidates::new(query, doc_steps)
    }

    pub fn k(&self) -> usize {
        self.doc_steps.len()
    }
}

/// Value-level summary of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_t: f64,
    pub total: f64,
    /// 1-based winning step per candidate, in candidate order.
    pub argmax_steps: Vec<usize>,
}

/// Nodes produced by [`total_loss`]; scalars live on the tape that built them.
pub struct LossNodes {
    pub l_c: VarId,
    pub l_t: Option<VarId>,
    pub total: VarId,
    pub argmax_steps: Vec<usize>,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_c: tape.scalar(self.l_c),
            l_t: self.l_t.map(|v| tape.scalar(v)).unwrap_or(0.0),
            total: tape.scalar(self.total),
            argmax_steps: self.argmax_steps.clone(),
        }
    }
}

/// Cosine score node for every step of one document.
fn step_score_nodes(tape: &mut Tape, query: VarId, steps: &[VarId]) -> Result<Vec<VarId>> {
    steps.iter().map(|&s| tape.cosine(query, s)).collect()
}

/// Per-document score node under `mode`, plus the winning 1-based step.
fn doc_score(
    tape: &mut Tape,
    query: VarId,
    steps: &[VarId],
    mode: ScoreMode,
) -> Result<(VarId, usize)> {
    let scores = step_score_nodes(tape, query, steps)?;
    match mode {
        ScoreMode::FMax => {
            let stacked = tape.stack_scalars(&scores)?;
            let (node, argmax) = tape.max_vec(stacked)?;
            Ok((node, argmax + 1))
        }
        ScoreMode::LastStep => {
            let last = *scores.last().expect("non-empty steps");
            // Report which step would have won, for diagnostics.
            let values: Vec<f64> = scores.iter().map(|&s| tape.scalar(s)).collect();
            let argmax = argmax_low(&values) + 1;
            Ok((last, argmax))
        }
    }
}

fn argmax_low(values: &[f64]) -> usize {
    let mut arg = 0;
    let mut best = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

fn validate_tau(tau: f64) -> Result<f64> {
    if tau > 0.0 && tau.is_finite() {
        Ok(1.0 / tau)
    } else {
        Err(Error::Input(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Negative log-probability of the positive (index 0) under the softmax of
/// temperature-scaled per-document scores.
pub fn contrastive_loss(
    tape: &mut Tape,
    cands: &TapeCandidates,
    tau: f64,
    mode: ScoreMode,
) -> Result<(VarId, Vec<usize>)> {
    let inv_tau = validate_tau(tau)?;
    let mut score_nodes = Vec::with_capacity(cands.k());
    let mut argmaxes = Vec::with_capacity(cands.k());
    for steps in &cands.doc_steps {
        let (node, argmax) = doc_score(tape, cands.query, steps, mode)?;
        score_nodes.push(node);
        argmaxes.push(argmax);
    }
    let stacked = tape.stack_scalars(&score_nodes)?;
    let scaled = tape.scale(stacked, inv_tau);
    let logp = tape.log_softmax(scaled)?;
    let pos = tape.pick(logp, 0)?;
    let loss = tape.scale(pos, -1.0);
    Ok((loss, argmaxes))
}

/// `KL(P || Q)` between the best-step teacher distribution and the
/// final-step student distribution.
///
/// With `detach_teacher` (the default used in training) `P` enters as a
/// constant, so gradients flow only through the final-step embeddings. With
/// it off, gradients also flow through `P`'s best-step scores.
pub fn self_distill_loss(
    tape: &mut Tape,
    cands: &TapeCandidates,
    tau: f64,
    detach_teacher: bool,
) -> Result<VarId> {
    let inv_tau = validate_tau(tau)?;

    let mut fmax_nodes = Vec::with_capacity(cands.k());
    let mut last_nodes = Vec::with_capacity(cands.k());
    for steps in &cands.doc_steps {
        let scores = step_score_nodes(tape, cands.query, steps)?;
        last_nodes.push(*scores.last().expect("non-empty steps"));
        let stacked = tape.stack_scalars(&scores)?;
        let (fm, _) = tape.max_vec(stacked)?;
        fmax_nodes.push(fm);
    }

    let student_stack = tape.stack_scalars(&last_nodes)?;
    let student_scaled = tape.scale(student_stack, inv_tau);
    let log_q = tape.log_softmax(student_scaled)?;

    if detach_teacher {
        // P is a constant: l_t = sum_i P_i ln P_i - sum_i P_i log Q_i.
        let teacher_scaled: Vec<f64> = fmax_nodes
            .iter()
            .map(|&n| tape.scalar(n) * inv_tau)
            .collect();
        let ln_p = log_softmax_slice(&teacher_scaled);
        let p: Vec<f64> = ln_p.iter().map(|v| v.exp()).collect();
        let entropy_term = dot(&ln_p, &p);
        let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
        let cross = tape.weighted_sum(log_q, &neg_p)?;
        Ok(tape.add_const(cross, entropy_term))
    } else {
        let teacher_stack = tape.stack_scalars(&fmax_nodes)?;
        let teacher_scaled = tape.scale(teacher_stack, inv_tau);
        let log_p = tape.log_softmax(teacher_scaled)?;
        let p = tape.exp(log_p);
        let neg_log_q = tape.scale(log_q, -1.0);
        let diff = tape.add(log_p, neg_log_q);
        let prod = tape.mul(p, diff);
        Ok(tape.sum_all(prod))
    }
}

/// Combined objective for one candidate set under the ablation flags.
///
/// - `use_cod=false, use_sd=false`: contrastive on the final (only) step.
/// - `use_cod=true`: contrastive on the best step.
/// - `use_sd=true`: adds the KL term; the teacher always spans every step.
pub fn total_loss(
    tape: &mut Tape,
    cands: &TapeCandidates,
    tau: f64,
    flags: ModeFlags,
    detach_teacher: bool,
) -> Result<LossNodes> {
    let mode = if flags.use_cod {
        ScoreMode::FMax
    } else {
        ScoreMode::LastStep
    };
    let (l_c, argmax_steps) = contrastive_loss(tape, cands, tau, mode)?;
    if flags.use_sd {
        let l_t = self_distill_loss(tape, cands, tau, detach_teacher)?;
        let total = tape.sum_scalars(&[l_c, l_t])?;
        Ok(LossNodes {
            l_c,
            l_t: Some(l_t),
            total,
            argmax_steps,
        })
    } else {
        Ok(LossNodes {
            l_c,
            l_t: None,
            total: l_c,
            argmax_steps,
        })
    }
}

/// Evaluate the combined objective on plain values (throwaway tape).
pub fn loss_breakdown(
    cands: &CandidateSet,
    tau: f64,
    flags: ModeFlags,
    detach_teacher: bool,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let tc = TapeCandidates::from_values(&mut tape, cands)?;
    let nodes = total_loss(&mut tape, &tc, tau, flags, detach_teacher)?;
    Ok(nodes.breakdown(&tape))
}

/// Gradient checks for both contrastive modes and the distillation loss,
/// one random candidate set per seed. The detached teacher is checked
/// against its defining function: cross-entropy to a `P` frozen at the
/// unperturbed inputs.
pub fn loss_grad_check_suite(
    seeds: &[u64],
    epsilon: f64,
    tolerance: f64,
) -> Result<Vec<crate::tensor::GradCheckReport>> {
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 4;
    const M: usize = 3;
    const D: usize = 6;
    const TAU: f64 = 0.5;

    let rebuild = |vars: &[VarId]| -> Result<TapeCandidates> {
        let query = vars[0];
        let doc_steps: Vec<Vec<VarId>> = vars[1..].chunks(M).map(|c| c.to_vec()).collect();
        TapeCandidates::new(query, doc_steps)
    };

    let mut reports = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x10550));
        let inputs: Vec<Tensor> = (0..1 + K * M)
            .map(|_| {
                let data: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::vector(&data).expect("valid vector")
            })
            .collect();

        reports.push(grad_check(
            &format!("contrastive_loss(f_max)[seed={seed}]"),
            &inputs,
            epsilon,
            tolerance,
            |tape, vars| {
                let tc = rebuild(vars)?;
                contrastive_loss(tape, &tc, TAU, ScoreMode::FMax).map(|(l, _)| l)
            },
        )?);

        reports.push(grad_check(
            &format!("contrastive_loss(last_step)[seed={seed}]"),
            &inputs,
            epsilon,
            tolerance,
            |tape, vars| {
                let tc = rebuild(vars)?;
                contrastive_loss(tape, &tc, TAU, ScoreMode::LastStep).map(|(l, _)| l)
            },
        )?);

        reports.push(grad_check(
            &format!("self_distill_loss(full_graph)[seed={seed}]"),
            &inputs,
            epsilon,
            tolerance,
            |tape, vars| {
                let tc = rebuild(vars)?;
                self_distill_loss(tape, &tc, TAU, false)
            },
        )?);

        // Frozen-teacher oracle for the detached loss.
        let base = {
            let query = inputs[0].data().to_vec();
            let docs: Vec<crate::model::StepEmbeddings> = inputs[1..]
                .chunks(M)
                .map(|c| {
                    crate::model::StepEmbeddings(c.iter().map(|t| t.data().to_vec()).collect())
                })
                .collect();
            let ids = (0..K).map(|i| format!("d{i}")).collect();
            CandidateSet::new(query, docs, ids)?
        };
        let p0 = crate::scoring::teacher_distribution(&base, TAU)?.0;
        let entropy: f64 = p0.iter().map(|p| p * p.ln()).sum();
        let neg_p0: Vec<f64> = p0.iter().map(|p| -p).collect();
        reports.push(grad_check(
            &format!("self_distill_loss(detached)[seed={seed}]"),
            &inputs,
            epsilon,
            tolerance,
            move |tape, vars| {
                let tc = rebuild(vars)?;
                let last: Vec<VarId> = tc
                    .doc_steps
                    .iter()
                    .map(|steps| tape.cosine(tc.query, *steps.last().unwrap()))
                    .collect::<Result<_>>()?;
                let stacked = tape.stack_scalars(&last)?;
                let scaled = tape.scale(stacked, 1.0 / TAU);
                let log_q = tape.log_softmax(scaled)?;
                let cross = tape.weighted_sum(log_q, &neg_p0)?;
                Ok(tape.add_const(cross, entropy))
            },
        )?);
    }
    Ok(reports)
}
