//! Toy causal transformer encoder.
//!
//! Queries are embedded as the hidden state at an appended end-of-sequence
//! token. Documents are embedded by appending the learned deliberation
//! prompt tokens `<t_1>..<t_m>` and reading the hidden state at each prompt
//! position, yielding one embedding per thinking step; causal masking makes
//! the step sequence a prefix-stable chain. A plain end-of-sequence pathway
//! is kept for the vanilla training mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};
use crate::vocab::Vocabulary;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Number of deliberation prompt tokens (the thinking depth).
    pub cod_length: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes on a CPU.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            max_len: 128,
            vocab_size,
            cod_length: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Input(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.cod_length == 0 {
            return Err(Error::Input("cod_length must be at least 1".into()));
        }
        if self.max_len <= self.cod_length + 1 {
            return Err(Error::Input(format!(
                "max_len {} must exceed cod_length {} + 1",
                self.max_len, self.cod_length
            )));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Input("layers, ff_dim and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer weights. Attention projections are `[d_model, d_model]`, the
/// feed-forward pair is `[d_model, ff_dim]` / `[ff_dim, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// All trainable tensors, including the token-embedding rows for `</s>` and
/// the deliberation prompts, plus learned positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

impl ModelParameters {
    /// Seed-controlled initialization: normal(0, 0.02) for embeddings and
    /// projections, zeros for biases, ones for norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Tensor {
            let data: Vec<f64> = (0..rows * cols).map(|_| INIT_STD * standard_normal(rng)).collect();
            Tensor::matrix(rows, cols, data).expect("valid init shape")
        };
        let zeros = |n: usize| Tensor::vector(&vec![0.0; n]).expect("valid bias shape");
        let ones = |n: usize| Tensor::vector(&vec![1.0; n]).expect("valid gain shape");

        let token_embedding = normal(&mut rng, config.vocab_size, d);
        let pos_embedding = normal(&mut rng, config.max_len, d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                ln1_gamma: ones(d),
                ln1_beta: zeros(d),
                wq: normal(&mut rng, d, d),
                bq: zeros(d),
                wk: normal(&mut rng, d, d),
                bk: zeros(d),
                wv: normal(&mut rng, d, d),
                bv: zeros(d),
                wo: normal(&mut rng, d, d),
                bo: zeros(d),
                ln2_gamma: ones(d),
                ln2_beta: zeros(d),
                w_ff1: normal(&mut rng, d, config.ff_dim),
                b_ff1: zeros(config.ff_dim),
                w_ff2: normal(&mut rng, config.ff_dim, d),
                b_ff2: zeros(d),
            });
        }
        Ok(ModelParameters {
            config,
            token_embedding,
            pos_embedding,
            layers,
            final_gamma: ones(d),
            final_beta: zeros(d),
        })
    }

    /// Visit every tensor with its stable name, in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("token_embedding", &self.token_embedding);
        f("pos_embedding", &self.pos_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in layer_fields(l) {
                f(&format!("layers.{i}.{suffix}"), t);
            }
        }
        f("final_gamma", &self.final_gamma);
        f("final_beta", &self.final_beta);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("token_embedding", &mut self.token_embedding);
        f("pos_embedding", &mut self.pos_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in layer_fields_mut(l) {
                f(&format!("layers.{i}.{suffix}"), t);
            }
        }
        f("final_gamma", &mut self.final_gamma);
        f("final_beta", &mut self.final_beta);
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }
}

fn layer_fields(l: &LayerParams) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("ln1_gamma", &l.ln1_gamma),
        ("ln1_beta", &l.ln1_beta),
        ("wq", &l.wq),
        ("bq", &l.bq),
        ("wk", &l.wk),
        ("bk", &l.bk),
        ("wv", &l.wv),
        ("bv", &l.bv),
        ("wo", &l.wo),
        ("bo", &l.bo),
        ("ln2_gamma", &l.ln2_gamma),
        ("ln2_beta", &l.ln2_beta),
        ("w_ff1", &l.w_ff1),
        ("b_ff1", &l.b_ff1),
        ("w_ff2", &l.w_ff2),
        ("b_ff2", &l.b_ff2),
    ]
}

fn layer_fields_mut(l: &mut LayerParams) -> Vec<(&'static str, &mut Tensor)> {
    vec![
        ("ln1_gamma", &mut l.ln1_gamma),
        ("ln1_beta", &mut l.ln1_beta),
        ("wq", &mut l.wq),
        ("bq", &mut l.bq),
        ("wk", &mut l.wk),
        ("bk", &mut l.bk),
        ("wv", &mut l.wv),
        ("bv", &mut l.bv),
        ("wo", &mut l.wo),
        ("bo", &mut l.bo),
        ("ln2_gamma", &mut l.ln2_gamma),
        ("ln2_beta", &mut l.ln2_beta),
        ("w_ff1", &mut l.w_ff1),
        ("b_ff1", &mut l.b_ff1),
        ("w_ff2", &mut l.w_ff2),
        ("b_ff2", &mut l.b_ff2),
    ]
}

/// Box-Muller standard normal from two uniform draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tape handles for every parameter, mirroring [`ModelParameters`].
pub struct ParamVars {
    pub token_embedding: VarId,
    pub pos_embedding: VarId,
    pub layers: Vec<LayerVars>,
    pub final_gamma: VarId,
    pub final_beta: VarId,
}

pub struct LayerVars {
    pub ln1_gamma: VarId,
    pub ln1_beta: VarId,
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
    pub ln2_gamma: VarId,
    pub ln2_beta: VarId,
    pub w_ff1: VarId,
    pub b_ff1: VarId,
    pub w_ff2: VarId,
    pub b_ff2: VarId,
}

impl ParamVars {
    /// Insert every parameter as a leaf on `tape`, preserving visit order.
    pub fn leaf_into(tape: &mut Tape, params: &ModelParameters) -> ParamVars {
        ParamVars {
            token_embedding: tape.leaf(&params.token_embedding),
            pos_embedding: tape.leaf(&params.pos_embedding),
            layers: params
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gamma: tape.leaf(&l.ln1_gamma),
                    ln1_beta: tape.leaf(&l.ln1_beta),
                    wq: tape.leaf(&l.wq),
                    bq: tape.leaf(&l.bq),
                    wk: tape.leaf(&l.wk),
                    bk: tape.leaf(&l.bk),
                    wv: tape.leaf(&l.wv),
                    bv: tape.leaf(&l.bv),
                    wo: tape.leaf(&l.wo),
                    bo: tape.leaf(&l.bo),
                    ln2_gamma: tape.leaf(&l.ln2_gamma),
                    ln2_beta: tape.leaf(&l.ln2_beta),
                    w_ff1: tape.leaf(&l.w_ff1),
                    b_ff1: tape.leaf(&l.b_ff1),
                    w_ff2: tape.leaf(&l.w_ff2),
                    b_ff2: tape.leaf(&l.b_ff2),
                })
                .collect(),
            final_gamma: tape.leaf(&params.final_gamma),
            final_beta: tape.leaf(&params.final_beta),
        }
    }

    /// Gradients in the same order as [`ModelParameters::for_each`].
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<&'t [f64]> {
        let mut out = Vec::new();
        out.push(tape.grad(self.token_embedding));
        out.push(tape.grad(self.pos_embedding));
        for l in &self.layers {
            for v in [
                l.ln1_gamma, l.ln1_beta, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gamma, l.ln2_beta, l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2,
            ] {
                out.push(tape.grad(v));
            }
        }
        out.push(tape.grad(self.final_gamma));
        out.push(tape.grad(self.final_beta));
        out
    }
}

/// Pre-norm causal transformer forward pass; returns the `[len, d_model]`
/// hidden-state node after the final layer norm. Position `i` depends only
/// on positions `<= i`.
pub fn forward_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<VarId> {
    if ids.is_empty() {
        return Err(Error::Input("cannot run the encoder on an empty sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    let len = ids.len();
    let dh = cfg.d_model / cfg.heads;
    let positions: Vec<usize> = (0..len).collect();

    let tok = tape.gather(pv.token_embedding, ids)?;
    let pos = tape.gather(pv.pos_embedding, &positions)?;
    let mut x = tape.add(tok, pos);

    for l in &pv.layers {
        let normed = tape.layer_norm(x, l.ln1_gamma, l.ln1_beta, LN_EPS);
        let q = tape.matmul(normed, l.wq)?;
        let q = tape.add_row(q, l.bq);
        let k = tape.matmul(normed, l.wk)?;
        let k = tape.add_row(k, l.bk);
        let v = tape.matmul(normed, l.wv)?;
        let v = tape.add_row(v, l.bv);

        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.causal_softmax(scaled)?;
            head_ctx.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx);
        let proj = tape.matmul(ctx, l.wo)?;
        let proj = tape.add_row(proj, l.bo);
        x = tape.add(x, proj);

        let normed2 = tape.layer_norm(x, l.ln2_gamma, l.ln2_beta, LN_EPS);
        let ff1 = tape.matmul(normed2, l.w_ff1)?;
        let ff1 = tape.add_row(ff1, l.b_ff1);
        let act = tape.gelu(ff1);
        let ff2 = tape.matmul(act, l.w_ff2)?;
        let ff2 = tape.add_row(ff2, l.b_ff2);
        x = tape.add(x, ff2);
    }

    Ok(tape.layer_norm(x, pv.final_gamma, pv.final_beta, LN_EPS))
}

/// Ordered document representations decoded at the deliberation positions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbeddings(pub Vec<Vec<f64>>);

impl StepEmbeddings {
    pub fn steps(&self) -> usize {
        self.0.len()
    }

    /// Embedding of 1-based step `i`.
    pub fn step(&self, i: usize) -> &[f64] {
        &self.0[i - 1]
    }

    pub fn last(&self) -> &[f64] {
        self.0.last().expect("step embeddings are never empty")
    }
}

/// Inference-time view over parameters plus the vocabulary they index.
pub struct Encoder<'a> {
    pub params: &'a ModelParameters,
    pub vocab: &'a Vocabulary,
}

impl<'a> Encoder<'a> {
    pub fn new(params: &'a ModelParameters, vocab: &'a Vocabulary) -> Result<Self> {
        if vocab.len() != params.config.vocab_size {
            return Err(Error::Input(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        if vocab.cod_length() != params.config.cod_length {
            return Err(Error::Input(format!(
                "vocabulary reserves {} deliberation tokens but the model expects {}",
                vocab.cod_length(),
                params.config.cod_length
            )));
        }
        Ok(Encoder { params, vocab })
    }

    /// Token ids for a query: optional instruction, query text, `</s>`.
    pub fn query_token_ids(&self, text: &str, instruction: Option<&str>) -> Result<Vec<usize>> {
        let budget = self.params.config.max_len - 1;
        let joined = match instruction {
            Some(instr) if !instr.trim().is_empty() => format!("{instr} {text}"),
            _ => text.to_string(),
        };
        let mut ids = self.vocab.encode(&joined, budget).ids;
        if ids.is_empty() {
            return Err(Error::Input("empty query".into()));
        }
        ids.push(self.vocab.eos_id());
        Ok(ids)
    }

    /// Token ids for a document under deliberation: text then `<t_1>..<t_m>`.
    /// Truncation always reserves the full configured deliberation budget so
    /// shorter chains see an identical document prefix.
    pub fn doc_cod_token_ids(&self, text: &str, m: usize) -> Result<Vec<usize>> {
        let cfg = &self.params.config;
        if m == 0 || m > cfg.cod_length {
            return Err(Error::Input(format!(
                "deliberation depth {m} outside 1..={}",
                cfg.cod_length
            )));
        }
        let budget = cfg.max_len - cfg.cod_length;
        let mut ids = self.vocab.encode(text, budget).ids;
        if ids.is_empty() {
            return Err(Error::Input("empty document".into()));
        }
        for step in 1..=m {
            ids.push(self.vocab.cod_id(step)?);
        }
        Ok(ids)
    }

    /// Token ids for the vanilla pathway: text then `</s>`.
    pub fn doc_plain_token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let budget = self.params.config.max_len - 1;
        let mut ids = self.vocab.encode(text, budget).ids;
        if ids.is_empty() {
            return Err(Error::Input("empty document".into()));
        }
        ids.push(self.vocab.eos_id());
        Ok(ids)
    }

    /// Hidden states `[len, d_model]` for raw token ids.
    pub fn forward_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = ParamVars::leaf_into(&mut tape, self.params);
        let h = forward_on_tape(&mut tape, &pv, &self.params.config, ids)?;
        Tensor::matrix(
            ids.len(),
            self.params.config.d_model,
            tape.value(h).to_vec(),
        )
    }

    /// Query embedding: hidden state at the `</s>` position.
    pub fn encode_query(&self, text: &str, instruction: Option<&str>) -> Result<Vec<f64>> {
        let ids = self.query_token_ids(text, instruction)?;
        let h = self.forward_ids(&ids)?;
        Ok(last_row(&h))
    }

    /// Step embeddings at the `m` deliberation positions, in order.
    pub fn encode_document_cod(&self, text: &str, m: usize) -> Result<StepEmbeddings> {
        let ids = self.doc_cod_token_ids(text, m)?;
        let h = self.forward_ids(&ids)?;
        let d = self.params.config.d_model;
        let len = ids.len();
        let mut steps = Vec::with_capacity(m);
        for s in 0..m {
            let row = len - m + s;
            steps.push(h.data()[row * d..(row + 1) * d].to_vec());
        }
        Ok(StepEmbeddings(steps))
    }

    /// Vanilla document embedding: hidden state at `</s>`.
    pub fn encode_document_plain(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.doc_plain_token_ids(text)?;
        let h = self.forward_ids(&ids)?;
        Ok(last_row(&h))
    }
}

fn last_row(h: &Tensor) -> Vec<f64> {
    let d = h.shape()[1];
    let rows = h.shape()[0];
    h.data()[(rows - 1) * d..rows * d].to_vec()
}
