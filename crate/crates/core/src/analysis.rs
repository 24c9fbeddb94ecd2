//! Embedding diagnostics: per-step retrieval curves, adjacent-step
//! similarity, and step-to-final similarity profiles, emitted as CSV.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, Document, Gain, Qrels, Query, RunFile};
use crate::index::{build_index, search};
use crate::model::Encoder;
use crate::tensor::cosine_similarity;

/// `(step index, mean nDCG@10)` for each thinking step `1..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCurve(pub Vec<(usize, f64)>);

/// Mean pairwise cosine between step embeddings over a document sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// Mean cosine between each intermediate step and the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalSimilarityProfile(pub Vec<f64>);

/// Encode every query and retrieve `depth` documents from `index`.
pub fn retrieval_run(
    index: &crate::index::EmbeddingIndex,
    encoder: &Encoder,
    queries: &[Query],
    depth: usize,
    instruction: Option<&str>,
) -> Result<RunFile> {
    let mut run = RunFile::default();
    for q in queries {
        let emb = encoder.encode_query(&q.text, instruction)?;
        let hits = search(index, &emb, depth)?;
        run.insert(q.id.clone(), hits.0);
    }
    Ok(run)
}

/// Retrieval quality of each thinking step in isolation: for every step
/// `i`, index the corpus at that step and evaluate mean nDCG@k.
pub fn stepwise_eval(
    corpus: &[Document],
    queries: &[Query],
    qrels: &Qrels,
    encoder: &Encoder,
    m: usize,
    metric_k: usize,
    instruction: Option<&str>,
) -> Result<StepCurve> {
    let mut points = Vec::with_capacity(m);
    for step in 1..=m {
        let index = build_index(corpus, encoder, m, step, "stepwise")?;
        let run = retrieval_run(&index, encoder, queries, metric_k, instruction)?;
        let report = ndcg_at_k(&run, qrels, metric_k, Gain::Linear)?;
        points.push((step, report.mean));
    }
    Ok(StepCurve(points))
}

/// First `limit` documents by id order, or a seeded random sample.
pub fn select_sample(corpus: &[Document], limit: usize, seed: Option<u64>) -> Vec<Document> {
    let mut docs = corpus.to_vec();
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    match seed {
        None => docs.into_iter().take(limit).collect(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..docs.len()).rev() {
                let j = rng.gen_range(0..=i);
                docs.swap(i, j);
            }
            let mut sample: Vec<Document> = docs.into_iter().take(limit).collect();
            sample.sort_by(|a, b| a.id.cmp(&b.id));
            sample
        }
    }
}

/// `(i, j)` entry: mean over the sample of `cos(step_i, step_j)` for the
/// first `s` thinking steps.
pub fn adjacent_similarity(
    sample: &[Document],
    encoder: &Encoder,
    s: usize,
) -> Result<SimilarityMatrix> {
    if sample.is_empty() {
        return Err(Error::Input("similarity analysis needs a nonempty sample".into()));
    }
    if s == 0 || s > encoder.params.config.cod_length {
        return Err(Error::Input(format!(
            "step count {s} outside 1..={}",
            encoder.params.config.cod_length
        )));
    }
    let mut values = vec![0.0; s * s];
    for doc in sample {
        let steps = encoder.encode_document_cod(&doc.full_text(), s)?;
        for i in 0..s {
            for j in 0..s {
                values[i * s + j] += cosine_similarity(steps.step(i + 1), steps.step(j + 1))?;
            }
        }
    }
    for v in &mut values {
        *v /= sample.len() as f64;
    }
    Ok(SimilarityMatrix { size: s, values })
}

/// Entry `i` (1-based, up to `m - 1`): mean over the sample of
/// `cos(step_i, step_m)`.
pub fn final_similarity_profile(
    sample: &[Document],
    encoder: &Encoder,
    m: usize,
) -> Result<FinalSimilarityProfile> {
    if sample.is_empty() {
        return Err(Error::Input("similarity analysis needs a nonempty sample".into()));
    }
    if m < 2 || m > encoder.params.config.cod_length {
        return Err(Error::Input(format!(
            "profile needs 2..={} steps, got {m}",
            encoder.params.config.cod_length
        )));
    }
    let mut values = vec![0.0; m - 1];
    for doc in sample {
        let steps = encoder.encode_document_cod(&doc.full_text(), m)?;
        for (i, slot) in values.iter_mut().enumerate() {
            *slot += cosine_similarity(steps.step(i + 1), steps.step(m))?;
        }
    }
    for v in &mut values {
        *v /= sample.len() as f64;
    }
    Ok(FinalSimilarityProfile(values))
}

pub fn step_curve_to_csv(curve: &StepCurve) -> String {
    let mut out = String::from("step,ndcg10\n");
    for (step, v) in &curve.0 {
        let _ = writeln!(out, "{step},{v}");
    }
    out
}

pub fn similarity_matrix_to_csv(matrix: &SimilarityMatrix) -> String {
    let mut out = String::from("i,j,value\n");
    for i in 0..matrix.size() {
        for j in 0..matrix.size() {
            let _ = writeln!(out, "{},{},{}", i + 1, j + 1, matrix.get(i, j));
        }
    }
    out
}

pub fn final_profile_to_csv(profile: &FinalSimilarityProfile) -> String {
    let mut out = String::from("i,value\n");
    for (i, v) in profile.0.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParameters};
    use crate::vocab::Vocabulary;

    fn fixture() -> (ModelParameters, Vocabulary, Vec<Document>, Vec<Query>, Qrels) {
        let corpus: Vec<Document> = (0..6)
            .map(|i| Document {
                id: format!("d{i}"),
                title: String::new(),
                text: format!("topic{i} words about topic{i} stuff", i = i),
            })
            .collect();
        let queries: Vec<Query> = (0..3)
            .map(|i| Query {
                id: format!("q{i}"),
                text: format!("topic{i} stuff"),
            })
            .collect();
        let mut qrels = Qrels::default();
        for i in 0..3 {
            qrels.insert(format!("q{i}"), format!("d{i}"), 1);
        }
        let mut texts: Vec<String> = corpus.iter().map(|d| d.full_text()).collect();
        texts.extend(queries.iter().map(|q| q.text.clone()));
        let vocab = Vocabulary::build(texts, 64, 4).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            ff_dim: 32,
            max_len: 32,
            vocab_size: vocab.len(),
            cod_length: 4,
            seed: 21,
        };
        let params = ModelParameters::init(cfg).unwrap();
        (params, vocab, corpus, queries, qrels)
    }

    #[test]
    fn step_curve_last_point_matches_standard_eval() {
        let (params, vocab, corpus, queries, qrels) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let curve = stepwise_eval(&corpus, &queries, &qrels, &enc, 4, 10, None).unwrap();
        assert_eq!(curve.0.len(), 4);
        assert_eq!(curve.0[0].0, 1);
        assert_eq!(curve.0[3].0, 4);

        let index = build_index(&corpus, &enc, 4, 4, "stepwise").unwrap();
        let run = retrieval_run(&index, &enc, &queries, 10, None).unwrap();
        let standard = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap();
        assert_eq!(curve.0[3].1, standard.mean);
    }

    #[test]
    fn single_step_curve_is_standard_eval() {
        let (params, vocab, corpus, queries, qrels) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let curve = stepwise_eval(&corpus, &queries, &qrels, &enc, 1, 10, None).unwrap();
        assert_eq!(curve.0.len(), 1);
        let index = build_index(&corpus, &enc, 1, 1, "stepwise").unwrap();
        let run = retrieval_run(&index, &enc, &queries, 10, None).unwrap();
        let standard = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap();
        assert_eq!(curve.0[0].1, standard.mean);
    }

    /// Zero attention output, identical prompt-token embeddings, and
    /// identical positional rows force every thinking step to produce the
    /// same embedding.
    fn flatten_model(params: &mut ModelParameters, vocab: &Vocabulary) {
        for layer in &mut params.layers {
            for v in layer.wo.data_mut() {
                *v = 0.0;
            }
            for v in layer.bo.data_mut() {
                *v = 0.0;
            }
        }
        let d = params.config.d_model;
        let first_cod = vocab.cod_id(1).unwrap();
        let template: Vec<f64> =
            params.token_embedding.data()[first_cod * d..(first_cod + 1) * d].to_vec();
        for step in 2..=params.config.cod_length {
            let id = vocab.cod_id(step).unwrap();
            params.token_embedding.data_mut()[id * d..(id + 1) * d].copy_from_slice(&template);
        }
        let pos_template: Vec<f64> = params.pos_embedding.data()[0..d].to_vec();
        let rows = params.config.max_len;
        for r in 1..rows {
            params.pos_embedding.data_mut()[r * d..(r + 1) * d].copy_from_slice(&pos_template);
        }
    }

    #[test]
    fn degenerate_model_gives_flat_curve() {
        let (mut params, vocab, corpus, queries, qrels) = fixture();
        flatten_model(&mut params, &vocab);
        let enc = Encoder::new(&params, &vocab).unwrap();
        let curve = stepwise_eval(&corpus, &queries, &qrels, &enc, 4, 10, None).unwrap();
        for w in curve.0.windows(2) {
            assert_eq!(w[0].1, w[1].1, "curve not flat: {curve:?}");
        }
        // And the step embeddings really are identical.
        let steps = enc.encode_document_cod("topic0 words", 4).unwrap();
        for s in 2..=4 {
            assert_eq!(steps.step(1), steps.step(s));
        }
    }

    #[test]
    fn adjacent_similarity_matches_external_oracle() {
        let (params, vocab, corpus, _, _) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let sample = select_sample(&corpus, 20, None);
        let matrix = adjacent_similarity(&sample, &enc, 3).unwrap();

        // Recompute externally, one document at a time.
        let mut oracle = [0.0; 9];
        for doc in &sample {
            let steps = enc.encode_document_cod(&doc.full_text(), 3).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    oracle[i * 3 + j] +=
                        cosine_similarity(steps.step(i + 1), steps.step(j + 1)).unwrap();
                }
            }
        }
        for (idx, o) in oracle.iter().enumerate() {
            let got = matrix.get(idx / 3, idx % 3);
            assert!((got - o / sample.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matrix_symmetry_and_diagonal() {
        let (params, vocab, corpus, _, _) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let matrix = adjacent_similarity(&corpus, &enc, 4).unwrap();
        for i in 0..4 {
            assert!((matrix.get(i, i) - 1.0).abs() < 1e-6);
            for j in 0..4 {
                assert!((matrix.get(i, j) - matrix.get(j, i)).abs() < 1e-6);
                assert!(matrix.get(i, j) >= -1.0 - 1e-9 && matrix.get(i, j) <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn final_profile_bounds_and_boundary() {
        let (params, vocab, corpus, _, _) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let profile = final_similarity_profile(&corpus, &enc, 4).unwrap();
        assert_eq!(profile.0.len(), 3);
        for v in &profile.0 {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
        let two = final_similarity_profile(&corpus, &enc, 2).unwrap();
        assert_eq!(two.0.len(), 1);
        assert!(final_similarity_profile(&corpus, &enc, 1).is_err());
        assert!(final_similarity_profile(&[], &enc, 3).is_err());
    }

    #[test]
    fn sample_selection_is_deterministic() {
        let (_, _, corpus, _, _) = fixture();
        let a = select_sample(&corpus, 3, None);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].id, "d0");
        let b = select_sample(&corpus, 3, Some(7));
        let c = select_sample(&corpus, 3, Some(7));
        assert_eq!(b, c);
    }

    #[test]
    fn csv_outputs_are_deterministic() {
        let curve = StepCurve(vec![(1, 0.5), (2, 0.75)]);
        assert_eq!(step_curve_to_csv(&curve), "step,ndcg10\n1,0.5\n2,0.75\n");
        let profile = FinalSimilarityProfile(vec![0.25, 0.5]);
        assert_eq!(final_profile_to_csv(&profile), "i,value\n1,0.25\n2,0.5\n");
        let matrix = SimilarityMatrix {
            size: 2,
            values: vec![1.0, 0.5, 0.5, 1.0],
        };
        assert_eq!(
            similarity_matrix_to_csv(&matrix),
            "i,j,value\n1,1,1\n1,2,0.5\n2,1,0.5\n2,2,1\n"
        );
    }
}
