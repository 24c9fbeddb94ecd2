//! Exact top-k cosine retrieval over final-step document embeddings.
//!
//! Rows are unit-normalized at build time so a search is a max-inner-product
//! scan of the whole matrix; ties break by lexicographic doc id. The on-disk
//! layout is fixed so rebuilds from the same checkpoint are byte-identical:
//!
//! ```text
//! magic "CODRIDX1" | u32 version | u32 d_model | u64 n | u32 step_index |
//! u32 m | u32 hash_len + checkpoint hash | per row: u32 id_len + id bytes |
//! n * d_model little-endian f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::Document;
use crate::model::Encoder;
use crate::tensor::norm;

const MAGIC: &[u8; 8] = b"CODRIDX1";
const VERSION: u32 = 1;

/// Document-id to unit-vector store plus provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<f32>, // row-major n x d, unit rows
    d: usize,
    pub step_index: usize,
    pub m: usize,
    pub checkpoint_hash: String,
}

/// Ranked `(doc id, score)` pairs, scores non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult(pub Vec<(String, f64)>);

impl EmbeddingIndex {
    /// Build directly from raw embedding rows (normalized here), for callers
    /// that computed vectors elsewhere.
    pub fn from_vectors(
        ids: Vec<String>,
        rows: &[Vec<f64>],
        step_index: usize,
        m: usize,
        checkpoint_hash: &str,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("cannot build an index from no vectors".into()));
        }
        if ids.len() != rows.len() {
            return Err(Error::Input(format!(
                "{} ids for {} vectors",
                ids.len(),
                rows.len()
            )));
        }
        let d = rows[0].len();
        let mut seen = std::collections::BTreeSet::new();
        let mut vectors = Vec::with_capacity(rows.len() * d);
        for (id, row) in ids.iter().zip(rows) {
            if !seen.insert(id.clone()) {
                return Err(Error::Input(format!("duplicate document id {id}")));
            }
            if row.len() != d {
                return Err(Error::Dimension(format!(
                    "vector for {id} has {} dimensions, expected {d}",
                    row.len()
                )));
            }
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numerical(format!(
                    "document {id}: embedding norm {n} cannot be normalized"
                )));
            }
            vectors.extend(row.iter().map(|v| (v / n) as f32));
        }
        Ok(EmbeddingIndex {
            ids,
            vectors,
            d,
            step_index,
            m,
            checkpoint_hash: checkpoint_hash.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.d..(row + 1) * self.d]
    }
}

/// Encode every document at deliberation depth `m`, keep the
/// `step_index`-th step's vector (1-based; the final step by default), and
/// store it unit-normalized.
pub fn build_index(
    corpus: &[Document],
    encoder: &Encoder,
    m: usize,
    step_index: usize,
    checkpoint_hash: &str,
) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot build an index from an empty corpus".into()));
    }
    if step_index == 0 || step_index > m {
        return Err(Error::Input(format!(
            "step_index {step_index} outside 1..={m}"
        )));
    }
    let mut ids = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    for doc in corpus {
        let steps = encoder
            .encode_document_cod(&doc.full_text(), m)
            .map_err(|e| Error::Input(format!("document {}: {e}", doc.id)))?;
        rows.push(steps.step(step_index).to_vec());
        ids.push(doc.id.clone());
    }
    EmbeddingIndex::from_vectors(ids, &rows, step_index, m, checkpoint_hash)
}

/// Exact top-k by cosine: normalize the query once, then dot against every
/// unit row. Ties break by lexicographic doc id.
pub fn search(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::Input("search requires k >= 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Input("search over an empty index".into()));
    }
    if query.len() != index.d {
        return Err(Error::Dimension(format!(
            "query has {} dimensions, index stores {}",
            query.len(),
            index.d
        )));
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::Degenerate(format!("query norm {qn}")));
    }
    let qhat: Vec<f64> = query.iter().map(|v| v / qn).collect();

    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|row| {
            let v = index.vector(row);
            let score: f64 = v.iter().zip(&qhat).map(|(&a, &b)| a as f64 * b).sum();
            (row, score)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    Ok(SearchResult(
        scored
            .into_iter()
            .take(k)
            .map(|(row, score)| (index.ids[row].clone(), score))
            .collect(),
    ))
}

pub fn index_to_bytes(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.d as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&(index.step_index as u32).to_le_bytes());
    out.extend_from_slice(&(index.m as u32).to_le_bytes());
    out.extend_from_slice(&(index.checkpoint_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(index.checkpoint_hash.as_bytes());
    for id in &index.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &index.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn index_from_bytes(bytes: &[u8]) -> Result<EmbeddingIndex> {
    let bad = |msg: &str| Error::Input(format!("invalid index file: {msg}"));
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *cursor + n {
            return Err(bad("truncated"));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    if take(&mut cursor, 8)? != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let step_index = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let hash_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let checkpoint_hash = String::from_utf8(take(&mut cursor, hash_len)?.to_vec())
        .map_err(|_| bad("non-utf8 checkpoint hash"))?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        ids.push(
            String::from_utf8(take(&mut cursor, len)?.to_vec()).map_err(|_| bad("non-utf8 id"))?,
        );
    }
    let mut vectors = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        vectors.push(f32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(EmbeddingIndex {
        ids,
        vectors,
        d,
        step_index,
        m,
        checkpoint_hash,
    })
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    fs::write(path, index_to_bytes(index))?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    index_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParameters};
    use crate::tensor::cosine_similarity;
    use crate::vocab::Vocabulary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (ModelParameters, Vocabulary, Vec<Document>) {
        let corpus: Vec<Document> = (0..7)
            .map(|i| Document {
                id: format!("doc{i}"),
                title: String::new(),
                text: format!("word{i} word{} filler text", (i + 1) % 7),
            })
            .collect();
        let vocab = Vocabulary::build(
            corpus.iter().map(|d| d.full_text()).collect::<Vec<_>>(),
            64,
            4,
        )
        .unwrap();
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            ff_dim: 32,
            max_len: 32,
            vocab_size: vocab.len(),
            cod_length: 4,
            seed: 12,
        };
        let params = ModelParameters::init(cfg).unwrap();
        (params, vocab, corpus)
    }

    #[test]
    fn build_normalizes_and_respects_step_override() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let idx = build_index(&corpus, &enc, 4, 4, "hash").unwrap();
        assert_eq!(idx.len(), 7);
        for row in 0..idx.len() {
            let n: f64 = idx.vector(row).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let default_step = build_index(&corpus, &enc, 4, 4, "hash").unwrap();
        assert_eq!(idx, default_step);
        let early = build_index(&corpus, &enc, 4, 1, "hash").unwrap();
        assert_ne!(idx.vectors, early.vectors);
        assert!(build_index(&corpus, &enc, 4, 5, "hash").is_err());
        assert!(build_index(&[], &enc, 4, 4, "hash").is_err());
    }

    #[test]
    fn single_document_index() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let idx = build_index(&corpus[..1], &enc, 4, 4, "hash").unwrap();
        assert_eq!(idx.len(), 1);
        let hit = search(&idx, &[1.0; 16], 5).unwrap();
        assert_eq!(hit.0.len(), 1);
    }

    #[test]
    fn stored_vector_query_ranks_first_with_unit_score() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let idx = build_index(&corpus, &enc, 4, 4, "hash").unwrap();
        let q: Vec<f64> = idx.vector(3).iter().map(|&v| v as f64).collect();
        let result = search(&idx, &q, 3).unwrap();
        assert_eq!(result.0[0].0, "doc3");
        assert!((result.0[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn search_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = rng.gen_range(2..60);
            let d = 12;
            let mut ids: Vec<String> = (0..n).map(|i| format!("r{i:03}")).collect();
            // Shuffled insertion order must not matter.
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.gen_range(0..=i));
            }
            let vectors: Vec<f32> = (0..n * d)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    v as f32
                })
                .collect();
            // Normalize rows like the builder does.
            let mut unit = vectors.clone();
            for row in 0..n {
                let slice = &mut unit[row * d..(row + 1) * d];
                let nrm = (slice.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
                for v in slice.iter_mut() {
                    *v = ((*v as f64) / nrm) as f32;
                }
            }
            let idx = EmbeddingIndex {
                ids: ids.clone(),
                vectors: unit,
                d,
                step_index: 1,
                m: 1,
                checkpoint_hash: "t".into(),
            };
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = rng.gen_range(1..=n.min(10));
            let got = search(&idx, &query, k).unwrap();

            // Oracle: independent cosine on every row, full sort, take k.
            let mut oracle: Vec<(String, f64)> = (0..n)
                .map(|row| {
                    let rowv: Vec<f64> = idx.vector(row).iter().map(|&v| v as f64).collect();
                    (ids[row].clone(), cosine_similarity(&query, &rowv).unwrap())
                })
                .collect();
            oracle.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then_with(|| a.0.cmp(&b.0))
            });
            let oracle_ids: Vec<&String> = oracle.iter().take(k).map(|(id, _)| id).collect();
            let got_ids: Vec<&String> = got.0.iter().map(|(id, _)| id).collect();
            assert_eq!(got_ids, oracle_ids);
            for (_, s) in &got.0 {
                assert!(*s >= -1.0 - 1e-6 && *s <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn k_larger_than_index_returns_all() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let idx = build_index(&corpus, &enc, 4, 4, "hash").unwrap();
        let result = search(&idx, &[0.5; 16], 100).unwrap();
        assert_eq!(result.0.len(), 7);
        for w in result.0.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn zero_norm_query_is_degenerate() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let idx = build_index(&corpus, &enc, 4, 4, "hash").unwrap();
        assert!(matches!(
            search(&idx, &[0.0; 16], 3),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn insertion_order_does_not_change_results() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let forward = build_index(&corpus, &enc, 4, 4, "hash").unwrap();
        let mut reversed_corpus = corpus.clone();
        reversed_corpus.reverse();
        let reversed = build_index(&reversed_corpus, &enc, 4, 4, "hash").unwrap();
        let q: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = search(&forward, &q, 7).unwrap();
        let b = search(&reversed, &q, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let (params, vocab, corpus) = fixture();
        let enc = Encoder::new(&params, &vocab).unwrap();
        let idx = build_index(&corpus, &enc, 4, 2, "deadbeef").unwrap();
        let bytes = index_to_bytes(&idx);
        let back = index_from_bytes(&bytes).unwrap();
        assert_eq!(idx, back);
        assert_eq!(bytes, index_to_bytes(&back));
        // Rebuild from the same parameters: identical file bytes.
        let again = build_index(&corpus, &enc, 4, 2, "deadbeef").unwrap();
        assert_eq!(bytes, index_to_bytes(&again));
    }
}
