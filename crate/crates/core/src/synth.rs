//! Synthetic clustered retrieval data.
//!
//! Generates a corpus of topic clusters with shared per-cluster keyword
//! vocabularies and a common filler pool, plus training triples (query,
//! positive from the same cluster, hard negative from another cluster) and
//! held-out evaluation queries judged relevant to every document of their
//! cluster. Deterministic for a fixed seed.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{Document, Qrels, Query};
use crate::train::TrainingExample;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub docs_per_cluster: usize,
    pub eval_queries_per_cluster: usize,
    pub train_queries_per_cluster: usize,
    pub keywords_per_cluster: usize,
    pub filler_words: usize,
    pub doc_keywords: (usize, usize),
    pub doc_fillers: (usize, usize),
    pub query_keywords: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    /// 20 clusters x 10 documents with 40 held-out queries.
    fn default() -> Self {
        SynthSpec {
            clusters: 20,
            docs_per_cluster: 10,
            eval_queries_per_cluster: 2,
            train_queries_per_cluster: 8,
            keywords_per_cluster: 6,
            filler_words: 40,
            doc_keywords: (4, 6),
            doc_fillers: (3, 6),
            query_keywords: (3, 4),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Vec<Document>,
    pub train: Vec<TrainingExample>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

const CONSONANTS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn make_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(CONSONANTS[rng.gen_range(0..CONSONANTS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

fn distinct_words(rng: &mut ChaCha8Rng, count: usize, syllables: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let w = make_word(rng, syllables);
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn sample_without_replacement<T: Clone>(
    items: &[T],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    let mut indices: Vec<usize> = (0..items.len()).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices
        .into_iter()
        .take(count.min(items.len()))
        .map(|i| items[i].clone())
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.clusters < 2 {
        return Err(Error::Input("need at least 2 clusters".into()));
    }
    if spec.docs_per_cluster == 0 || spec.keywords_per_cluster == 0 {
        return Err(Error::Input(
            "docs_per_cluster and keywords_per_cluster must be positive".into(),
        ));
    }
    if spec.query_keywords.0 > spec.keywords_per_cluster {
        return Err(Error::Input(
            "queries cannot use more keywords than the cluster has".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // One flat draw of distinct words, split into cluster keywords and filler.
    let total_keywords = spec.clusters * spec.keywords_per_cluster;
    let all_words = distinct_words(&mut rng, total_keywords + spec.filler_words, 3);
    let (keyword_pool, filler) = all_words.split_at(total_keywords);
    let cluster_keywords: Vec<&[String]> = keyword_pool.chunks(spec.keywords_per_cluster).collect();

    // Corpus: keyword-heavy documents with filler noise, shuffled word order.
    let mut corpus = Vec::with_capacity(spec.clusters * spec.docs_per_cluster);
    for (c, keywords) in cluster_keywords.iter().enumerate() {
        for d in 0..spec.docs_per_cluster {
            let n_kw = rng.gen_range(spec.doc_keywords.0..=spec.doc_keywords.1);
            let n_fill = rng.gen_range(spec.doc_fillers.0..=spec.doc_fillers.1);
            let mut words = sample_without_replacement(keywords, n_kw, &mut rng);
            for _ in 0..n_fill {
                words.push(filler[rng.gen_range(0..filler.len())].clone());
            }
            for i in (1..words.len()).rev() {
                let j = rng.gen_range(0..=i);
                words.swap(i, j);
            }
            corpus.push(Document {
                id: format!("c{c:02}d{d:02}"),
                title: String::new(),
                text: words.join(" "),
            });
        }
    }

    let query_text = |c: usize, rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(spec.query_keywords.0..=spec.query_keywords.1);
        sample_without_replacement(cluster_keywords[c], n, rng).join(" ")
    };

    // Held-out evaluation queries, judged relevant to their whole cluster.
    let mut queries = Vec::new();
    let mut qrels = Qrels::default();
    let mut eval_texts = BTreeSet::new();
    for c in 0..spec.clusters {
        for q in 0..spec.eval_queries_per_cluster {
            let text = loop {
                let t = query_text(c, &mut rng);
                if eval_texts.insert(t.clone()) {
                    break t;
                }
            };
            let qid = format!("q{c:02}_{q:02}");
            for d in 0..spec.docs_per_cluster {
                qrels.insert(qid.clone(), format!("c{c:02}d{d:02}"), 1);
            }
            queries.push(Query { id: qid, text });
        }
    }

    // Training triples; query strings never collide with the held-out set.
    let mut train = Vec::new();
    for c in 0..spec.clusters {
        for _ in 0..spec.train_queries_per_cluster {
            let text = loop {
                let t = query_text(c, &mut rng);
                if !eval_texts.contains(&t) {
                    break t;
                }
            };
            let positive =
                corpus[c * spec.docs_per_cluster + rng.gen_range(0..spec.docs_per_cluster)]
                    .text
                    .clone();
            let other = loop {
                let o = rng.gen_range(0..spec.clusters);
                if o != c {
                    break o;
                }
            };
            let negative =
                corpus[other * spec.docs_per_cluster + rng.gen_range(0..spec.docs_per_cluster)]
                    .text
                    .clone();
            train.push(TrainingExample {
                query: text,
                instruction: None,
                positive,
                negative: Some(negative),
            });
        }
    }

    Ok(SynthData {
        corpus,
        train,
        queries,
        qrels,
    })
}

/// Serialize to the on-disk formats the pipeline consumes.
pub fn corpus_to_jsonl(corpus: &[Document]) -> String {
    let mut out = String::new();
    for doc in corpus {
        out.push_str(
            &serde_json::json!({"_id": doc.id, "title": doc.title, "text": doc.text}).to_string(),
        );
        out.push('\n');
    }
    out
}

pub fn queries_to_jsonl(queries: &[Query]) -> String {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::json!({"_id": q.id, "text": q.text}).to_string());
        out.push('\n');
    }
    out
}

pub fn qrels_to_tsv(qrels: &Qrels) -> String {
    let mut out = String::from("query-id\tcorpus-id\tscore\n");
    for qid in qrels.judged_queries() {
        for (did, grade) in qrels.doc_grades(qid).expect("judged query") {
            out.push_str(&format!("{qid}\t{did}\t{grade}\n"));
        }
    }
    out
}

pub fn train_to_jsonl(train: &[TrainingExample]) -> String {
    let mut out = String::new();
    for ex in train {
        out.push_str(&serde_json::to_string(ex).expect("serializable example"));
        out.push('\n');
    }
    out
}
