//! Data ingestion and ranking-quality metrics in TREC conventions.
//!
//! Corpus and queries are jsonl (`_id`, `title`, `text` / `_id`, `text`),
//! relevance judgments are a three-column TSV, runs use the six-column
//! interchange format `qid Q0 docid rank score tag`. nDCG follows the
//! trec_eval definition: `DCG = sum rel_i / log2(i + 1)` with the ideal
//! ordering from judged grades sorted descending; an exponential-gain
//! variant is available for cross-checking other toolkits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// One retrievable document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    /// Title concatenated before the body with a single space, when nonempty.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// Graded relevance judgments: `(query id, doc id) -> grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn judged_queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(|s| s.as_str())
    }

    pub fn doc_grades(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Messages for judgments that reference ids absent from the loaded
    /// queries or corpus. Entries are kept either way; scoring treats
    /// missing documents as never retrieved.
    pub fn unknown_id_warnings(&self, query_ids: &[String], doc_ids: &[String]) -> Vec<String> {
        let queries: std::collections::BTreeSet<&str> =
            query_ids.iter().map(|s| s.as_str()).collect();
        let docs: std::collections::BTreeSet<&str> = doc_ids.iter().map(|s| s.as_str()).collect();
        let mut warnings = Vec::new();
        for (qid, grades) in &self.judgments {
            if !queries.contains(qid.as_str()) {
                warnings.push(format!("qrels references unknown query id {qid}"));
            }
            for did in grades.keys() {
                if !docs.contains(did.as_str()) {
                    warnings.push(format!("qrels references unknown doc id {did}"));
                }
            }
        }
        warnings
    }
}

/// Ranked retrieval results per query, scores non-increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    /// Insert a query's ranking, sorting by descending score with ties
    /// broken by lexicographic doc id.
    pub fn insert(&mut self, query_id: impl Into<String>, mut ranked: Vec<(String, f64)>) {
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        self.rankings.insert(query_id.into(), ranked);
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query_id).map(|v| v.as_slice())
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    _id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    text: String,
}

#[derive(Deserialize)]
struct QueryLine {
    _id: String,
    #[serde(default)]
    text: String,
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, lineno + 1, format!("bad corpus json: {e}")))?;
        if !seen.insert(parsed._id.clone()) {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("duplicate corpus id {}", parsed._id),
            ));
        }
        docs.push(Document {
            id: parsed._id,
            title: parsed.title,
            text: parsed.text,
        });
    }
    if docs.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path.display())));
    }
    Ok(docs)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut queries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: QueryLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, lineno + 1, format!("bad query json: {e}")))?;
        if !seen.insert(parsed._id.clone()) {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("duplicate query id {}", parsed._id),
            ));
        }
        queries.push(Query {
            id: parsed._id,
            text: parsed.text,
        });
    }
    if queries.is_empty() {
        return Err(Error::Input(format!("queries {} is empty", path.display())));
    }
    Ok(queries)
}

/// Columns `query-id <tab> corpus-id <tab> score`, optional header row.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut qrels = Qrels::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lineno == 0 && trimmed.starts_with("query-id") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        let grade: u32 = cols[2].trim().parse().map_err(|_| {
            Error::format(path, lineno + 1, format!("bad relevance grade {:?}", cols[2]))
        })?;
        qrels.insert(cols[0], cols[1], grade);
    }
    if qrels.is_empty() {
        return Err(Error::Input(format!("qrels {} is empty", path.display())));
    }
    Ok(qrels)
}

/// Six-column interchange lines: `qid Q0 docid rank score tag`.
pub fn write_run(run: &RunFile, path: &Path, tag: &str) -> Result<()> {
    fs::write(path, run_to_string(run, tag))?;
    Ok(())
}

pub fn run_to_string(run: &RunFile, tag: &str) -> String {
    let mut out = String::new();
    for (qid, ranked) in &run.rankings {
        for (rank, (docid, score)) in ranked.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {docid} {} {score} {tag}", rank + 1);
        }
    }
    out
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rankings: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::format(path, lineno + 1, format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::format(path, lineno + 1, format!("bad score {:?}", cols[4])))?;
        let entry = rankings.entry(cols[0].to_string()).or_default();
        if rank != entry.len() + 1 {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("rank {rank} breaks the 1..n sequence for query {}", cols[0]),
            ));
        }
        if let Some((_, prev)) = entry.last() {
            if score > *prev {
                return Err(Error::format(
                    path,
                    lineno + 1,
                    format!("score {score} increases over previous {prev}"),
                ));
            }
        }
        if entry.iter().any(|(d, _)| d == cols[2]) {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("document {} listed twice for query {}", cols[2], cols[0]),
            ));
        }
        entry.push((cols[2].to_string(), score));
    }
    Ok(RunFile { rankings })
}

/// Gain function for DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gain {
    /// `rel / log2(rank + 1)`, the trec_eval convention.
    #[default]
    Linear,
    /// `(2^rel - 1) / log2(rank + 1)`, for cross-checking other toolkits.
    Exponential,
}

impl Gain {
    fn apply(self, rel: u32) -> f64 {
        match self {
            Gain::Linear => rel as f64,
            Gain::Exponential => (2.0f64).powi(rel as i32) - 1.0,
        }
    }
}

/// Per-query nDCG@k plus the corpus mean over evaluated queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Queries included in the mean: present in the run, judged, and with at
    /// least one positive grade.
    pub evaluated: usize,
}

pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Input("ndcg@k requires k >= 1".into()));
    }
    if !run
        .queries()
        .any(|q| qrels.doc_grades(q).is_some())
    {
        return Err(Error::Input(
            "no overlap between run queries and judged queries".into(),
        ));
    }

    let mut per_query = BTreeMap::new();
    for (qid, ranked) in &run.rankings {
        let Some(grades) = qrels.doc_grades(qid) else {
            continue;
        };
        let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
        if ideal.is_empty() {
            continue; // only zero-grade judgments; excluded from the mean
        }
        ideal.sort_unstable_by(|a, b| b.cmp(a));

        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (docid, _))| gain.apply(qrels.grade(qid, docid)) / ((i + 2) as f64).log2())
            .sum();
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain.apply(g) / ((i + 2) as f64).log2())
            .sum();
        per_query.insert(qid.clone(), dcg / idcg);
    }

    let evaluated = per_query.len();
    let mean = if evaluated == 0 {
        0.0
    } else {
        per_query.values().sum::<f64>() / evaluated as f64
    };
    Ok(MetricReport {
        k,
        per_query,
        mean,
        evaluated,
    })
}

/// Deterministic CSV: one row per query (sorted), then an `all` row with the
/// mean.
pub fn metrics_to_csv(report: &MetricReport) -> String {
    let mut out = format!("query_id,ndcg@{}\n", report.k);
    for (qid, v) in &report.per_query {
        let _ = writeln!(out, "{qid},{v}");
    }
    let _ = writeln!(out, "all,{}", report.mean);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write as _;

    fn write_temp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn corpus_title_concatenation() {
        let (_d, path) = write_temp(
            r#"{"_id":"d1","title":"","text":"hello"}
{"_id":"d2","title":"Greeting","text":"world"}"#,
        );
        let docs = load_corpus(&path).unwrap();
        assert_eq!(docs[0].full_text(), "hello");
        assert_eq!(docs[1].full_text(), "Greeting world");
    }

    #[test]
    fn corpus_duplicate_id_is_error() {
        let (_d, path) = write_temp(
            r#"{"_id":"d1","text":"a"}
{"_id":"d1","text":"b"}"#,
        );
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");
    }

    #[test]
    fn corpus_malformed_line_reports_line_number() {
        let (_d, path) = write_temp(
            r#"{"_id":"d1","text":"a"}
not json"#,
        );
        match load_corpus(&path).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn qrels_header_row_is_skipped() {
        let (_d, path) = write_temp("query-id\tcorpus-id\tscore\nq1\td1\t2\n");
        let qrels = load_qrels(&path).unwrap();
        assert_eq!(qrels.grade("q1", "d1"), 2);
        assert_eq!(qrels.len(), 1);
    }

    #[test]
    fn qrels_bad_grade_reports_line() {
        let (_d, path) = write_temp("q1\td1\ttwo\n");
        match load_qrels(&path).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn run_single_line_format() {
        let mut run = RunFile::default();
        run.insert("q1", vec![("d1".into(), 0.9)]);
        assert_eq!(run_to_string(&run, "cod-retriever"), "q1 Q0 d1 1 0.9 cod-retriever\n");
    }

    #[test]
    fn run_roundtrip() {
        let mut run = RunFile::default();
        run.insert(
            "q1",
            vec![("d2".into(), 0.25), ("d1".into(), 0.125), ("d3".into(), -0.5)],
        );
        run.insert("q2", vec![("d9".into(), 1.0 / 3.0)]);
        let (_d, path) = write_temp("");
        write_run(&run, &path, "t").unwrap();
        let back = read_run(&path).unwrap();
        assert_eq!(run, back);
    }

    #[test]
    fn run_read_rejects_non_monotone_scores() {
        let (_d, path) = write_temp("q1 Q0 d1 1 0.5 t\nq1 Q0 d2 2 0.9 t\n");
        match read_run(&path).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn run_read_rejects_duplicate_document() {
        let (_d, path) = write_temp("q1 Q0 d1 1 0.5 t\nq1 Q0 d1 2 0.4 t\n");
        assert!(read_run(&path).is_err());
    }

    #[test]
    fn run_read_rejects_rank_gap() {
        let (_d, path) = write_temp("q1 Q0 d1 1 0.5 t\nq1 Q0 d2 3 0.4 t\n");
        assert!(read_run(&path).is_err());
    }

    #[test]
    fn run_insert_orders_by_score_then_id() {
        let mut run = RunFile::default();
        run.insert(
            "q",
            vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.9)],
        );
        let ranked = run.ranking("q").unwrap();
        assert_eq!(ranked[0].0, "c");
        assert_eq!(ranked[1].0, "a");
        assert_eq!(ranked[2].0, "b");
    }

    fn fixture_qrels() -> Qrels {
        let mut qrels = Qrels::default();
        qrels.insert("q1", "d1", 1);
        qrels
    }

    #[test]
    fn ndcg_relevant_at_rank_one_is_one() {
        let mut run = RunFile::default();
        run.insert("q1", vec![("d1".into(), 0.9), ("d2".into(), 0.5)]);
        let report = ndcg_at_k(&run, &fixture_qrels(), 10, Gain::Linear).unwrap();
        assert_eq!(report.per_query["q1"], 1.0);
        assert_eq!(report.evaluated, 1);
    }

    #[test]
    fn ndcg_relevant_at_rank_two() {
        let mut run = RunFile::default();
        run.insert("q1", vec![("d9".into(), 0.9), ("d1".into(), 0.5)]);
        let report = ndcg_at_k(&run, &fixture_qrels(), 10, Gain::Linear).unwrap();
        assert!((report.per_query["q1"] - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn ndcg_graded_hand_case() {
        let mut qrels = Qrels::default();
        qrels.insert("q1", "d1", 2);
        qrels.insert("q1", "d2", 1);
        let mut run = RunFile::default();
        run.insert("q1", vec![("d2".into(), 0.9), ("d1".into(), 0.8)]);
        let report = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap();
        assert!((report.per_query["q1"] - 0.8597).abs() < 1e-4);
    }

    #[test]
    fn ndcg_excludes_unjudged_and_zero_grade_queries() {
        let mut qrels = Qrels::default();
        qrels.insert("q1", "d1", 1);
        qrels.insert("q2", "d1", 0);
        let mut run = RunFile::default();
        run.insert("q1", vec![("d1".into(), 0.9)]);
        run.insert("q2", vec![("d1".into(), 0.9)]);
        run.insert("q3", vec![("d1".into(), 0.9)]);
        let report = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap();
        assert_eq!(report.evaluated, 1);
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn ndcg_empty_intersection_is_error() {
        let mut run = RunFile::default();
        run.insert("qX", vec![("d1".into(), 0.9)]);
        assert!(ndcg_at_k(&run, &fixture_qrels(), 10, Gain::Linear).is_err());
    }

    #[test]
    fn ndcg_scale_invariance_and_swap_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n_docs = rng.gen_range(3..12);
            let mut qrels = Qrels::default();
            for d in 0..n_docs {
                qrels.insert("q", format!("d{d}"), rng.gen_range(0..3));
            }
            if (0..n_docs).all(|d| qrels.grade("q", &format!("d{d}")) == 0) {
                qrels.insert("q", "d0", 1);
            }
            let scores: Vec<f64> = (0..n_docs).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ranked: Vec<(String, f64)> = scores
                .iter()
                .enumerate()
                .map(|(d, &s)| (format!("d{d}"), s))
                .collect();
            let mut run = RunFile::default();
            run.insert("q", ranked.clone());
            let base = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap();
            let v = base.per_query["q"];
            assert!((0.0..=1.0 + 1e-12).contains(&v), "ndcg {v} out of range");

            // Positive scaling leaves the metric unchanged.
            let mut scaled_run = RunFile::default();
            scaled_run.insert(
                "q",
                ranked.iter().map(|(d, s)| (d.clone(), s * 7.25)).collect(),
            );
            let scaled = ndcg_at_k(&scaled_run, &qrels, 10, Gain::Linear).unwrap();
            assert_eq!(base.per_query["q"], scaled.per_query["q"]);

            // Swapping a higher-graded doc upward never hurts.
            let order = run.ranking("q").unwrap().to_vec();
            for i in 1..order.len() {
                let gi = qrels.grade("q", &order[i].0);
                let gprev = qrels.grade("q", &order[i - 1].0);
                if gi > gprev {
                    let mut swapped = order.clone();
                    swapped.swap(i - 1, i);
                    let mut swapped_run = RunFile::default();
                    // Preserve the swapped order through strictly decreasing scores.
                    let forced: Vec<(String, f64)> = swapped
                        .iter()
                        .enumerate()
                        .map(|(r, (d, _))| (d.clone(), 1.0 - r as f64 * 1e-3))
                        .collect();
                    swapped_run.insert("q", forced);
                    let after = ndcg_at_k(&swapped_run, &qrels, 10, Gain::Linear).unwrap();
                    assert!(
                        after.per_query["q"] >= base.per_query["q"] - 1e-12,
                        "swap decreased ndcg"
                    );
                }
            }
        }
    }

    /// Frozen randomized case with graded judgments, partial retrieval, and
    /// an all-miss query; expected values computed by an independent
    /// re-implementation of the DCG formula.
    #[test]
    fn ndcg_matches_independent_oracle_battery() {
        let mut qrels = Qrels::default();
        qrels.insert("q0", "d005", 1);
        qrels.insert("q0", "d007", 1);
        qrels.insert("q0", "d008", 0);
        qrels.insert("q1", "d000", 2);
        qrels.insert("q1", "d003", 3);
        qrels.insert("q1", "d004", 2);
        qrels.insert("q1", "d006", 0);
        qrels.insert("q1", "d007", 1);
        qrels.insert("q1", "d008", 3);
        qrels.insert("q2", "d000", 2);
        qrels.insert("q2", "d002", 3);
        qrels.insert("q2", "d004", 2);
        qrels.insert("q2", "d006", 1);
        qrels.insert("q2", "d007", 3);
        qrels.insert("q3", "d002", 3);
        qrels.insert("q3", "d004", 1);
        qrels.insert("q3", "d005", 2);
        qrels.insert("q4", "d004", 3);
        qrels.insert("q4", "d005", 3);
        qrels.insert("q4", "d006", 3);

        let mut run = RunFile::default();
        run.insert(
            "q0",
            vec![
                ("d003".into(), 0.9297231835805264),
                ("d002".into(), 0.8863110992657115),
                ("d004".into(), 0.8030202850564597),
                ("d006".into(), 0.7628990548888642),
                ("d008".into(), 0.6758695200711056),
                ("d007".into(), 0.604042251497186),
                ("d000".into(), 0.3717037295452331),
                ("d001".into(), 0.2279230104629325),
                ("d005".into(), 0.07090205933271287),
            ],
        );
        run.insert(
            "q1",
            vec![
                ("d003".into(), 0.9703231761790843),
                ("d000".into(), 0.8349097295857393),
                ("d006".into(), 0.7753323629233949),
                ("d005".into(), 0.6051539079876368),
                ("d002".into(), 0.547577014048748),
                ("d004".into(), 0.1414551325280634),
                ("d001".into(), 0.0746643665390051),
                ("d007".into(), 0.017808625193467043),
            ],
        );
        run.insert(
            "q2",
            vec![
                ("d000".into(), 0.5710887208101543),
                ("d005".into(), 0.5442234992973922),
                ("d004".into(), 0.3694066221803155),
                ("d002".into(), 0.2185596788971773),
                ("d008".into(), 0.03540635753480348),
            ],
        );
        run.insert(
            "q3",
            vec![
                ("d000".into(), 0.8677021617214062),
                ("d006".into(), 0.27340328569685535),
                ("d001".into(), 0.19172149482171597),
            ],
        );
        run.insert(
            "q4",
            vec![
                ("d007".into(), 0.956611896258508),
                ("d005".into(), 0.7844155093234709),
                ("d004".into(), 0.7696514968268633),
                ("d000".into(), 0.6985023623024105),
                ("d006".into(), 0.5463551100918587),
                ("d003".into(), 0.4881053723153571),
                ("d002".into(), 0.3353079288615486),
                ("d008".into(), 0.23897272342349563),
                ("d001".into(), 0.13183867043041952),
            ],
        );

        let expected = [
            ("q0", 0.40298313359773236),
            ("q1", 0.7407565222738006),
            ("q2", 0.6010408302444054),
            ("q3", 0.0),
            ("q4", 0.7122630665145961),
        ];
        let report = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap();
        assert_eq!(report.evaluated, 5);
        for (qid, want) in expected {
            let got = report.per_query[qid];
            assert!(
                (got - want).abs() < 1e-12,
                "{qid}: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn metrics_csv_is_deterministic() {
        let mut run = RunFile::default();
        run.insert("q1", vec![("d1".into(), 0.9)]);
        let report = ndcg_at_k(&run, &fixture_qrels(), 10, Gain::Linear).unwrap();
        assert_eq!(metrics_to_csv(&report), metrics_to_csv(&report));
        assert!(metrics_to_csv(&report).starts_with("query_id,ndcg@10\n"));
    }

    #[test]
    fn unknown_id_warnings() {
        let mut qrels = Qrels::default();
        qrels.insert("q1", "d1", 1);
        qrels.insert("q2", "dX", 1);
        let warnings =
            qrels.unknown_id_warnings(&["q1".into(), "q2".into()], &["d1".into()]);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("dX"));
    }
}
