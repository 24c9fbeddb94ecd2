//! Command-line surface for the deliberate-thinking retriever pipeline:
//! synthetic data, vocabulary, training, indexing, search, evaluation,
//! embedding analysis, and gradient verification.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cod_retriever::checkpoint::{self, TrainerState};
use cod_retriever::config::RunConfig;
use cod_retriever::error::{Error, Result};
use cod_retriever::eval::{
    load_corpus, load_qrels, load_queries, metrics_to_csv, ndcg_at_k, run_to_string, Gain,
};
use cod_retriever::index::{build_index, index_to_bytes, load_index, search};
use cod_retriever::loss::ModePreset;
use cod_retriever::model::{Encoder, ModelParameters};
use cod_retriever::synth::{self, SynthSpec};
use cod_retriever::train::{load_training_data, train, TrainSession};
use cod_retriever::vocab::Vocabulary;
use cod_retriever::{analysis, loss, tensor};

#[derive(Parser)]
#[command(
    name = "cod-retriever",
    version,
    about = "Deliberate-thinking dense retriever: train, index, search, evaluate, analyze"
)]
struct Cli {
    /// key=value config file; command-line flags override file values
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered corpus with training triples and
    /// held-out judged queries
    Synth {
        /// Directory for corpus.jsonl, queries.jsonl, qrels.tsv, train.jsonl
        #[arg(long)]
        out_dir: PathBuf,
        /// Generator seed [default: 17]
        #[arg(long)]
        seed: Option<u64>,
        /// Number of topic clusters [default: 20]
        #[arg(long)]
        clusters: Option<usize>,
        /// Documents per cluster [default: 10]
        #[arg(long)]
        docs_per_cluster: Option<usize>,
    },

    /// Build a deterministic vocabulary from text or jsonl files
    BuildVocab {
        /// Input files: plain text, corpus/queries jsonl, or training jsonl
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        /// Output vocabulary file (one token per line)
        #[arg(long)]
        out: PathBuf,
        /// Maximum vocabulary size incl. reserved tokens [config key: vocab_max_size, default: 4096]
        #[arg(long)]
        max_size: Option<usize>,
        /// Deliberation length m, fixing the reserved tokens [config key: cod_length, default: 8]
        #[arg(long)]
        cod_length: Option<usize>,
    },

    /// Train a retriever from scratch or resume from a checkpoint
    Train {
        /// Training jsonl with query/positive/negative/instruction fields
        #[arg(long)]
        train_data: PathBuf,
        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV (step,lr,l_c,l_t,total)
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Resume from this checkpoint (optimizer state included)
        #[arg(long)]
        resume_from: Option<PathBuf>,
        /// Ablation preset: vanilla | cod | sd | debater [config key: mode, default: debater]
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ModePreset>,
        /// Optimizer steps [config key: steps, default: 500]
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size [config key: batch_size, default: 8]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Peak learning rate [config key: peak_lr, default: 1e-3]
        #[arg(long)]
        peak_lr: Option<f64>,
        /// Warmup fraction of total steps [config key: warmup_fraction, default: 0.03]
        #[arg(long)]
        warmup_fraction: Option<f64>,
        /// Softmax temperature [config key: tau, default: 0.05]
        #[arg(long)]
        tau: Option<f64>,
        /// In-batch negatives per query [config key: in_batch_negatives, default: 7]
        #[arg(long)]
        in_batch_negatives: Option<usize>,
        /// Mined hard negatives per query [config key: hard_negatives, default: 1]
        #[arg(long)]
        hard_negatives: Option<usize>,
        /// Data-order and sampling seed [config key: seed, default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter-init seed [config key: model_seed, default: 0]
        #[arg(long)]
        model_seed: Option<u64>,
        /// Deliberation length m [config key: cod_length, default: 8]
        #[arg(long)]
        cod_length: Option<usize>,
        /// Write a checkpoint every N steps [config key: checkpoint_every, default: 0 = end only]
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Halt after this many steps, keeping the full schedule for resume
        #[arg(long)]
        stop_after: Option<usize>,
    },

    /// Encode a corpus and write the embedding index
    Index {
        /// Model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus jsonl (_id, title, text)
        #[arg(long)]
        corpus: PathBuf,
        /// Output index file
        #[arg(long)]
        out: PathBuf,
        /// 1-based thinking step to index [default: m, the final step]
        #[arg(long)]
        step_index: Option<usize>,
    },

    /// Embed one query and print ranked results in TREC format
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Index file produced by `index`
        #[arg(long)]
        index: PathBuf,
        /// Query text
        #[arg(long)]
        query: String,
        /// Results to return [default: 10]
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Optional task instruction prepended to the query [config key: instruction]
        #[arg(long)]
        instruction: Option<String>,
        /// Query id for the output lines [default: q1]
        #[arg(long, default_value = "q1")]
        qid: String,
        /// Run tag column [default: cod-retriever]
        #[arg(long, default_value = "cod-retriever")]
        tag: String,
    },

    /// Retrieve for every query and score the run with nDCG@k
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus jsonl; ignored when --index is given
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Prebuilt index file (otherwise built from --corpus)
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Output run file (TREC six-column format)
        #[arg(long)]
        run_out: PathBuf,
        /// Output metrics CSV (per-query nDCG plus mean)
        #[arg(long)]
        metrics_out: PathBuf,
        /// Metric cutoff [config key: ndcg_k, default: 10]
        #[arg(long)]
        k: Option<usize>,
        /// Retrieval depth of the run [config key: depth, default: 100]
        #[arg(long)]
        depth: Option<usize>,
        /// Use exponential (2^rel - 1) gain instead of linear [config key: exponential_gain]
        #[arg(long)]
        exponential_gain: bool,
        /// Optional task instruction for queries [config key: instruction]
        #[arg(long)]
        instruction: Option<String>,
        /// Run tag column [default: cod-retriever]
        #[arg(long, default_value = "cod-retriever")]
        tag: String,
    },

    /// Emit step_curve.csv, adjacent_sim.csv, and final_profile.csv
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Output directory for the CSV files
        #[arg(long)]
        out_dir: PathBuf,
        /// Documents sampled for the similarity analyses [config key: sample_limit, default: 200]
        #[arg(long)]
        sample_limit: Option<usize>,
        /// Seeded random sample instead of first-by-id [config key: sample_seed]
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Steps included in the adjacent-similarity matrix [config key: adjacent_steps, default: 5]
        #[arg(long)]
        adjacent_steps: Option<usize>,
        /// Optional task instruction for queries [config key: instruction]
        #[arg(long)]
        instruction: Option<String>,
    },

    /// Verify analytic gradients against central finite differences
    Gradcheck {
        /// Number of random seeds per op [default: 10]
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Finite-difference epsilon [default: 1e-5]
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Max relative error accepted [default: 1e-4]
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn parse_mode(s: &str) -> Result<ModePreset> {
    s.parse()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn over<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Load a checkpoint plus the vocabulary it was trained with, verifying the
/// recorded vocabulary hash.
fn load_model(
    checkpoint_path: &Path,
    vocab_path: &Path,
) -> Result<(ModelParameters, Vocabulary, Option<TrainerState>, String)> {
    let vocab = Vocabulary::load(vocab_path)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    if ckpt.vocab_hash != vocab.content_hash() {
        return Err(Error::Input(format!(
            "vocabulary {} (hash {}) does not match the one recorded in {} (hash {})",
            vocab_path.display(),
            vocab.content_hash(),
            checkpoint_path.display(),
            ckpt.vocab_hash
        )));
    }
    let hash = checkpoint::file_hash(checkpoint_path)?;
    Ok((ckpt.params, vocab, ckpt.trainer, hash))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = base_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            out_dir,
            seed,
            clusters,
            docs_per_cluster,
        } => {
            let mut spec = SynthSpec::default();
            over(&mut spec.seed, seed);
            over(&mut spec.clusters, clusters);
            over(&mut spec.docs_per_cluster, docs_per_cluster);
            let data = synth::generate(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(
                out_dir.join("corpus.jsonl"),
                synth::corpus_to_jsonl(&data.corpus),
            )?;
            std::fs::write(
                out_dir.join("queries.jsonl"),
                synth::queries_to_jsonl(&data.queries),
            )?;
            std::fs::write(out_dir.join("qrels.tsv"), synth::qrels_to_tsv(&data.qrels))?;
            std::fs::write(
                out_dir.join("train.jsonl"),
                synth::train_to_jsonl(&data.train),
            )?;
            println!(
                "wrote {} documents, {} queries, {} training triples to {}",
                data.corpus.len(),
                data.queries.len(),
                data.train.len(),
                out_dir.display()
            );
            Ok(())
        }

        Command::BuildVocab {
            corpus,
            out,
            max_size,
            cod_length,
        } => {
            let mut run_cfg = cfg;
            over(&mut run_cfg.vocab_max_size, max_size);
            over(&mut run_cfg.cod_length, cod_length);
            let mut texts = Vec::new();
            for path in &corpus {
                texts.extend(extract_texts(path)?);
            }
            let vocab = Vocabulary::build(texts, run_cfg.vocab_max_size, run_cfg.cod_length)?;
            vocab.save(&out)?;
            println!(
                "wrote vocabulary of {} tokens (m = {}) to {}",
                vocab.len(),
                vocab.cod_length(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            train_data,
            vocab,
            out,
            loss_log,
            resume_from,
            mode,
            steps,
            batch_size,
            peak_lr,
            warmup_fraction,
            tau,
            in_batch_negatives,
            hard_negatives,
            seed,
            model_seed,
            cod_length,
            checkpoint_every,
            stop_after,
        } => {
            let mut run_cfg = cfg;
            over(&mut run_cfg.mode, mode);
            over(&mut run_cfg.steps, steps);
            over(&mut run_cfg.batch_size, batch_size);
            over(&mut run_cfg.peak_lr, peak_lr);
            over(&mut run_cfg.warmup_fraction, warmup_fraction);
            over(&mut run_cfg.tau, tau);
            over(&mut run_cfg.in_batch_negatives, in_batch_negatives);
            over(&mut run_cfg.hard_negatives, hard_negatives);
            over(&mut run_cfg.seed, seed);
            over(&mut run_cfg.model_seed, model_seed);
            over(&mut run_cfg.cod_length, cod_length);
            over(&mut run_cfg.checkpoint_every, checkpoint_every);

            let examples = load_training_data(&train_data)?;
            let (vocabulary, mut params, resume_state) = match &resume_from {
                Some(path) => {
                    let (params, vocabulary, state, _) = load_model(path, &vocab)?;
                    (vocabulary, params, state)
                }
                None => {
                    let vocabulary = Vocabulary::load(&vocab)?;
                    let model_cfg = run_cfg.model_config(vocabulary.len());
                    let params = ModelParameters::init(model_cfg)?;
                    (vocabulary, params, None)
                }
            };
            let train_cfg = run_cfg.train_config();
            let session = TrainSession {
                checkpoint_path: Some(&out),
                checkpoint_every: run_cfg.checkpoint_every,
                loss_log_path: loss_log.as_deref(),
                stop_after,
            };
            let log = train(
                &examples,
                &train_cfg,
                &mut params,
                &vocabulary,
                resume_state.as_ref(),
                &session,
            )?;
            if let Some(last) = log.last() {
                println!(
                    "trained {} steps (mode {}); final loss {:.4} (l_c {:.4}, l_t {:.4}); checkpoint {}",
                    log.len(),
                    run_cfg.mode,
                    last.total,
                    last.l_c,
                    last.l_t,
                    out.display()
                );
            } else {
                println!("no steps executed; checkpoint {}", out.display());
            }
            Ok(())
        }

        Command::Index {
            checkpoint,
            vocab,
            corpus,
            out,
            step_index,
        } => {
            let (params, vocabulary, _, hash) = load_model(&checkpoint, &vocab)?;
            let encoder = Encoder::new(&params, &vocabulary)?;
            let docs = load_corpus(&corpus)?;
            let m = params.config.cod_length;
            let step = step_index.unwrap_or(m);
            let index = build_index(&docs, &encoder, m, step, &hash)?;
            std::fs::write(&out, index_to_bytes(&index))?;
            println!(
                "indexed {} documents at step {}/{} into {}",
                index.len(),
                step,
                m,
                out.display()
            );
            Ok(())
        }

        Command::Search {
            checkpoint,
            vocab,
            index,
            query,
            k,
            instruction,
            qid,
            tag,
        } => {
            let (params, vocabulary, _, hash) = load_model(&checkpoint, &vocab)?;
            let encoder = Encoder::new(&params, &vocabulary)?;
            let idx = load_index(&index)?;
            if idx.checkpoint_hash != hash {
                log::warn!(
                    "index was built from checkpoint {} but searching with {}",
                    idx.checkpoint_hash,
                    hash
                );
            }
            let instruction = instruction.or(cfg.instruction);
            let emb = encoder.encode_query(&query, instruction.as_deref())?;
            let hits = search(&idx, &emb, k)?;
            for (rank, (docid, score)) in hits.0.iter().enumerate() {
                println!("{qid} Q0 {docid} {} {score} {tag}", rank + 1);
            }
            Ok(())
        }

        Command::Eval {
            checkpoint,
            vocab,
            corpus,
            index,
            queries,
            qrels,
            run_out,
            metrics_out,
            k,
            depth,
            exponential_gain,
            instruction,
            tag,
        } => {
            let mut run_cfg = cfg;
            over(&mut run_cfg.ndcg_k, k);
            over(&mut run_cfg.depth, depth);
            if exponential_gain {
                run_cfg.exponential_gain = true;
            }
            if instruction.is_some() {
                run_cfg.instruction = instruction;
            }

            let (params, vocabulary, _, hash) = load_model(&checkpoint, &vocab)?;
            let encoder = Encoder::new(&params, &vocabulary)?;
            let query_list = load_queries(&queries)?;
            let judgments = load_qrels(&qrels)?;
            let idx = match (&index, &corpus) {
                (Some(path), _) => load_index(path)?,
                (None, Some(corpus_path)) => {
                    let docs = load_corpus(corpus_path)?;
                    for warning in judgments.unknown_id_warnings(
                        &query_list.iter().map(|q| q.id.clone()).collect::<Vec<_>>(),
                        &docs.iter().map(|d| d.id.clone()).collect::<Vec<_>>(),
                    ) {
                        log::warn!("{warning}");
                    }
                    let m = params.config.cod_length;
                    build_index(&docs, &encoder, m, m, &hash)?
                }
                (None, None) => {
                    return Err(Error::Input("eval needs either --index or --corpus".into()))
                }
            };

            let depth = run_cfg.depth.max(run_cfg.ndcg_k);
            let run = analysis::retrieval_run(
                &idx,
                &encoder,
                &query_list,
                depth,
                run_cfg.instruction.as_deref(),
            )?;
            let gain = if run_cfg.exponential_gain {
                Gain::Exponential
            } else {
                Gain::Linear
            };
            let report = ndcg_at_k(&run, &judgments, run_cfg.ndcg_k, gain)?;
            std::fs::write(&run_out, run_to_string(&run, &tag))?;
            std::fs::write(&metrics_out, metrics_to_csv(&report))?;
            println!(
                "ndcg@{} mean {:.4} over {} queries; run {}; metrics {}",
                report.k,
                report.mean,
                report.evaluated,
                run_out.display(),
                metrics_out.display()
            );
            Ok(())
        }

        Command::Analyze {
            checkpoint,
            vocab,
            corpus,
            queries,
            qrels,
            out_dir,
            sample_limit,
            sample_seed,
            adjacent_steps,
            instruction,
        } => {
            let mut run_cfg = cfg;
            over(&mut run_cfg.sample_limit, sample_limit);
            if sample_seed.is_some() {
                run_cfg.sample_seed = sample_seed;
            }
            over(&mut run_cfg.adjacent_steps, adjacent_steps);
            if instruction.is_some() {
                run_cfg.instruction = instruction;
            }

            let (params, vocabulary, _, _) = load_model(&checkpoint, &vocab)?;
            let encoder = Encoder::new(&params, &vocabulary)?;
            let docs = load_corpus(&corpus)?;
            let query_list = load_queries(&queries)?;
            let judgments = load_qrels(&qrels)?;
            let m = params.config.cod_length;

            std::fs::create_dir_all(&out_dir)?;
            let curve = analysis::stepwise_eval(
                &docs,
                &query_list,
                &judgments,
                &encoder,
                m,
                run_cfg.ndcg_k,
                run_cfg.instruction.as_deref(),
            )?;
            std::fs::write(
                out_dir.join("step_curve.csv"),
                analysis::step_curve_to_csv(&curve),
            )?;

            let sample = analysis::select_sample(&docs, run_cfg.sample_limit, run_cfg.sample_seed);
            let s = run_cfg.adjacent_steps.min(m);
            let matrix = analysis::adjacent_similarity(&sample, &encoder, s)?;
            std::fs::write(
                out_dir.join("adjacent_sim.csv"),
                analysis::similarity_matrix_to_csv(&matrix),
            )?;

            if m >= 2 {
                let profile = analysis::final_similarity_profile(&sample, &encoder, m)?;
                std::fs::write(
                    out_dir.join("final_profile.csv"),
                    analysis::final_profile_to_csv(&profile),
                )?;
            } else {
                log::warn!("skipping final_profile.csv: needs m >= 2, model has m = {m}");
            }
            println!("wrote analysis CSVs to {}", out_dir.display());
            Ok(())
        }

        Command::Gradcheck {
            seeds,
            epsilon,
            tolerance,
        } => {
            let seed_list: Vec<u64> = (1..=seeds).collect();
            let mut reports = tensor::gradcheck::standard_op_suite(&seed_list, epsilon, tolerance)?;
            reports.extend(loss::loss_grad_check_suite(&seed_list, epsilon, tolerance)?);
            let mut failures = 0;
            for report in &reports {
                println!("{report}");
                if !report.passed {
                    failures += 1;
                }
            }
            println!("{} checks, {} failures", reports.len(), failures);
            if failures > 0 {
                return Err(Error::Numerical(format!(
                    "{failures} gradient checks failed"
                )));
            }
            Ok(())
        }
    }
}

/// Pull plain text out of any supported input file: raw text, corpus or
/// query jsonl, or training jsonl.
fn extract_texts(path: &Path) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path)?;
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if !is_jsonl {
        return Ok(vec![content]);
    }
    let mut texts = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::format(path, lineno + 1, format!("bad jsonl: {e}")))?;
        for key in ["title", "text", "query", "positive", "negative", "instruction"] {
            if let Some(s) = value.get(key).and_then(|v| v.as_str()) {
                if !s.is_empty() {
                    texts.push(s.to_string());
                }
            }
        }
    }
    Ok(texts)
}
