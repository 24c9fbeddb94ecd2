//! Property tests for the spec-level invariants: softmax normalization and
//! shift invariance, cosine symmetry and bounds, matmul associativity,
//! tokenizer determinism and reserved-token hygiene, and run-file
//! round-tripping.

use proptest::prelude::*;

use cod_retriever::eval::{read_run, write_run, RunFile};
use cod_retriever::tensor::{cosine_similarity, softmax_slice, Tape, Tensor};
use cod_retriever::vocab::Vocabulary;

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_shift_invariant(x in finite_vec(1..12), shift in -50.0..50.0f64) {
        let s = softmax_slice(&x);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.iter().all(|&p| p > 0.0));

        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let s2 = softmax_slice(&shifted);
        for (a, b) in s.iter().zip(&s2) {
            prop_assert!((a - b).abs() < 1e-9, "shift changed softmax: {a} vs {b}");
        }
    }

    #[test]
    fn cosine_symmetric_and_bounded(u in finite_vec(2..10), scale in 0.5..2.0f64) {
        let v: Vec<f64> = u.iter().rev().map(|x| x * scale + 0.125).collect();
        prop_assume!(cod_retriever::tensor::norm(&u) > 1e-6);
        prop_assume!(cod_retriever::tensor::norm(&v) > 1e-6);
        let uv = cosine_similarity(&u, &v).unwrap();
        let vu = cosine_similarity(&v, &u).unwrap();
        prop_assert_eq!(uv, vu);
        prop_assert!(uv.abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn matmul_is_associative(
        a in prop::collection::vec(-2.0..2.0f64, 6),
        b in prop::collection::vec(-2.0..2.0f64, 6),
        c in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        // (AB)C == A(BC) for a 2x3 * 3x2 * 2x3 chain.
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, a).unwrap());
        let b = tape.leaf(&Tensor::matrix(3, 2, b).unwrap());
        let c = tape.leaf(&Tensor::matrix(2, 3, c).unwrap());
        let ab = tape.matmul(a, b).unwrap();
        let ab_c = tape.matmul(ab, c).unwrap();
        let bc = tape.matmul(b, c).unwrap();
        let a_bc = tape.matmul(a, bc).unwrap();
        for (x, y) in tape.value(ab_c).iter().zip(tape.value(a_bc)) {
            prop_assert!((x - y).abs() < 1e-8, "associativity violated: {x} vs {y}");
        }
    }

    #[test]
    fn tokenizer_is_deterministic_and_never_leaks_reserved_ids(text in ".{0,200}") {
        let vocab = Vocabulary::build(["alpha beta gamma delta words here"], 64, 8).unwrap();
        let a = vocab.encode(&text, 64);
        let b = vocab.encode(&text, 64);
        prop_assert_eq!(&a, &b);
        let reserved = Vocabulary::reserved_count(8);
        for id in &a.ids {
            prop_assert!(
                *id == vocab.unk_id() || *id >= reserved,
                "reserved id {} leaked for input {:?}",
                id,
                text
            );
        }
    }

    #[test]
    fn encode_decode_roundtrips_token_for_token(words in prop::collection::vec("[a-z]{1,6}", 1..10)) {
        let corpus = words.join(" ");
        let vocab = Vocabulary::build([corpus.clone()], 256, 4).unwrap();
        let first = vocab.encode(&corpus, 128);
        let second = vocab.encode(&vocab.decode(&first.ids), 128);
        prop_assert_eq!(first.ids, second.ids);
    }

    #[test]
    fn run_file_roundtrips(
        scores in prop::collection::vec(-1.0..1.0f64, 1..8),
        tag in "[a-z]{1,8}",
    ) {
        let mut run = RunFile::default();
        let ranked: Vec<(String, f64)> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("d{i:02}"), s))
            .collect();
        run.insert("q1", ranked);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        write_run(&run, &path, &tag).unwrap();
        let back = read_run(&path).unwrap();
        prop_assert_eq!(run, back);
    }
}
