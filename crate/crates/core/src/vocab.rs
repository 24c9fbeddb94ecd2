//! Deterministic word-level tokenizer and vocabulary.
//!
//! The vocabulary reserves the lowest ids, in order, for `<pad>`, `<unk>`,
//! `</s>`, and the deliberation prompt tokens `<t_1>..<t_m>`. User text is
//! lowercased and split on whitespace and punctuation boundaries, so the
//! reserved marker strings can never be produced by [`encode`] — the
//! splitter breaks them apart before lookup.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";

/// Token ids with a truncation marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Immutable token/id mapping with reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: BTreeMap<String, usize>,
    cod_length: usize,
}

impl Vocabulary {
    /// Number of reserved ids for a given deliberation length.
    pub fn reserved_count(cod_length: usize) -> usize {
        3 + cod_length
    }

    /// Build from a corpus of text. Keeps the `max_size - reserved` most
    /// frequent tokens; frequency ties break lexicographically.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>, max_size: usize, cod_length: usize) -> Result<Self> {
        if cod_length == 0 {
            return Err(Error::Input("cod_length must be at least 1".into()));
        }
        let reserved = Self::reserved_count(cod_length);
        if max_size <= reserved {
            return Err(Error::Input(format!(
                "max_size {max_size} leaves no room beyond the {reserved} reserved tokens"
            )));
        }

        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_text = false;
        for chunk in corpus {
            for token in split_tokens(chunk.as_ref()) {
                saw_text = true;
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if !saw_text {
            return Err(Error::Input("empty corpus".into()));
        }

        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        // Descending count; the BTreeMap already yields ties lexicographically.
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = reserved_tokens(cod_length);
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - reserved)
                .map(|(t, _)| t),
        );
        Self::from_tokens(tokens, cod_length)
    }

    fn from_tokens(tokens: Vec<String>, cod_length: usize) -> Result<Self> {
        let expected = reserved_tokens(cod_length);
        if tokens.len() < expected.len() || tokens[..expected.len()] != expected[..] {
            return Err(Error::Input(format!(
                "vocabulary must start with the reserved tokens {expected:?}"
            )));
        }
        let mut lookup = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), id).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            lookup,
            cod_length,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cod_length(&self) -> usize {
        self.cod_length
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    /// Id of deliberation token `<t_step>`; `step` is 1-based.
    pub fn cod_id(&self, step: usize) -> Result<usize> {
        if step == 0 || step > self.cod_length {
            return Err(Error::Input(format!(
                "deliberation step {step} outside 1..={}",
                self.cod_length
            )));
        }
        Ok(2 + step)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Tokenize `text`, mapping OOV to `<unk>` and truncating to `max_len`.
    /// Total on strings: empty input yields an empty sequence.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = Vec::new();
        let mut truncated = false;
        for token in split_tokens(text) {
            if ids.len() == max_len {
                truncated = true;
                break;
            }
            ids.push(*self.lookup.get(&token).unwrap_or(&self.unk_id()));
        }
        TokenSequence { ids, truncated }
    }

    /// Inverse of [`encode`] for display purposes: tokens joined by spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK));
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            let _ = writeln!(out, "{tok}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        // Infer the deliberation length from the reserved block.
        let mut cod_length = 0;
        while cod_length + 3 < tokens.len() && tokens[cod_length + 3] == format!("<t_{}>", cod_length + 1) {
            cod_length += 1;
        }
        if cod_length == 0 {
            return Err(Error::format(
                path,
                4,
                "expected deliberation tokens <t_1>.. after <pad>, <unk>, </s>",
            ));
        }
        Self::from_tokens(tokens, cod_length)
    }

    /// SHA-256 of the serialized form, used to tie checkpoints to the
    /// vocabulary they were trained with.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        hex_string(&digest)
    }
}

fn reserved_tokens(cod_length: usize) -> Vec<String> {
    let mut tokens = vec![PAD.to_string(), UNK.to_string(), EOS.to_string()];
    for i in 1..=cod_length {
        tokens.push(format!("<t_{i}>"));
    }
    tokens
}

/// Lowercase and split into alphanumeric runs and single punctuation marks.
fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocabulary {
        Vocabulary::build(["a b a c . a"], 40, 8).unwrap()
    }

    #[test]
    fn build_keeps_reserved_then_frequent() {
        let v = small_vocab();
        assert_eq!(v.token(0), Some(PAD));
        assert_eq!(v.token(1), Some(UNK));
        assert_eq!(v.token(2), Some(EOS));
        assert_eq!(v.token(3), Some("<t_1>"));
        assert_eq!(v.token(10), Some("<t_8>"));
        // "a" x3 outranks the rest; "." "b" "c" tie at 1 and sort lexicographically.
        assert_eq!(v.token(11), Some("a"));
        assert_eq!(v.token(12), Some("."));
        assert_eq!(v.token(13), Some("b"));
        assert_eq!(v.token(14), Some("c"));
    }

    #[test]
    fn build_is_deterministic() {
        let a = Vocabulary::build(["x y z y"], 30, 4).unwrap();
        let b = Vocabulary::build(["x y z y"], 30, 4).unwrap();
        assert_eq!(a.serialize(), b.serialize());
    }

    #[test]
    fn build_rejects_empty_and_tiny() {
        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 20, 8),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            Vocabulary::build([" \t\n"], 20, 8),
            Err(Error::Input(_))
        ));
        // 11 reserved tokens at m=8; max_size 3 cannot hold them.
        assert!(matches!(
            Vocabulary::build(["a"], 3, 8),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn encode_basics() {
        let v = small_vocab();
        assert_eq!(v.encode("", 16).ids, Vec::<usize>::new());
        let a = v.lookup["a"];
        assert_eq!(v.encode("a a a", 16).ids, vec![a, a, a]);
        assert_eq!(v.encode("a zzz", 16).ids, vec![a, v.unk_id()]);
    }

    #[test]
    fn encode_truncates_and_reports() {
        let v = small_vocab();
        let seq = v.encode("a a a a", 2);
        assert_eq!(seq.ids.len(), 2);
        assert!(seq.truncated);
        assert!(!v.encode("a", 2).truncated);
    }

    #[test]
    fn encode_never_emits_reserved_markers() {
        let v = small_vocab();
        let seq = v.encode("</s> <t_1> <pad> a", 32);
        for id in &seq.ids {
            // `<unk>` is the only reserved id that user text may map to.
            assert!(*id == v.unk_id() || *id > 10, "leaked reserved id {id}");
        }
    }

    #[test]
    fn whitespace_normalization() {
        let v = small_vocab();
        assert_eq!(v.encode("a b ", 16), v.encode("  a\tb", 16));
        assert_eq!(v.encode("A B", 16), v.encode("a b", 16));
    }

    #[test]
    fn roundtrip_in_vocab_text() {
        let v = small_vocab();
        let first = v.encode("a b . c", 32);
        let decoded = v.decode(&first.ids);
        let second = v.encode(&decoded, 32);
        assert_eq!(first.ids, second.ids);
    }

    #[test]
    fn save_load_roundtrip() {
        let v = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let reloaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, reloaded);
        assert_eq!(v.content_hash(), reloaded.content_hash());
        assert_eq!(reloaded.cod_length(), 8);
    }
}
