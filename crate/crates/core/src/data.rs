//! Synthetic parallel corpora with known gold alignments.
//!
//! Tasks are built from a bijective source→target lexicon plus a
//! deterministic reordering rule, so every pair carries an exact token
//! alignment — the ground truth that attribution maps get scored against.
//! Tokenization is plain whitespace; the four specials own the low ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token table with the specials at ids 0..4.  Lookup is a linear scan —
/// vocabularies here are ≤ a few hundred entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from regular words (specials are prepended automatically).
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Encode words, rejecting anything unknown.
    pub fn encode_strict(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown token {w:?}")))
            })
            .collect()
    }

    /// Encode words, mapping unknowns to `UNK`.
    pub fn encode_lossy(&self, words: &[String]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.id_of(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_string()).collect()
}

/// How target word order relates to source word order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    Identity,
    Reverse,
    /// Swap positions (0,1), (2,3), ...; a trailing odd position stays put.
    AdjacentSwap,
}

impl Reorder {
    /// `perm[k]` = which source position target position `k` translates.
    pub fn permutation(self, len: usize) -> Vec<usize> {
        match self {
            Reorder::Identity => (0..len).collect(),
            Reorder::Reverse => (0..len).rev().collect(),
            Reorder::AdjacentSwap => {
                let mut p: Vec<usize> = (0..len).collect();
                let mut i = 0;
                while i + 1 < len {
                    p.swap(i, i + 1);
                    i += 2;
                }
                p
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Number of regular source words ("s0", "s1", ...).
    pub vocab_words: usize,
    /// Sentence length bounds in words (specials excluded).
    pub min_len: usize,
    pub max_len: usize,
    pub reorder: Reorder,
    pub pairs: usize,
    pub seed: u64,
}

/// One parallel sentence pair.  `alignment[j][k] = 1` means source word `j`
/// translates target word `k`; it covers the words only (no specials).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub alignment: Option<Vec<Vec<u8>>>,
}

impl Example {
    /// Gold alignment over words as a `[j, k]` 0/1 tensor.
    pub fn alignment_matrix(&self) -> Option<Tensor> {
        let rows = self.alignment.as_ref()?;
        let j = rows.len();
        let k = rows.first().map_or(0, |r| r.len());
        let mut t = Tensor::zeros(vec![j, k]);
        for (ji, row) in rows.iter().enumerate() {
            for (ki, &v) in row.iter().enumerate() {
                t.set2(ji, ki, f64::from(v));
            }
        }
        Some(t)
    }

    /// Gold alignment extended to model token sequences: one extra row and
    /// column for the sentence-final marker, aligned to each other.
    pub fn alignment_with_eos(&self) -> Option<Tensor> {
        let words = self.alignment_matrix()?;
        let (j, k) = (words.rows(), words.cols());
        let mut t = Tensor::zeros(vec![j + 1, k + 1]);
        for ji in 0..j {
            for ki in 0..k {
                t.set2(ji, ki, words.get2(ji, ki));
            }
        }
        t.set2(j, k, 1.0);
        Some(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Model-side id sequences: source words + EOS.
    pub fn encode_source(&self, ex: &Example) -> Result<Vec<usize>> {
        let mut ids = self.src_vocab.encode_strict(&ex.source)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Model-side id sequences: target words + EOS.
    pub fn encode_target(&self, ex: &Example) -> Result<Vec<usize>> {
        let mut ids = self.tgt_vocab.encode_strict(&ex.target)?;
        ids.push(EOS);
        Ok(ids)
    }
}

/// Generate a synthetic corpus: uniform random word sequences, bijective
/// lexicon, deterministic reorder, exact alignments.
pub fn generate_task(spec: &TaskSpec) -> Result<Corpus> {
    if spec.vocab_words == 0 {
        return Err(Error::InvalidInput("task needs at least one word".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidInput(format!(
            "bad length bounds [{}, {}]",
            spec.min_len, spec.max_len
        )));
    }
    let mut rng = Rng::new(spec.seed);
    // Bijective lexicon: source word i ↔ target word lex[i], a seeded
    // permutation so ids don't trivially line up across vocabularies.
    let mut lex: Vec<usize> = (0..spec.vocab_words).collect();
    rng.split("lexicon").shuffle(&mut lex);

    let src_words: Vec<String> = (0..spec.vocab_words).map(|i| format!("s{i}")).collect();
    let tgt_words: Vec<String> = (0..spec.vocab_words).map(|i| format!("t{i}")).collect();
    let src_vocab = Vocab::new(src_words.clone());
    let tgt_vocab = Vocab::new(tgt_words.clone());

    let mut sent_rng = rng.split("sentences");
    let mut examples = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let len = spec.min_len + sent_rng.below(spec.max_len - spec.min_len + 1);
        let src_idx: Vec<usize> = (0..len).map(|_| sent_rng.below(spec.vocab_words)).collect();
        let perm = spec.reorder.permutation(len);
        let source: Vec<String> = src_idx.iter().map(|&i| src_words[i].clone()).collect();
        let target: Vec<String> = perm
            .iter()
            .map(|&j| tgt_words[lex[src_idx[j]]].clone())
            .collect();
        // alignment[j][k] = 1 iff target position k translates source j.
        let mut alignment = vec![vec![0u8; len]; len];
        for (k, &j) in perm.iter().enumerate() {
            alignment[j][k] = 1;
        }
        examples.push(Example {
            source,
            target,
            alignment: Some(alignment),
        });
    }
    Ok(Corpus {
        src_vocab,
        tgt_vocab,
        examples,
    })
}

/// Deterministic train/valid/test split of `0..n` as index lists (in that
/// order).  The assignment depends only on `n`, the fractions, and the
/// seed, so any stage can re-derive the same split.
pub fn split_indices(
    n: usize,
    valid_frac: f64,
    test_frac: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).split("corpus-split").shuffle(&mut idx);
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_valid = ((n as f64) * valid_frac).round() as usize;
    let test = idx[..n_test].to_vec();
    let valid = idx[n_test..n_test + n_valid].to_vec();
    let train = idx[n_test + n_valid..].to_vec();
    (train, valid, test)
}

/// Deterministically split a corpus into train/valid/test parts that share
/// the vocabularies.
pub fn split_corpus(corpus: &Corpus, valid_frac: f64, test_frac: f64, seed: u64) -> (Corpus, Corpus, Corpus) {
    let n = corpus.examples.len();
    let (train_i, valid_i, test_i) = split_indices(n, valid_frac, test_frac, seed);
    let take = |range: &[usize]| Corpus {
        src_vocab: corpus.src_vocab.clone(),
        tgt_vocab: corpus.tgt_vocab.clone(),
        examples: range.iter().map(|&i| corpus.examples[i].clone()).collect(),
    };
    (take(&train_i), take(&valid_i), take(&test_i))
}

/// Stable content fingerprint (hex sha-256 of the canonical JSON form).
pub fn fingerprint_json<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    // BTreeMap round-trip canonicalises object key order.
    let v: serde_json::Value = serde_json::to_value(value)?;
    let canon = canonicalise(&v);
    let bytes = serde_json::to_vec(&canon)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn canonicalise(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().map(|(k, val)| (k.clone(), canonicalise(val))).collect();
            serde_json::Value::Object(sorted.into_iter().collect())
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.iter().map(canonicalise).collect())
        }
        other => other.clone(),
    }
}
