//! Sentences, vocabularies and corpora.
//!
//! Tokenization is whitespace word-level: punctuation stays attached unless
//! the text already separates it (the synthetic grammar always does).

mod grammar;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use grammar::{generate_synthetic_corpus, GrammarConfig, SynonymTable, SyntheticSentence, TopicGrammar};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Ordered token alphabet with the four reserved ids in front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("reserved tokens are valid")
    }

    /// Builds a vocabulary from non-reserved tokens, in id order starting at 4.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = BTreeMap::new();
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK` when absent.
    pub fn lookup(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes one token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..4] != RESERVED {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with {:?}",
                path.display(),
                RESERVED
            )));
        }
        Self::from_tokens(lines[4..].iter().copied())
    }
}

/// Counts whitespace tokens and keeps the most frequent ones.
///
/// Ranking is by frequency (descending) then token (ascending), so the result
/// does not depend on the order of `sentences`.
pub fn build_vocab<S: AsRef<str>>(sentences: &[S], max_size: usize, min_freq: usize) -> Result<Vocab> {
    if max_size < 5 {
        return Err(Error::Config(format!("vocabulary max_size must be >= 5, got {max_size}")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for tok in s.as_ref().split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(tok, n)| *n >= min_freq.max(1) && !RESERVED.contains(tok))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}

/// A tokenized sentence; `token_ids` always ends with exactly one `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub text: String,
    token_ids: Vec<TokenId>,
}

impl Sentence {
    /// The empty sentence, `[EOS]`.
    pub fn empty() -> Self {
        Self {
            text: String::new(),
            token_ids: vec![EOS],
        }
    }

    /// Validates `ids` (EOS-terminated, no reserved ids inside) and renders its text.
    pub fn from_ids(vocab: &Vocab, ids: Vec<TokenId>) -> Result<Self> {
        match ids.split_last() {
            Some((&EOS, body)) => {
                if let Some(bad) = body.iter().find(|&&t| t == PAD || t == BOS || t == EOS) {
                    return Err(Error::Data(format!("reserved id {bad} inside sentence body")));
                }
            }
            _ => return Err(Error::Data("sentence must end with EOS".into())),
        }
        let text = decode_tokens(vocab, &ids)?;
        Ok(Self { text, token_ids: ids })
    }

    /// Assumes `ids` is valid and `text` has one word per body token.
    pub(crate) fn from_parts(text: String, ids: Vec<TokenId>) -> Self {
        debug_assert_eq!(ids.last(), Some(&EOS));
        Self { text, token_ids: ids }
    }

    /// Builds from body tokens (no EOS), appending EOS.
    pub fn from_body(vocab: &Vocab, body: &[TokenId]) -> Result<Self> {
        let mut ids = body.to_vec();
        ids.push(EOS);
        Self::from_ids(vocab, ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    /// Tokens before the terminating EOS.
    pub fn body(&self) -> &[TokenId] {
        &self.token_ids[..self.token_ids.len() - 1]
    }

    /// Length including EOS.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.len() == 1
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Splits raw text on `.`, `!` or `?` followed by whitespace or end of input.
pub fn split_sentences(raw_text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = raw_text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &raw_text[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &raw_text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let t = piece.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Whitespace-tokenizes `text`, maps unknown words to `UNK`, truncates to
/// `max_len - 1` tokens and appends `EOS`.
pub fn encode_sentence(vocab: &Vocab, text: &str, max_len: usize) -> Sentence {
    let keep = max_len.max(1) - 1;
    let mut ids: Vec<TokenId> = text.split_whitespace().take(keep).map(|t| vocab.lookup(t)).collect();
    ids.push(EOS);
    let text = text.split_whitespace().take(keep).collect::<Vec<_>>().join(" ");
    Sentence { text, token_ids: ids }
}

/// Renders ids as text: PAD and BOS are skipped, decoding stops at the first EOS.
pub fn decode_tokens(vocab: &Vocab, ids: &[TokenId]) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Data(format!("token id {id} out of range for vocabulary of {}", vocab.len())))?;
        match id {
            PAD | BOS => continue,
            EOS => break,
            _ => words.push(tok),
        }
    }
    Ok(words.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct SentenceDataset {
    pub vocab: Vocab,
    pub sentences: Vec<Sentence>,
    pub split: Split,
}

impl SentenceDataset {
    pub fn encode<S: AsRef<str>>(vocab: &Vocab, texts: &[S], max_len: usize, split: Split) -> Self {
        let sentences = texts.iter().map(|t| encode_sentence(vocab, t.as_ref(), max_len)).collect();
        Self {
            vocab: vocab.clone(),
            sentences,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn mean_len(&self) -> f64 {
        if self.sentences.is_empty() {
            return 0.0;
        }
        self.sentences.iter().map(|s| s.len() as f64).sum::<f64>() / self.sentences.len() as f64
    }
}

fn text_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Deterministic train/eval split by content hash.
///
/// Returns `(train, eval)` with exactly `round(n * eval_fraction)` eval items
/// whenever duplicate groups allow it. Identical texts always land on the same
/// side, so the splits are disjoint by text.
pub fn split_train_eval(texts: &[String], eval_fraction: f64) -> (Vec<String>, Vec<String>) {
    let target = (texts.len() as f64 * eval_fraction).round() as usize;
    let mut groups: BTreeMap<([u8; 32], &str), Vec<usize>> = BTreeMap::new();
    for (i, t) in texts.iter().enumerate() {
        groups.entry((text_hash(t), t.as_str())).or_default().push(i);
    }
    let mut in_eval = vec![false; texts.len()];
    let mut taken = 0;
    for idx in groups.values() {
        if taken == target {
            break;
        }
        if taken + idx.len() <= target {
            for &i in idx {
                in_eval[i] = true;
            }
            taken += idx.len();
        }
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (t, e) in texts.iter().zip(in_eval) {
        if e {
            eval.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, eval)
}

/// Reads a corpus file: one sentence per line, blank lines ignored.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_corpus<S: AsRef<str>>(path: &Path, sentences: &[S]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(s.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Number of distinct strings.
pub fn unique_count<S: AsRef<str>>(texts: &[S]) -> usize {
    texts.iter().map(AsRef::as_ref).collect::<HashSet<_>>().len()
}
