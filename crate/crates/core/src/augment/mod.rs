//! Training-pair construction (identity, word dropout, round trip and the
//! combination) and sentence-BLEU diversity profiling of rephrasings.

mod bleu;
mod paraphrase;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use bleu::sentence_bleu;
pub use paraphrase::Paraphraser;

use crate::corpus::{encode_sentence, Sentence, SentenceDataset, TokenId, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::TokenPair;
use crate::mt_client::{Direction, TranslationClient};
use crate::rng::{Rng, SeedTree};

/// Drops each word independently with probability `p`; EOS always survives.
pub fn word_dropout(s: &Sentence, p: f64, rng: &mut Rng) -> Sentence {
    let words: Vec<&str> = s.text.split_whitespace().collect();
    debug_assert_eq!(words.len(), s.body().len());
    let mut ids = Vec::with_capacity(s.len());
    let mut kept = Vec::with_capacity(words.len());
    for (&id, w) in s.body().iter().zip(&words) {
        if rng.random::<f64>() >= p {
            ids.push(id);
            kept.push(*w);
        }
    }
    ids.push(EOS);
    Sentence::from_parts(kept.join(" "), ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairMode {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "denoise")]
    Denoise,
    #[serde(rename = "rtt")]
    Rtt,
    #[serde(rename = "rtt+denoise", alias = "rtt_denoise")]
    RttDenoise,
}

impl PairMode {
    pub const ALL: [PairMode; 4] = [PairMode::Identity, PairMode::Denoise, PairMode::Rtt, PairMode::RttDenoise];

    pub fn uses_rtt(self) -> bool {
        matches!(self, PairMode::Rtt | PairMode::RttDenoise)
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, PairMode::Denoise | PairMode::RttDenoise)
    }

    /// File-name friendly form (`rtt_denoise` rather than `rtt+denoise`).
    pub fn slug(self) -> &'static str {
        match self {
            PairMode::Identity => "identity",
            PairMode::Denoise => "denoise",
            PairMode::Rtt => "rtt",
            PairMode::RttDenoise => "rtt_denoise",
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::RttDenoise => "rtt+denoise",
            other => other.slug(),
        })
    }
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PairMode::Identity),
            "denoise" => Ok(PairMode::Denoise),
            "rtt" => Ok(PairMode::Rtt),
            "rtt+denoise" | "rtt_denoise" => Ok(PairMode::RttDenoise),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected identity, denoise, rtt or rtt_denoise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub dropout_p: f64,
    pub temperature: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            dropout_p: 0.2,
            temperature: 1.0,
        }
    }
}

impl PairParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout p must be in [0, 1], got {}", self.dropout_p)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Where round-trip rephrasings come from.
#[derive(Debug, Clone, Copy)]
pub enum RoundTrip<'a> {
    /// The grammar-aware paraphraser at the configured temperature.
    Synthetic(&'a Paraphraser),
    /// Precomputed rephrasings aligned with the dataset (e.g. from an MT service).
    Precomputed(&'a [Sentence]),
}

#[derive(Debug, Clone)]
pub struct PairDataset {
    pub vocab: Vocab,
    /// `(input, target)`; targets are always the clean originals.
    pub pairs: Vec<(Sentence, Sentence)>,
    pub mode: PairMode,
    pub params: PairParams,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn token_pairs(&self) -> Vec<TokenPair<'_>> {
        self.pairs
            .iter()
            .map(|(i, t)| TokenPair {
                input: i.ids(),
                target: t.ids(),
            })
            .collect()
    }

    pub fn id_pairs(&self) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        self.pairs.iter().map(|(i, t)| (i.ids().to_vec(), t.ids().to_vec())).collect()
    }

    /// Fraction of pairs whose input differs from its target.
    pub fn changed_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|(i, t)| i.ids() != t.ids()).count() as f64 / self.pairs.len() as f64
    }
}

/// One pair per sentence. Sentence `i` draws from its own generator derived
/// from `(seed, i)`; round trip is applied before dropout in the combined mode.
pub fn build_pair_dataset(
    ds: &SentenceDataset,
    mode: PairMode,
    params: PairParams,
    round_trip: Option<RoundTrip<'_>>,
    seed: u64,
) -> Result<PairDataset> {
    params.validate()?;
    if mode.uses_rtt() {
        match round_trip {
            None => return Err(Error::Config(format!("mode {mode} needs a round-trip source"))),
            Some(RoundTrip::Precomputed(r)) if r.len() != ds.len() => {
                return Err(Error::Data(format!(
                    "{} precomputed rephrasings for {} sentences",
                    r.len(),
                    ds.len()
                )))
            }
            _ => {}
        }
    }
    let tree = SeedTree::new(seed).child("pairs");
    let pairs = ds
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = tree.index(i as u64).rng();
            let mut input = s.clone();
            if mode.uses_rtt() {
                input = match round_trip.expect("checked above") {
                    RoundTrip::Synthetic(p) => p.paraphrase(&ds.vocab, s, params.temperature, &mut rng),
                    RoundTrip::Precomputed(r) => r[i].clone(),
                };
            }
            if mode.uses_dropout() {
                input = word_dropout(&input, params.dropout_p, &mut rng);
            }
            (input, s.clone())
        })
        .collect();
    Ok(PairDataset {
        vocab: ds.vocab.clone(),
        pairs,
        mode,
        params,
    })
}

fn check_tsv_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Data(format!("{what} contains a tab or newline: {s:?}")));
    }
    Ok(())
}

/// Writes `input<TAB>target` lines.
pub fn write_pairs(path: &Path, pairs: &PairDataset) -> Result<()> {
    let mut out = String::new();
    for (i, t) in &pairs.pairs {
        check_tsv_field(&i.text, "input")?;
        check_tsv_field(&t.text, "target")?;
        out.push_str(&i.text);
        out.push('\t');
        out.push_str(&t.text);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a pair file and encodes both columns.
pub fn read_pairs(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<(Sentence, Sentence)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let (a, b) = line
                .split_once('\t')
                .filter(|(_, b)| !b.contains('\t'))
                .ok_or_else(|| Error::Format(format!("{}:{}: expected input<TAB>target", path.display(), n + 1)))?;
            Ok((encode_sentence(vocab, a, max_len), encode_sentence(vocab, b, max_len)))
        })
        .collect()
}

/// A source sentence, its pivot translation and the translation back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseRecord {
    pub source: String,
    pub pivot: String,
    pub round_trip: String,
    /// `sentence_bleu(round_trip, source)`
    pub bleu: f64,
}

impl ParaphraseRecord {
    pub fn new(source: String, pivot: String, round_trip: String) -> Self {
        let bleu = sentence_bleu(&round_trip, &source);
        Self {
            source,
            pivot,
            round_trip,
            bleu,
        }
    }
}

/// Round-trips `sources` through the client (forward, then backward), in
/// chunks of the client's batch size. A failing chunk is reported with the
/// index of its first sentence.
pub fn rtt_via_mt(sources: &[String], client: &TranslationClient) -> Result<Vec<ParaphraseRecord>> {
    let mut out = Vec::with_capacity(sources.len());
    let bs = client.config().batch_size;
    for (c, chunk) in sources.chunks(bs).enumerate() {
        let wrap = |e: Error| Error::Augmentation {
            index: c * bs,
            source: Box::new(e),
        };
        let pivots = client.translate_batch(chunk, Direction::Forward).map_err(wrap)?;
        let back = client.translate_batch(&pivots, Direction::Backward).map_err(wrap)?;
        out.extend(
            chunk
                .iter()
                .zip(pivots)
                .zip(back)
                .map(|((s, p), b)| ParaphraseRecord::new(s.clone(), p, b)),
        );
    }
    Ok(out)
}

/// Synthetic stand-in for [`rtt_via_mt`]: the pivot column holds the paraphrase.
pub fn rtt_via_paraphraser(
    sources: &[String],
    paraphraser: &Paraphraser,
    temperature: f64,
    seed: u64,
) -> Vec<ParaphraseRecord> {
    let tree = SeedTree::new(seed).child("paraphrase-records");
    sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rt = paraphraser.paraphrase_text(s, temperature, &mut tree.index(i as u64).rng());
            ParaphraseRecord::new(s.clone(), rt.clone(), rt)
        })
        .collect()
}

/// TSV `source<TAB>pivot<TAB>round_trip<TAB>bleu`, BLEU at 4 decimals.
pub fn write_records(path: &Path, records: &[ParaphraseRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        for (f, what) in [(&r.source, "source"), (&r.pivot, "pivot"), (&r.round_trip, "round trip")] {
            check_tsv_field(f, what)?;
        }
        out.push_str(&format!("{}\t{}\t{}\t{:.4}\n", r.source, r.pivot, r.round_trip, r.bleu));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ParaphraseRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("{}:{}: expected 4 tab-separated fields", path.display(), n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let bleu = f[3].parse::<f64>().map_err(|_| bad())?;
            Ok(ParaphraseRecord {
                source: f[0].into(),
                pivot: f[1].into(),
                round_trip: f[2].into(),
                bleu,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuHistogram {
    /// `bins + 1` equal-width edges over `[0, 100]`.
    pub edges: Vec<f64>,
    /// Counts per bin; 100 falls in the last bin.
    pub counts: Vec<u64>,
    pub exact_100: u64,
    pub total: u64,
}

impl BleuHistogram {
    pub fn exact_100_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.exact_100 as f64 / self.total as f64
        }
    }
}

pub fn bleu_histogram(records: &[ParaphraseRecord], bins: usize) -> Result<BleuHistogram> {
    if bins < 2 {
        return Err(Error::Config(format!("bins must be >= 2, got {bins}")));
    }
    let width = 100.0 / bins as f64;
    let mut counts = vec![0u64; bins];
    let mut exact_100 = 0;
    for r in records {
        let b = ((r.bleu / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
        if r.bleu >= 100.0 {
            exact_100 += 1;
        }
    }
    Ok(BleuHistogram {
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        counts,
        exact_100,
        total: records.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic_corpus, GrammarConfig, Split};

    fn vocab_and_sentence() -> (Vocab, Sentence) {
        let text = "i am going to the beach .";
        let v = build_vocab(&[text], 64, 1).unwrap();
        let s = encode_sentence(&v, text, 24);
        (v, s)
    }

    #[test]
    fn dropout_extremes_and_subsequence() {
        let (_, s) = vocab_and_sentence();
        let mut rng = SeedTree::new(0).rng();
        assert_eq!(word_dropout(&s, 0.0, &mut rng), s);
        assert_eq!(word_dropout(&s, 1.0, &mut rng), Sentence::empty());
        for seed in 0..50 {
            let d = word_dropout(&s, 0.2, &mut SeedTree::new(seed).rng());
            let mut it = s.ids().iter();
            assert!(d.ids().iter().all(|t| it.any(|u| u == t)));
            assert_eq!(d.text.split_whitespace().count(), d.body().len());
        }
    }

    #[test]
    fn dropout_retention_rate() {
        let (_, s) = vocab_and_sentence();
        let (n, l, p) = (100_000u64, s.body().len() as f64, 0.2);
        let tree = SeedTree::new(1);
        let kept: usize = (0..n).map(|i| word_dropout(&s, p, &mut tree.index(i).rng()).body().len()).sum();
        let mean = kept as f64 / n as f64;
        let sigma = (l * p * (1.0 - p) / n as f64).sqrt();
        assert!((mean - (1.0 - p) * l).abs() < 4.0 * sigma, "mean {mean}");
    }

    fn dataset(n: usize) -> (GrammarConfig, SentenceDataset) {
        let g = GrammarConfig::default();
        let texts: Vec<String> = generate_synthetic_corpus(5, n, &g).unwrap().into_iter().map(|s| s.text).collect();
        let v = build_vocab(&texts, 512, 1).unwrap();
        (g, SentenceDataset::encode(&v, &texts, 24, Split::Train))
    }

    #[test]
    fn pair_modes() {
        let (g, ds) = dataset(10_000);
        let para = Paraphraser::new(&g, 24);
        let rt = Some(RoundTrip::Synthetic(&para));
        let p = PairParams::default();
        let id = build_pair_dataset(&ds, PairMode::Identity, p, None, 1).unwrap();
        assert!(id.pairs.iter().all(|(a, b)| a == b));

        let dn = build_pair_dataset(&ds, PairMode::Denoise, p, None, 1).unwrap();
        let mean = |f: &dyn Fn(&(Sentence, Sentence)) -> usize| {
            dn.pairs.iter().map(f).sum::<usize>() as f64 / dn.len() as f64
        };
        let ratio = mean(&|(a, _)| a.body().len()) / mean(&|(_, b)| b.body().len());
        assert!((ratio - 0.8).abs() < 0.8 * 0.02, "ratio {ratio}");
        assert!(dn.pairs.iter().all(|(a, b)| {
            let mut it = b.ids().iter();
            a.ids().iter().all(|t| it.any(|u| u == t))
        }));

        let rtt = build_pair_dataset(&ds, PairMode::Rtt, p, rt, 1).unwrap();
        let both = build_pair_dataset(&ds, PairMode::RttDenoise, p, rt, 1).unwrap();
        assert!(both.changed_fraction() >= rtt.changed_fraction());
        assert!(rtt.pairs.iter().zip(&ds.sentences).all(|((_, t), s)| t == s));
        assert!(build_pair_dataset(&ds, PairMode::Rtt, p, None, 1).is_err());

        let again = build_pair_dataset(&ds, PairMode::RttDenoise, p, rt, 1).unwrap();
        assert_eq!(again.pairs, both.pairs);
    }

    #[test]
    fn pair_file_round_trip() {
        let (_, ds) = dataset(50);
        let pairs = build_pair_dataset(&ds, PairMode::Denoise, PairParams::default(), None, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_pairs(&path, &pairs).unwrap();
        let back = read_pairs(&path, &ds.vocab, 24).unwrap();
        assert_eq!(back, pairs.pairs);
    }

    #[test]
    fn mode_names() {
        for m in PairMode::ALL {
            assert_eq!(m.to_string().parse::<PairMode>().unwrap(), m);
            assert_eq!(m.slug().parse::<PairMode>().unwrap(), m);
        }
        assert!("bogus".parse::<PairMode>().is_err());
    }

    #[test]
    fn histogram() {
        let rec = |b: f64| ParaphraseRecord {
            source: "a".into(),
            pivot: "b".into(),
            round_trip: "c".into(),
            bleu: b,
        };
        let all = vec![rec(100.0); 5];
        let h = bleu_histogram(&all, 10).unwrap();
        assert_eq!(h.counts[9], 5);
        assert_eq!(h.exact_100, 5);
        let empty = bleu_histogram(&[], 4).unwrap();
        assert_eq!(empty.counts, vec![0; 4]);
        assert_eq!(empty.exact_100, 0);
        assert!(bleu_histogram(&all, 1).is_err());
        let h = bleu_histogram(&[rec(0.0), rec(49.9), rec(50.0)], 2).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
    }

    #[test]
    fn records_round_trip_with_four_decimals() {
        let r = ParaphraseRecord::new("the cat sat down".into(), "x".into(), "the cat sat".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.tsv");
        write_records(&path, &[r.clone()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("the cat sat down\tx\tthe cat sat\t{:.4}\n", r.bleu));
        let back = read_records(&path).unwrap();
        assert!((back[0].bleu - r.bleu).abs() < 5e-5);
    }

    #[test]
    fn temperature_lowers_exact_match_rate() {
        let g = GrammarConfig::default();
        let texts: Vec<String> = generate_synthetic_corpus(9, 1000, &g).unwrap().into_iter().map(|s| s.text).collect();
        let p = Paraphraser::new(&g, 24);
        let lo = bleu_histogram(&rtt_via_paraphraser(&texts, &p, 0.2, 4), 10).unwrap();
        let hi = bleu_histogram(&rtt_via_paraphraser(&texts, &p, 1.0, 4), 10).unwrap();
        assert!(hi.exact_100_fraction() < lo.exact_100_fraction());
    }
}
