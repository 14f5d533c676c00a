//! Decoding from a vector: greedy, nucleus and beam search.
//!
//! Everything here is written against [`VecToText`], so the same code drives
//! the trained model and small hand-built decoders used as test oracles.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Context, EmbeddingVector, Model};
use crate::corpus::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Real;

/// An autoregressive distribution over token sequences conditioned on a vector.
///
/// Sequences always end with [`EOS`] and contain at most `max_len()` tokens.
pub trait VecToText {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Next-token log-probabilities after each prefix (each row has `vocab_size` entries).
    fn next_log_probs(&self, ctx: &EmbeddingVector, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;

    /// Teacher-forced `log p(s | ctx)` for each sentence.
    fn log_likelihoods(&self, ctx: &EmbeddingVector, sentences: &[&[TokenId]]) -> Result<Vec<f64>> {
        let prefixes: Vec<&[TokenId]> = sentences.iter().flat_map(|s| (0..s.len()).map(move |i| &s[..i])).collect();
        let rows = self.next_log_probs(ctx, &prefixes)?;
        let mut out = Vec::with_capacity(sentences.len());
        let mut r = 0;
        for s in sentences {
            let mut total = 0.0;
            for &t in s.iter() {
                total += rows[r][t as usize];
                r += 1;
            }
            out.push(total);
        }
        Ok(out)
    }
}

impl<T: Real> VecToText for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn next_log_probs(&self, ctx: &EmbeddingVector, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Model::next_log_probs(self, &Context::Embedding(ctx.clone()), prefixes)
    }

    fn log_likelihoods(&self, ctx: &EmbeddingVector, sentences: &[&[TokenId]]) -> Result<Vec<f64>> {
        let ctx = Context::Embedding(ctx.clone());
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(64) {
            out.extend(Model::log_likelihoods(self, &ctx, chunk)?.into_iter().map(|l| l.total));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Nucleus { p: f64 },
    Beam { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    /// Longest output, EOS included. Reaching it forces EOS.
    pub max_decode_len: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_decode_len: usize) -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_decode_len,
            seed: 0,
        }
    }

    pub fn nucleus(p: f64, max_decode_len: usize, seed: u64) -> Self {
        Self {
            strategy: DecodeStrategy::Nucleus { p },
            max_decode_len,
            seed,
        }
    }

    pub fn beam(width: usize, max_decode_len: usize) -> Self {
        Self {
            strategy: DecodeStrategy::Beam { width },
            max_decode_len,
            seed: 0,
        }
    }

    pub fn validate(&self, model_max_len: usize) -> Result<()> {
        match self.strategy {
            DecodeStrategy::Nucleus { p } if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::Config(format!("nucleus p must be in (0, 1], got {p}")));
            }
            DecodeStrategy::Beam { width: 0 } => return Err(Error::Config("beam width must be >= 1".into())),
            _ => {}
        }
        if self.max_decode_len == 0 || self.max_decode_len > model_max_len {
            return Err(Error::Config(format!(
                "max_decode_len must be in [1, {model_max_len}], got {}",
                self.max_decode_len
            )));
        }
        Ok(())
    }
}

/// A decoded sequence (ending with EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<TokenId>,
    /// `log p(tokens | ctx)` under the model; equals the teacher-forced likelihood.
    pub log_prob: f64,
    /// Log-probability of the path under the (possibly truncated) sampling rule.
    pub path_log_prob: f64,
}

/// Indices of the nucleus: the smallest set of most probable tokens whose
/// mass reaches `p` (up to 1e-12 of rounding), in decreasing probability
/// order with ties broken by lower id.
pub fn nucleus_support(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        mass += probs[i];
        keep += 1;
        if mass >= p - 1e-12 {
            break;
        }
    }
    order.truncate(keep);
    order
}

fn choose(row: &[f64], strategy: DecodeStrategy, rng: &mut Rng) -> (usize, f64) {
    match strategy {
        DecodeStrategy::Nucleus { p } => {
            let probs: Vec<f64> = row.iter().map(|x| x.exp()).collect();
            let support = nucleus_support(&probs, p);
            let total: f64 = support.iter().map(|&i| probs[i]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = *support.last().expect("non-empty vocabulary");
            for &i in &support {
                if u < probs[i] {
                    pick = i;
                    break;
                }
                u -= probs[i];
            }
            (pick, (probs[pick] / total).ln())
        }
        _ => {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            (best, 0.0)
        }
    }
}

/// Samples one sequence per generator, all from the same context, in lockstep.
pub fn sample_many<D: VecToText + ?Sized>(
    dec: &D,
    ctx: &EmbeddingVector,
    dc: &DecodeConfig,
    rngs: &mut [Rng],
) -> Result<Vec<Sampled>> {
    dc.validate(dec.max_len())?;
    if dec.vocab_size() <= EOS as usize {
        return Err(Error::Unsupported(format!("decoding needs EOS in the vocabulary (size {})", dec.vocab_size())));
    }
    if let DecodeStrategy::Beam { width } = dc.strategy {
        let best = beam_search(dec, ctx, width, dc.max_decode_len)?;
        return Ok(rngs.iter().map(|_| best.clone()).collect());
    }
    let n = rngs.len();
    let mut out: Vec<Sampled> = (0..n)
        .map(|_| Sampled {
            tokens: Vec::new(),
            log_prob: 0.0,
            path_log_prob: 0.0,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    while !active.is_empty() {
        let prefixes: Vec<&[TokenId]> = active.iter().map(|&i| out[i].tokens.as_slice()).collect();
        let rows = dec.next_log_probs(ctx, &prefixes)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, row) in active.iter().zip(&rows) {
            let s = &mut out[i];
            let (tok, path_lp) = if s.tokens.len() + 1 == dc.max_decode_len {
                (EOS as usize, 0.0)
            } else {
                choose(row, dc.strategy, &mut rngs[i])
            };
            s.tokens.push(tok as TokenId);
            s.log_prob += row[tok];
            s.path_log_prob += path_lp;
            if tok as TokenId != EOS {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

/// Decodes one sequence.
pub fn sample<D: VecToText + ?Sized>(
    dec: &D,
    ctx: &EmbeddingVector,
    dc: &DecodeConfig,
    rng: &mut Rng,
) -> Result<Sampled> {
    let mut one = [rng.clone()];
    let s = sample_many(dec, ctx, dc, &mut one)?.remove(0);
    *rng = one[0].clone();
    Ok(s)
}

/// Beam search ranking finished hypotheses by log-probability per token (EOS included).
pub fn beam_search<D: VecToText + ?Sized>(
    dec: &D,
    ctx: &EmbeddingVector,
    width: usize,
    max_decode_len: usize,
) -> Result<Sampled> {
    let v = dec.vocab_size();
    let mut beams: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    while !beams.is_empty() {
        let prefixes: Vec<&[TokenId]> = beams.iter().map(|(t, _)| t.as_slice()).collect();
        let rows = dec.next_log_probs(ctx, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, ((toks, score), row)) in beams.iter().zip(&rows).enumerate() {
            if toks.len() + 1 == max_decode_len {
                cands.push((score + row[EOS as usize], b, EOS as usize));
            } else {
                cands.extend((0..v).map(|t| (score + row[t], b, t)));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, b, t) in cands {
            let mut toks = beams[b].0.clone();
            toks.push(t as TokenId);
            if t as TokenId == EOS {
                finished.push((toks, score));
            } else {
                next.push((toks, score));
            }
        }
        beams = next;
    }
    let norm = |(t, s): &(Vec<TokenId>, f64)| s / t.len() as f64;
    let best = finished
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| norm(a).total_cmp(&norm(b)).then(j.cmp(i)))
        .map(|(_, h)| h.clone())
        .expect("beam search always finishes a hypothesis");
    Ok(Sampled {
        tokens: best.0,
        log_prob: best.1,
        path_log_prob: 0.0,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::SeedTree;

    /// A context-free decoder defined by an explicit table of sentence probabilities.
    /// Next-token probabilities are the conditional masses of the table.
    pub struct TableDecoder {
        pub vocab: usize,
        pub max_len: usize,
        pub sentences: Vec<(Vec<TokenId>, f64)>,
    }

    impl VecToText for TableDecoder {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn max_len(&self) -> usize {
            self.max_len
        }

        fn next_log_probs(&self, _: &EmbeddingVector, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    let mut mass = vec![0.0; self.vocab];
                    for (s, w) in &self.sentences {
                        if s.len() > p.len() && s.starts_with(p) {
                            mass[s[p.len()] as usize] += w;
                        }
                    }
                    let total: f64 = mass.iter().sum();
                    mass.iter().map(|m| (m / total).ln()).collect()
                })
                .collect())
        }
    }

    fn ctx() -> EmbeddingVector {
        EmbeddingVector(vec![0.0; 4])
    }

    #[test]
    fn nucleus_support_definition() {
        assert_eq!(nucleus_support(&[0.1, 0.6, 0.3], 0.9), vec![1, 2]);
        assert_eq!(nucleus_support(&[0.1, 0.6, 0.3], 1e-12), vec![1]);
        assert_eq!(nucleus_support(&[0.1, 0.6, 0.3], 1.0), vec![1, 2, 0]);
        assert_eq!(nucleus_support(&[0.5, 0.5], 0.5), vec![0]);
    }

    fn one_step() -> TableDecoder {
        TableDecoder {
            vocab: 6,
            max_len: 4,
            sentences: vec![(vec![3, EOS], 0.6), (vec![4, EOS], 0.3), (vec![5, EOS], 0.1)],
        }
    }

    #[test]
    fn nucleus_frequencies_match_truncated_distribution() {
        let dec = one_step();
        let dc = DecodeConfig::nucleus(0.9, 4, 0);
        let n = 100_000;
        let tree = SeedTree::new(5);
        let mut rngs: Vec<Rng> = (0..n).map(|i| tree.index(i).rng()).collect();
        let out = sample_many(&dec, &ctx(), &dc, &mut rngs).unwrap();
        let count = |t| out.iter().filter(|s| s.tokens[0] == t).count() as f64;
        assert_eq!(count(5), 0.0);
        for (t, p) in [(3, 2.0 / 3.0), (4, 1.0 / 3.0)] {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((count(t) - n as f64 * p).abs() < 3.0 * sigma, "token {t}: {}", count(t));
        }
        let s = out.iter().find(|s| s.tokens[0] == 4).unwrap();
        assert!((s.log_prob - 0.3f64.ln()).abs() < 1e-12);
        assert!((s.path_log_prob - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn tiny_p_and_beam_width_one_are_greedy() {
        let dec = one_step();
        let mut rng = SeedTree::new(1).rng();
        let greedy = sample(&dec, &ctx(), &DecodeConfig::greedy(4), &mut rng).unwrap();
        assert_eq!(greedy.tokens, vec![3, EOS]);
        for seed in 0..20 {
            let mut rng = SeedTree::new(seed).rng();
            let s = sample(&dec, &ctx(), &DecodeConfig::nucleus(1e-9, 4, seed), &mut rng).unwrap();
            assert_eq!(s.tokens, greedy.tokens);
        }
        let b = beam_search(&dec, &ctx(), 1, 4).unwrap();
        assert_eq!(b.tokens, greedy.tokens);
    }

    #[test]
    fn beam_prefers_higher_per_token_likelihood() {
        // Greedy takes 3 then is stuck with a long tail; the beam finds 4.
        let dec = TableDecoder {
            vocab: 6,
            max_len: 6,
            sentences: vec![
                (vec![3, 3, EOS], 0.2),
                (vec![3, 4, EOS], 0.2),
                (vec![3, 5, EOS], 0.2),
                (vec![4, EOS], 0.4),
            ],
        };
        let mut rng = SeedTree::new(0).rng();
        assert_eq!(sample(&dec, &ctx(), &DecodeConfig::greedy(6), &mut rng).unwrap().tokens[0], 3);
        let b = beam_search(&dec, &ctx(), 2, 6).unwrap();
        assert_eq!(b.tokens, vec![4, EOS]);
        assert!((b.log_prob - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_decode_len_forces_eos() {
        let dec = TableDecoder {
            vocab: 5,
            max_len: 8,
            sentences: vec![(vec![4, 4, 4, 4, 4, EOS], 0.9), (vec![4, EOS], 0.1)],
        };
        let mut rng = SeedTree::new(0).rng();
        let s = sample(&dec, &ctx(), &DecodeConfig::greedy(3), &mut rng).unwrap();
        assert_eq!(s.tokens, vec![4, 4, EOS]);
        let ll = dec.log_likelihoods(&ctx(), &[&s.tokens]).unwrap()[0];
        assert_eq!(s.log_prob, ll);
        assert_eq!(beam_search(&dec, &ctx(), 3, 3).unwrap().tokens.len(), 2);
    }

    #[test]
    fn greedy_ignores_seed() {
        let dec = one_step();
        let a = sample(&dec, &ctx(), &DecodeConfig::greedy(4), &mut SeedTree::new(1).rng()).unwrap();
        let b = sample(&dec, &ctx(), &DecodeConfig::greedy(4), &mut SeedTree::new(2).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::nucleus(0.0, 4, 0).validate(4).is_err());
        assert!(DecodeConfig::nucleus(1.1, 4, 0).validate(4).is_err());
        assert!(DecodeConfig::beam(0, 4).validate(4).is_err());
        assert!(DecodeConfig::greedy(5).validate(4).is_err());
        DecodeConfig::nucleus(1.0, 4, 0).validate(4).unwrap();
    }
}
