use std::collections::HashMap;

use rand::Rng as _;
use serde::Serialize;

use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::model::decode::sample_many;
use crate::model::{DecodeConfig, EmbeddingVector, Model, TokenPair, VecToText};
use crate::rng::{Rng, SeedTree};
use crate::tensor::Real;

/// Population standard deviation of every coordinate.
pub fn per_dim_std(embeddings: &[EmbeddingVector]) -> Result<Vec<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::Statistics(format!(
            "per-dimension std needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let d = embeddings[0].dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != d) {
        return Err(Error::Shape(format!("embedding of length {} among length {d}", e.dim())));
    }
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e.values()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for e in embeddings {
        var.iter_mut().zip(e.values().iter().zip(&mean)).for_each(|(v, (x, m))| *v += (x - m) * (x - m));
    }
    Ok(var.into_iter().map(|v| (v / n).sqrt()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyEstimate {
    pub entropy: f64,
    /// Mean over samples of `-log p(s) / len(s)`, EOS counted in the length.
    pub entropy_per_token: f64,
    pub n_samples: usize,
}

/// Generators for `n` samples derived from one draw of `rng`.
pub(crate) fn sample_rngs(rng: &mut Rng, n: usize) -> Vec<Rng> {
    let tree = SeedTree::new(rng.random::<u64>());
    (0..n as u64).map(|i| tree.index(i).rng()).collect()
}

fn full_distribution(max_decode_len: usize) -> DecodeConfig {
    DecodeConfig::nucleus(1.0, max_decode_len, 0)
}

/// Monte-Carlo entropy of `D(embedding)` from self-scored samples of the
/// full distribution: `-(1/n) Σ log p(s_i)`.
pub fn entropy_estimate<D: VecToText + ?Sized>(
    dec: &D,
    embedding: &EmbeddingVector,
    n_samples: usize,
    max_decode_len: usize,
    rng: &mut Rng,
) -> Result<EntropyEstimate> {
    if n_samples == 0 {
        return Err(Error::Statistics("entropy estimate needs n_samples >= 1".into()));
    }
    let mut rngs = sample_rngs(rng, n_samples);
    let samples = sample_many(dec, embedding, &full_distribution(max_decode_len), &mut rngs)?;
    let n = n_samples as f64;
    Ok(EntropyEstimate {
        entropy: -samples.iter().map(|s| s.log_prob).sum::<f64>() / n,
        entropy_per_token: -samples.iter().map(|s| s.log_prob / s.tokens.len() as f64).sum::<f64>() / n,
        n_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JeffreysEstimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub std_err: f64,
    pub n_samples: usize,
}

/// Estimates `J = (KL(A‖P) + KL(P‖A)) / 2` between `A = D(e_anchor)` and
/// `P = D(e_probe)`. Each repetition draws `s_a ~ A` and `s_p ~ P` and scores
/// `((log A(s_a) - log P(s_a)) + (log P(s_p) - log A(s_p))) / 2`.
pub fn jeffreys_approx<D: VecToText + ?Sized>(
    dec: &D,
    e_anchor: &EmbeddingVector,
    e_probe: &EmbeddingVector,
    n_samples: usize,
    max_decode_len: usize,
    rng: &mut Rng,
) -> Result<JeffreysEstimate> {
    if n_samples == 0 {
        return Err(Error::Statistics("Jeffreys estimate needs n_samples >= 1".into()));
    }
    let dc = full_distribution(max_decode_len);
    let mut ra = sample_rngs(rng, n_samples);
    let mut rp = sample_rngs(rng, n_samples);
    let sa = sample_many(dec, e_anchor, &dc, &mut ra)?;
    let sp = sample_many(dec, e_probe, &dc, &mut rp)?;
    let sa_toks: Vec<&[TokenId]> = sa.iter().map(|s| s.tokens.as_slice()).collect();
    let sp_toks: Vec<&[TokenId]> = sp.iter().map(|s| s.tokens.as_slice()).collect();
    let p_of_sa = dec.log_likelihoods(e_probe, &sa_toks)?;
    let a_of_sp = dec.log_likelihoods(e_anchor, &sp_toks)?;
    let terms: Vec<f64> = (0..n_samples)
        .map(|i| 0.5 * ((sa[i].log_prob - p_of_sa[i]) + (sp[i].log_prob - a_of_sp[i])))
        .collect();
    Ok(mean_and_se(&terms, n_samples))
}

fn mean_and_se(terms: &[f64], n_samples: usize) -> JeffreysEstimate {
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = if terms.len() > 1 {
        terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    JeffreysEstimate {
        mean,
        std_err: (var / n).sqrt(),
        n_samples,
    }
}

/// Scores `log p(s | s)` with a model that reads the full sentence.
pub trait FluencyScorer {
    fn score(&self, sentences: &[&[TokenId]]) -> Result<Vec<f64>>;
}

impl<T: Real> FluencyScorer for Model<T> {
    fn score(&self, sentences: &[&[TokenId]]) -> Result<Vec<f64>> {
        let pairs: Vec<TokenPair<'_>> = sentences.iter().map(|s| TokenPair { input: s, target: s }).collect();
        self.pair_log_likelihoods(&pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluencyMetrics {
    pub mean_n_tokens: f64,
    pub mean_max_word_repeat: f64,
    pub mean_lm_llh: f64,
    /// Mean over sentences of `llh / (n_tokens + 1)`.
    pub mean_lm_llh_per_token: f64,
}

/// Largest number of times any lowercased word occurs in `text` (0 when empty).
pub fn max_word_repeat(text: &str) -> usize {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for w in text.split_whitespace() {
        *counts.entry(w.to_lowercase()).or_insert(0) += 1;
    }
    counts.into_values().max().unwrap_or(0)
}

pub fn fluency_metrics<S: FluencyScorer + ?Sized>(samples: &[Sentence], scorer: &S) -> Result<FluencyMetrics> {
    if samples.is_empty() {
        return Err(Error::Statistics("fluency metrics need at least one sample".into()));
    }
    let ids: Vec<&[TokenId]> = samples.iter().map(|s| s.ids()).collect();
    let mut llh = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        llh.extend(scorer.score(chunk)?);
    }
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..samples.len()).map(f).sum::<f64>() / n;
    Ok(FluencyMetrics {
        mean_n_tokens: mean(&|i| samples[i].body().len() as f64),
        mean_max_word_repeat: mean(&|i| max_word_repeat(&samples[i].text) as f64),
        mean_lm_llh: mean(&|i| llh[i]),
        mean_lm_llh_per_token: mean(&|i| llh[i] / samples[i].len() as f64),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::EOS;

    /// Context-dependent enumerable decoder: `ctx[0]` selects a sentence table.
    pub struct Tables {
        pub vocab: usize,
        pub max_len: usize,
        pub tables: Vec<Vec<(Vec<TokenId>, f64)>>,
    }

    impl Tables {
        fn table(&self, ctx: &EmbeddingVector) -> &[(Vec<TokenId>, f64)] {
            &self.tables[ctx.values()[0] as usize]
        }

        pub fn exact_entropy(&self, t: usize) -> f64 {
            -self.tables[t].iter().map(|(_, p)| p * p.ln()).sum::<f64>()
        }

        pub fn exact_jeffreys(&self, a: usize, b: usize) -> f64 {
            let prob = |t: usize, s: &[TokenId]| {
                self.tables[t].iter().find(|(x, _)| x == s).map(|(_, p)| *p).unwrap_or(0.0)
            };
            let kl = |p: usize, q: usize| {
                self.tables[p].iter().map(|(s, w)| w * (w / prob(q, s)).ln()).sum::<f64>()
            };
            0.5 * (kl(a, b) + kl(b, a))
        }
    }

    impl VecToText for Tables {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn max_len(&self) -> usize {
            self.max_len
        }

        fn next_log_probs(&self, ctx: &EmbeddingVector, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
            let table = self.table(ctx);
            Ok(prefixes
                .iter()
                .map(|p| {
                    let mut mass = vec![0.0; self.vocab];
                    for (s, w) in table {
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

    pub fn ctx(t: usize) -> EmbeddingVector {
        EmbeddingVector(vec![t as f64, 0.0, 0.0, 0.0])
    }

    fn three() -> Tables {
        Tables {
            vocab: 6,
            max_len: 5,
            tables: vec![vec![(vec![3, EOS], 0.5), (vec![4, 5, EOS], 0.3), (vec![4, EOS], 0.2)]],
        }
    }

    #[test]
    fn std_examples() {
        let same = vec![EmbeddingVector(vec![1.0, 2.0]); 3];
        assert_eq!(per_dim_std(&same).unwrap(), vec![0.0, 0.0]);
        let two = [EmbeddingVector(vec![0.0; 3]), EmbeddingVector(vec![2.0; 3])];
        assert_eq!(per_dim_std(&two).unwrap(), vec![1.0; 3]);
        assert!(matches!(per_dim_std(&two[..1]), Err(Error::Statistics(_))));
    }

    #[test]
    fn std_of_normal_draws() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = SeedTree::new(3).rng();
        let draws: Vec<EmbeddingVector> = (0..1000)
            .map(|_| EmbeddingVector((0..8).map(|_| StandardNormal.sample(&mut rng)).collect()))
            .collect();
        for s in per_dim_std(&draws).unwrap() {
            assert!((s - 1.0).abs() < 0.1, "{s}");
        }
    }

    #[test]
    fn entropy_of_deterministic_and_uniform_decoders() {
        let det = Tables {
            vocab: 5,
            max_len: 4,
            tables: vec![vec![(vec![3, 4, EOS], 1.0)]],
        };
        let mut rng = SeedTree::new(0).rng();
        let e = entropy_estimate(&det, &ctx(0), 50, 4, &mut rng).unwrap();
        assert_eq!(e.entropy, 0.0);
        let uni = Tables {
            vocab: 8,
            max_len: 4,
            tables: vec![(3..8).map(|t| (vec![t, EOS], 0.2)).collect()],
        };
        let e = entropy_estimate(&uni, &ctx(0), 100, 4, &mut rng).unwrap();
        assert!((e.entropy - 5f64.ln()).abs() < 1e-12);
        assert!((e.entropy_per_token - 5f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_converges_on_three_sentences() {
        let dec = three();
        let exact = dec.exact_entropy(0);
        assert!((exact - 1.0297).abs() < 1e-4);
        let e = entropy_estimate(&dec, &ctx(0), 100_000, 5, &mut SeedTree::new(1).rng()).unwrap();
        assert!((e.entropy - exact).abs() < 0.02 * exact, "{} vs {exact}", e.entropy);
    }

    #[test]
    fn jeffreys_identical_and_enumerable() {
        let dec = Tables {
            vocab: 6,
            max_len: 5,
            tables: vec![
                vec![(vec![3, EOS], 0.5), (vec![4, 5, EOS], 0.3), (vec![4, EOS], 0.2)],
                vec![(vec![3, EOS], 0.2), (vec![4, 5, EOS], 0.3), (vec![4, EOS], 0.4), (vec![5, EOS], 0.1)],
            ],
        };
        let mut rng = SeedTree::new(2).rng();
        let same = jeffreys_approx(&dec, &ctx(0), &ctx(0), 10_000, 5, &mut rng).unwrap();
        assert!(same.mean.abs() < 0.05, "{}", same.mean);
        // Add the missing sentence to table 0 so both divergences are finite.
        let dec = Tables {
            tables: vec![
                vec![(vec![3, EOS], 0.45), (vec![4, 5, EOS], 0.3), (vec![4, EOS], 0.2), (vec![5, EOS], 0.05)],
                dec.tables[1].clone(),
            ],
            ..dec
        };
        let exact = dec.exact_jeffreys(0, 1);
        let est = jeffreys_approx(&dec, &ctx(0), &ctx(1), 20_000, 5, &mut rng).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.std_err, "{} ± {} vs {exact}", est.mean, est.std_err);
    }

    #[test]
    fn jeffreys_spread_shrinks_with_more_samples() {
        let dec = Tables {
            vocab: 6,
            max_len: 5,
            tables: vec![
                vec![(vec![3, EOS], 0.6), (vec![4, EOS], 0.3), (vec![5, EOS], 0.1)],
                vec![(vec![3, EOS], 0.2), (vec![4, EOS], 0.3), (vec![5, EOS], 0.5)],
            ],
        };
        let mut rng = SeedTree::new(6).rng();
        let spread = |n: usize, rng: &mut Rng| {
            let est: Vec<f64> = (0..400)
                .map(|_| jeffreys_approx(&dec, &ctx(0), &ctx(1), n, 5, rng).unwrap().mean)
                .collect();
            let m = est.iter().sum::<f64>() / est.len() as f64;
            (est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt()
        };
        let ratio = spread(25, &mut rng) / spread(50, &mut rng);
        // Sample std of 400 estimates is within about 7% of the truth, so the ratio within ~10%.
        assert!((ratio - 2f64.sqrt()).abs() < 0.15 * 2f64.sqrt(), "{ratio}");
    }

    #[test]
    fn repeat_counts() {
        assert_eq!(max_word_repeat("the cat saw the dog"), 2);
        assert_eq!(max_word_repeat(""), 0);
        assert_eq!(max_word_repeat("a b c"), 1);
        assert_eq!(max_word_repeat("The the THE"), 3);
    }

    struct ConstScorer(f64);

    impl FluencyScorer for ConstScorer {
        fn score(&self, s: &[&[TokenId]]) -> Result<Vec<f64>> {
            Ok(vec![self.0; s.len()])
        }
    }

    #[test]
    fn fluency_of_empty_and_plain_sentences() {
        let v = crate::corpus::build_vocab(&["the cat saw the dog"], 16, 1).unwrap();
        let s = crate::corpus::encode_sentence(&v, "the cat saw the dog", 24);
        let m = fluency_metrics(&[s, Sentence::empty()], &ConstScorer(-6.0)).unwrap();
        assert_eq!(m.mean_n_tokens, 2.5);
        assert_eq!(m.mean_max_word_repeat, 1.0);
        assert_eq!(m.mean_lm_llh, -6.0);
        assert_eq!(m.mean_lm_llh_per_token, (-1.0 + -6.0) / 2.0);
        assert!(fluency_metrics(&[], &ConstScorer(0.0)).is_err());
    }
}
