use std::collections::BTreeSet;

use rand::Rng as _;

use crate::corpus::{encode_sentence, GrammarConfig, Sentence, SynonymTable, Vocab};
use crate::rng::Rng;

/// Grammar-aware rephrasing used in place of machine round-trip translation.
///
/// At temperature `T` each synonym phrase is replaced by a different member
/// of its class with probability `min(1, 0.6 T)`, adjacent distinct
/// modifiers are swapped with probability `min(1, 0.5 T)`, intensifiers
/// before modifiers and adverbs before verbs are dropped with probability
/// `min(1, 0.3 T)` and inserted with probability `min(1, 0.15 T)`.
/// Words the grammar does not know are left alone.
#[derive(Debug, Clone)]
pub struct Paraphraser {
    table: SynonymTable,
    modifiers: BTreeSet<String>,
    verbs: BTreeSet<String>,
    intensifiers: Vec<String>,
    adverbs: Vec<String>,
    max_len: usize,
}

fn chance(rng: &mut Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

impl Paraphraser {
    /// `max_len` bounds encoded outputs (EOS included); insertions never exceed it.
    pub fn new(grammar: &GrammarConfig, max_len: usize) -> Self {
        let single = |v: &[String]| v.iter().filter(|w| !w.contains(' ')).cloned().collect::<Vec<_>>();
        Self {
            table: SynonymTable::new(grammar),
            modifiers: grammar.slot_words("adj"),
            verbs: grammar.slot_words("verb"),
            intensifiers: single(&grammar.intensifiers),
            adverbs: single(&grammar.adverbs),
            max_len,
        }
    }

    pub fn paraphrase_words(&self, words: &[String], temperature: f64, rng: &mut Rng) -> Vec<String> {
        let t = temperature.max(0.0);
        let (subst, swap, delete, insert) = ((0.6 * t).min(1.0), (0.5 * t).min(1.0), (0.3 * t).min(1.0), (0.15 * t).min(1.0));

        let mut out = Vec::with_capacity(words.len() + 2);
        let mut i = 0;
        while i < words.len() {
            match self.table.match_at(words, i) {
                Some((len, ci)) => {
                    let class = self.table.class(ci);
                    let current = &words[i..i + len];
                    if chance(rng, subst) {
                        let others: Vec<&Vec<String>> = class.iter().filter(|m| m.as_slice() != current).collect();
                        out.extend(others[rng.random_range(0..others.len())].iter().cloned());
                    } else {
                        out.extend(current.iter().cloned());
                    }
                    i += len;
                }
                None => {
                    out.push(words[i].clone());
                    i += 1;
                }
            }
        }

        let mut i = 0;
        while i + 1 < out.len() {
            let (a, b) = (&out[i], &out[i + 1]);
            if a != b && self.modifiers.contains(a) && self.modifiers.contains(b) && chance(rng, swap) {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }

        let max_words = self.max_len.saturating_sub(1).max(words.len());
        let mut result: Vec<String> = Vec::with_capacity(out.len() + 2);
        for (i, w) in out.iter().enumerate() {
            let next = out.get(i + 1);
            let before_mod = next.is_some_and(|n| self.modifiers.contains(n));
            let before_verb = next.is_some_and(|n| self.verbs.contains(n));
            let is_int = self.intensifiers.contains(w);
            let is_adv = self.adverbs.contains(w);
            if ((is_int && before_mod) || (is_adv && before_verb)) && chance(rng, delete) {
                continue;
            }
            let prev = result.last();
            let room = result.len() + (out.len() - i) < max_words;
            if room && self.modifiers.contains(w) && !self.intensifiers.is_empty() && !prev.is_some_and(|p| self.intensifiers.contains(p)) && chance(rng, insert) {
                result.push(self.intensifiers[rng.random_range(0..self.intensifiers.len())].clone());
            } else if room && self.verbs.contains(w) && !self.adverbs.is_empty() && !prev.is_some_and(|p| self.adverbs.contains(p)) && chance(rng, insert) {
                result.push(self.adverbs[rng.random_range(0..self.adverbs.len())].clone());
            }
            result.push(w.clone());
        }
        result
    }

    pub fn paraphrase_text(&self, text: &str, temperature: f64, rng: &mut Rng) -> String {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        self.paraphrase_words(&words, temperature, rng).join(" ")
    }

    /// Rephrases an encoded sentence; words outside the grammar pass through.
    pub fn paraphrase(&self, vocab: &Vocab, s: &Sentence, temperature: f64, rng: &mut Rng) -> Sentence {
        if temperature <= 0.0 {
            return s.clone();
        }
        let text = self.paraphrase_text(&s.text, temperature, rng);
        encode_sentence(vocab, &text, self.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::sentence_bleu;
    use crate::corpus::generate_synthetic_corpus;
    use crate::rng::SeedTree;

    fn setup() -> (GrammarConfig, Paraphraser) {
        let g = GrammarConfig::default();
        let p = Paraphraser::new(&g, 24);
        (g, p)
    }

    #[test]
    fn zero_temperature_is_identity() {
        let (g, p) = setup();
        let mut rng = SeedTree::new(0).rng();
        for s in generate_synthetic_corpus(3, 300, &g).unwrap() {
            assert_eq!(p.paraphrase_text(&s.text, 0.0, &mut rng), s.text);
        }
    }

    #[test]
    fn going_becomes_on_my_way() {
        let (_, p) = setup();
        let mut seen = false;
        for seed in 0..200 {
            let mut rng = SeedTree::new(seed).rng();
            let out = p.paraphrase_text("i m going to the beach", 1.0, &mut rng);
            if out.contains("on my way to the beach") {
                seen = true;
                break;
            }
        }
        assert!(seen);
    }

    #[test]
    fn substitution_stays_in_class() {
        let (_, p) = setup();
        for seed in 0..100 {
            let mut rng = SeedTree::new(seed).rng();
            let out = p.paraphrase_text("i m going to the beach", 5.0, &mut rng);
            let ok = ["going", "on my way", "heading"].iter().any(|v| out.contains(v));
            assert!(ok, "{out}");
        }
    }

    #[test]
    fn unknown_words_pass_through() {
        let (_, p) = setup();
        let mut rng = SeedTree::new(1).rng();
        assert_eq!(p.paraphrase_text("zzz qqq xxx", 3.0, &mut rng), "zzz qqq xxx");
    }

    #[test]
    fn bleu_drops_with_temperature() {
        let (g, p) = setup();
        let corpus = generate_synthetic_corpus(11, 1000, &g).unwrap();
        let mean_bleu = |t: f64| {
            let tree = SeedTree::new(2).child("bleu-trend");
            corpus
                .iter()
                .enumerate()
                .map(|(i, s)| sentence_bleu(&p.paraphrase_text(&s.text, t, &mut tree.index(i as u64).rng()), &s.text))
                .sum::<f64>()
                / corpus.len() as f64
        };
        let (b0, b5, b10) = (mean_bleu(0.0), mean_bleu(0.5), mean_bleu(1.0));
        assert_eq!(b0, 100.0);
        assert!(b0 > b5 && b5 > b10, "{b0} {b5} {b10}");
    }
}
