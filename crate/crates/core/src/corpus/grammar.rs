//! Template grammar standing in for a web-scale sentence corpus.
//!
//! Each topic owns a set of templates whose `{slot}` references are filled
//! from topic slots first and shared slots second. After expansion, every
//! phrase that belongs to a synonym class is realized as a uniformly chosen
//! member of its class, so surface variation is independent of meaning.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

const DEFAULT_GRAMMAR: &str = include_str!("default_grammar.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicGrammar {
    pub name: String,
    pub templates: Vec<String>,
    pub slots: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub shared_slots: BTreeMap<String, Vec<String>>,
    pub topics: Vec<TopicGrammar>,
    /// Interchangeable phrases; a phrase may appear in at most one class.
    pub synonyms: Vec<Vec<String>>,
    /// Function words that may be inserted before modifiers or dropped.
    pub intensifiers: Vec<String>,
    /// Function words that may be inserted before verbs or dropped.
    pub adverbs: Vec<String>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_GRAMMAR).expect("shipped grammar parses")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSentence {
    pub text: String,
    pub topic: usize,
}

impl GrammarConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: GrammarConfig =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("grammar: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics.len() < 4 {
            return Err(Error::Config(format!(
                "grammar needs at least 4 topics, found {}",
                self.topics.len()
            )));
        }
        for topic in &self.topics {
            if topic.templates.is_empty() {
                return Err(Error::Config(format!("topic {} has no templates", topic.name)));
            }
            for tpl in &topic.templates {
                for slot in template_slots(tpl)? {
                    let fillers = topic.slots.get(slot).or_else(|| self.shared_slots.get(slot));
                    match fillers {
                        Some(f) if !f.is_empty() => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "topic {}: slot {{{slot}}} has no fillers",
                                topic.name
                            )))
                        }
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for class in &self.synonyms {
            if class.len() < 2 {
                return Err(Error::Config(format!("synonym class {class:?} has fewer than 2 members")));
            }
            for phrase in class {
                if !seen.insert(phrase.as_str()) {
                    return Err(Error::Config(format!("phrase {phrase:?} is in two synonym classes")));
                }
            }
        }
        Ok(())
    }

    pub fn topic_names(&self) -> Vec<&str> {
        self.topics.iter().map(|t| t.name.as_str()).collect()
    }

    /// Every word the grammar can emit, including synonyms and function words.
    pub fn lexicon(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        let mut add = |phrase: &str| {
            words.extend(phrase.split_whitespace().filter(|w| !w.starts_with('{')).map(str::to_string));
        };
        for fillers in self.shared_slots.values() {
            fillers.iter().for_each(|f| add(f));
        }
        for topic in &self.topics {
            topic.templates.iter().for_each(|t| add(t));
            for fillers in topic.slots.values() {
                fillers.iter().for_each(|f| add(f));
            }
        }
        self.synonyms.iter().flatten().for_each(|p| add(p));
        self.intensifiers.iter().chain(&self.adverbs).for_each(|p| add(p));
        words
    }

    /// Words filling any slot whose name starts with `prefix`, across topics,
    /// together with their synonyms.
    pub(crate) fn slot_words(&self, prefix: &str) -> BTreeSet<String> {
        let mut phrases: BTreeSet<&str> = BTreeSet::new();
        let slots = self
            .topics
            .iter()
            .flat_map(|t| t.slots.iter())
            .chain(self.shared_slots.iter());
        for (name, fillers) in slots {
            if name.starts_with(prefix) {
                phrases.extend(fillers.iter().map(String::as_str));
            }
        }
        let mut words = BTreeSet::new();
        for p in phrases {
            words.extend(p.split_whitespace().map(str::to_string));
            if let Some(class) = self.synonyms.iter().find(|c| c.iter().any(|m| m == p)) {
                for m in class {
                    words.extend(m.split_whitespace().map(str::to_string));
                }
            }
        }
        words
    }

    /// Expands one sentence for `topic` using `rng`.
    pub fn expand<R: rand::Rng + ?Sized>(&self, topic: usize, rng: &mut R, table: &SynonymTable) -> String {
        let t = &self.topics[topic];
        let tpl = t.templates.choose(rng).expect("validated non-empty");
        let mut words: Vec<String> = Vec::new();
        for piece in tpl.split_whitespace() {
            if let Some(slot) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                let fillers = t.slots.get(slot).or_else(|| self.shared_slots.get(slot)).expect("validated slot");
                let filler = fillers.choose(rng).expect("validated non-empty");
                words.extend(filler.split_whitespace().map(str::to_string));
            } else {
                words.push(piece.to_string());
            }
        }
        table.realize(&words, rng).join(" ")
    }
}

fn template_slots(tpl: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    for piece in tpl.split_whitespace() {
        if piece.starts_with('{') || piece.ends_with('}') {
            let slot = piece
                .strip_prefix('{')
                .and_then(|p| p.strip_suffix('}'))
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Config(format!("malformed slot {piece:?} in template {tpl:?}")))?;
            out.push(slot);
        }
    }
    Ok(out)
}

/// Phrase-level synonym lookup over word sequences.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    classes: Vec<Vec<Vec<String>>>,
    /// first word -> (phrase words, class index), longest phrases first
    by_first: BTreeMap<String, Vec<(Vec<String>, usize)>>,
}

impl SynonymTable {
    pub fn new(grammar: &GrammarConfig) -> Self {
        let classes: Vec<Vec<Vec<String>>> = grammar
            .synonyms
            .iter()
            .map(|c| c.iter().map(|p| p.split_whitespace().map(str::to_string).collect()).collect())
            .collect();
        let mut by_first: BTreeMap<String, Vec<(Vec<String>, usize)>> = BTreeMap::new();
        for (ci, class) in classes.iter().enumerate() {
            for phrase in class {
                by_first.entry(phrase[0].clone()).or_default().push((phrase.clone(), ci));
            }
        }
        for v in by_first.values_mut() {
            v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Self { classes, by_first }
    }

    /// Longest synonym phrase starting at `words[i]`: `(phrase length, class)`.
    pub fn match_at<S: AsRef<str>>(&self, words: &[S], i: usize) -> Option<(usize, usize)> {
        let cands = self.by_first.get(words[i].as_ref())?;
        cands.iter().find_map(|(phrase, ci)| {
            let end = i + phrase.len();
            let hit = end <= words.len() && phrase.iter().zip(&words[i..end]).all(|(p, w)| p == w.as_ref());
            hit.then_some((phrase.len(), *ci))
        })
    }

    pub fn class(&self, ci: usize) -> &[Vec<String>] {
        &self.classes[ci]
    }

    /// Replaces every synonym phrase with a uniformly chosen class member.
    pub fn realize<R: rand::Rng + ?Sized>(&self, words: &[String], rng: &mut R) -> Vec<String> {
        let mut out = Vec::with_capacity(words.len());
        let mut i = 0;
        while i < words.len() {
            match self.match_at(words, i) {
                Some((len, ci)) => {
                    let class = &self.classes[ci];
                    out.extend(class[rng.random_range(0..class.len())].iter().cloned());
                    i += len;
                }
                None => {
                    out.push(words[i].clone());
                    i += 1;
                }
            }
        }
        out
    }
}

/// Draws `n` topic-labelled sentences; sentence `i` uses its own generator
/// derived from `(seed, i)`, so the output is byte-identical for a given seed.
pub fn generate_synthetic_corpus(seed: u64, n: usize, grammar: &GrammarConfig) -> Result<Vec<SyntheticSentence>> {
    grammar.validate()?;
    let table = SynonymTable::new(grammar);
    let tree = SeedTree::new(seed).child("synthetic-corpus");
    Ok((0..n)
        .map(|i| {
            let mut rng = tree.index(i as u64).rng();
            let topic = rng.random_range(0..grammar.topics.len());
            let text = grammar.expand(topic, &mut rng, &table);
            SyntheticSentence { text, topic }
        })
        .collect())
}
