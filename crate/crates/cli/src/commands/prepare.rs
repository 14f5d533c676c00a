use std::collections::{BTreeMap, HashMap};
use std::fs;

use log::{info, warn};
use v2t_core::corpus::{build_vocab, generate_synthetic_corpus, split_sentences, split_train_eval, GrammarConfig};
use v2t_core::eval::MIN_TOPIC_SENTENCES;

use super::{load_grammar, to_json, PrepareInfo};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::fsutil::{OutputLock, Staging};

fn lines(texts: &[String]) -> String {
    let mut s = String::new();
    for t in texts {
        s.push_str(t);
        s.push('\n');
    }
    s
}

/// `# label` blocks of eval sentences grouped by generating topic.
fn topics_file(grammar: &GrammarConfig, eval: &[String], topic_of: &HashMap<&str, usize>) -> (String, Vec<String>) {
    let names = grammar.topic_names();
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for t in eval {
        if let Some(&k) = topic_of.get(t.as_str()) {
            groups.entry(k).or_default().push(t);
        }
    }
    let mut out = String::new();
    let mut kept = Vec::new();
    for (k, texts) in groups {
        if texts.len() < MIN_TOPIC_SENTENCES {
            warn!("topic {} has only {} eval sentences; left out of topics.txt", names[k], texts.len());
            continue;
        }
        out.push_str(&format!("# {}\n", names[k]));
        for t in texts {
            out.push_str(t);
            out.push('\n');
        }
        kept.push(names[k].to_string());
    }
    (out, kept)
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let seed = cfg.global_seed();
    let c = &cfg.corpus;
    let mut grammar_used = None;
    let (texts, source, topic_of) = match &c.path {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let texts: Vec<String> = raw.lines().flat_map(split_sentences).collect();
            (texts, p.display().to_string(), HashMap::new())
        }
        None => {
            let grammar = load_grammar(cfg)?;
            let gseed = c.synthetic_seed.unwrap_or(seed);
            let corpus = generate_synthetic_corpus(gseed, c.synthetic_size, &grammar)?;
            let mut topic_of = HashMap::new();
            for s in &corpus {
                topic_of.entry(s.text.clone()).or_insert(s.topic);
            }
            grammar_used = Some(grammar);
            (
                corpus.into_iter().map(|s| s.text).collect::<Vec<_>>(),
                format!("synthetic:{gseed}:{}", c.synthetic_size),
                topic_of,
            )
        }
    };
    if let Some(bad) = texts.iter().find(|t| t.contains('\t')) {
        return Err(CliError::input(format!("corpus sentence contains a tab: {bad:?}")));
    }
    let (train, eval) = split_train_eval(&texts, c.eval_fraction);
    if train.is_empty() || eval.is_empty() {
        return Err(CliError::input(format!(
            "{} sentences are too few for a {} eval split",
            texts.len(),
            c.eval_fraction
        )));
    }
    let vocab = build_vocab(&train, c.vocab_size, c.min_freq)?;

    let _lock = OutputLock::acquire(&cfg.out)?;
    let stage = Staging::new(&cfg.corpus_dir())?;
    stage.write("train.txt", lines(&train))?;
    stage.write("eval.txt", lines(&eval))?;
    vocab.save(&stage.path("vocab.txt"))?;
    let mut topics = Vec::new();
    if let Some(grammar) = grammar_used {
        let by_text: HashMap<&str, usize> = topic_of.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        let (text, kept) = topics_file(&grammar, &eval, &by_text);
        stage.write("topics.txt", text)?;
        topics = kept;
    }
    let info = PrepareInfo {
        source,
        seed,
        n_sentences: texts.len(),
        n_train: train.len(),
        n_eval: eval.len(),
        vocab_size: vocab.len(),
        eval_fraction: c.eval_fraction,
        topics,
    };
    stage.write("prepare.json", to_json(&info))?;
    stage.commit_replace()?;
    info!(
        "prepared {} sentences ({} train, {} eval), vocab {} -> {}",
        info.n_sentences,
        info.n_train,
        info.n_eval,
        info.vocab_size,
        cfg.corpus_dir().display()
    );
    Ok(())
}
