pub mod augment;
pub mod eval;
pub mod prepare;
pub mod report;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use v2t_core::augment::{PairMode, PairParams};
use v2t_core::corpus::{read_corpus, GrammarConfig, Vocab};
use v2t_core::eval::format_sig6;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::fsutil::require_file;

/// Written by `prepare` next to the corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareInfo {
    pub source: String,
    pub seed: u64,
    pub n_sentences: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab_size: usize,
    pub eval_fraction: f64,
    pub topics: Vec<String>,
}

/// The outputs of `prepare`, loaded back.
pub struct PreparedCorpus {
    pub dir: PathBuf,
    pub vocab: Vocab,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl PreparedCorpus {
    pub fn load(cfg: &ExperimentConfig) -> CliResult<Self> {
        let dir = cfg.corpus_dir();
        let (vp, tp, ep) = (dir.join("vocab.txt"), dir.join("train.txt"), dir.join("eval.txt"));
        for p in [&vp, &tp, &ep] {
            require_file(p, "corpus artifact (run `v2t prepare` first)")?;
        }
        Ok(Self {
            vocab: Vocab::load(&vp)?,
            train: read_corpus(&tp)?,
            eval: read_corpus(&ep)?,
            dir,
        })
    }

    pub fn topics_path(&self) -> PathBuf {
        self.dir.join("topics.txt")
    }
}

pub fn load_grammar(cfg: &ExperimentConfig) -> CliResult<GrammarConfig> {
    match &cfg.corpus.grammar {
        None => Ok(GrammarConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(GrammarConfig::from_json(&text).map_err(|e| e.context(p.display().to_string()))?)
        }
    }
}

/// Pair-file stem: the mode slug, plus the dropout rate when it differs from the default.
pub fn pair_stem(mode: PairMode, dropout_p: f64) -> String {
    if mode.uses_dropout() && dropout_p != PairParams::default().dropout_p {
        format!("{}-p{}", mode.slug(), format_sig6(dropout_p))
    } else {
        mode.slug().to_string()
    }
}

pub fn pair_file(cfg: &ExperimentConfig, mode: PairMode) -> PathBuf {
    cfg.pairs_dir().join(format!("{}.tsv", pair_stem(mode, cfg.augment.dropout_p)))
}

pub fn model_dir(cfg: &ExperimentConfig, tag: &str) -> PathBuf {
    cfg.models_dir().join(tag)
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}
