//! Experiment configuration: a TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use v2t_core::augment::{PairMode, PairParams};
use v2t_core::eval::{InterpolationSpec, NoiseSpec, SuiteConfig};
use v2t_core::mt_client::MtDecodeMode;
use v2t_core::model::{ModelConfig, PositionalEncoding, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required; there is no clock-based default.
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: default_out(),
            corpus: Default::default(),
            augment: Default::default(),
            model: Default::default(),
            train: Default::default(),
            eval: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Plain-text corpus; when unset the synthetic grammar is used.
    pub path: Option<PathBuf>,
    /// Grammar JSON for the synthetic corpus and paraphraser; built-in grammar when unset.
    pub grammar: Option<PathBuf>,
    /// Defaults to the global seed.
    pub synthetic_seed: Option<u64>,
    pub synthetic_size: usize,
    pub eval_fraction: f64,
    pub vocab_size: usize,
    pub min_freq: usize,
    pub max_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            grammar: None,
            synthetic_seed: None,
            synthetic_size: 10_000,
            eval_fraction: 0.05,
            vocab_size: 512,
            min_freq: 1,
            max_len: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub modes: Vec<PairMode>,
    pub dropout_p: f64,
    pub temperature: f64,
    pub mt_endpoint: Option<String>,
    /// Defaults to `<out>/mt_cache`.
    pub mt_cache: Option<PathBuf>,
    /// Read from the config only; `MT_API_KEY` takes precedence.
    pub mt_api_key: Option<String>,
    pub mt_decode: MtDecodeMode,
    pub bleu_bins: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let p = PairParams::default();
        Self {
            modes: vec![PairMode::Identity],
            dropout_p: p.dropout_p,
            temperature: p.temperature,
            mt_endpoint: None,
            mt_cache: None,
            mt_api_key: None,
            mt_decode: MtDecodeMode::default(),
            bleu_bins: 10,
        }
    }
}

impl AugmentSection {
    pub fn params(&self) -> PairParams {
        PairParams {
            dropout_p: self.dropout_p,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub bottleneck: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 32);
        Self {
            bottleneck: d.bottleneck_dim,
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            d_ff: d.d_ff,
            dropout_rate: d.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Which pair file to train on.
    pub mode: PairMode,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    /// Overrides the model directory name (`<pair stem>-b<bottleneck>`).
    pub tag: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: PairMode::Identity,
            steps: 1500,
            lr: 1e-3,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            clip_norm: t.clip_norm,
            checkpoint_every: 500,
            tag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    pub etas: Vec<f64>,
    pub n_pairs: usize,
    pub n_anchors: usize,
    pub samples: usize,
    pub jeffreys_samples: usize,
    pub decode_p: f64,
    pub hull_samples: usize,
    /// Defaults to `<out>/corpus/topics.txt` when that exists.
    pub topics: Option<PathBuf>,
    /// Model tag used as fluency scorer.
    pub scorer: String,
    /// Paraphraser temperature for the paraphrased reconstruction pairs.
    pub paraphrase_temperature: f64,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let i = InterpolationSpec::default();
        let n = NoiseSpec::default();
        let s = SuiteConfig::default();
        Self {
            alphas: i.alphas,
            etas: n.etas,
            n_pairs: i.n_pairs,
            n_anchors: n.n_anchors,
            samples: s.n_samples,
            jeffreys_samples: s.n_jeffreys,
            decode_p: s.decode_p,
            hull_samples: s.hull_samples,
            topics: None,
            scorer: "identity-b0".into(),
            paraphrase_temperature: 1.0,
            plots: false,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<PairMode>,
    pub dropout_p: Option<f64>,
    pub bottleneck: Option<usize>,
    pub steps: Option<u64>,
    pub alphas: Option<Vec<f64>>,
    pub etas: Option<Vec<f64>>,
    pub samples: Option<usize>,
    pub plots: bool,
    pub mt_endpoint: Option<String>,
    pub tag: Option<String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::input(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Loads `path` if given, otherwise starts from defaults, then applies flags.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(m) = o.mode {
            self.augment.modes = vec![m];
            self.train.mode = m;
        }
        if let Some(p) = o.dropout_p {
            self.augment.dropout_p = p;
        }
        if let Some(b) = o.bottleneck {
            self.model.bottleneck = b;
        }
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
        if let Some(a) = &o.alphas {
            self.eval.alphas = a.clone();
        }
        if let Some(e) = &o.etas {
            self.eval.etas = e.clone();
        }
        if let Some(n) = o.samples {
            self.eval.samples = n;
            self.eval.jeffreys_samples = n;
        }
        if o.plots {
            self.eval.plots = true;
        }
        if let Some(e) = &o.mt_endpoint {
            self.augment.mt_endpoint = Some(e.clone());
        }
        if let Some(t) = &o.tag {
            self.train.tag = Some(t.clone());
        }
    }

    /// Checks everything that can be checked without touching the output directory.
    pub fn validate(&self) -> CliResult<()> {
        let seed = self.seed();
        if seed.is_none() {
            return Err(CliError::input("seed is required (set `seed` in the config or pass --seed)"));
        }
        let c = &self.corpus;
        if let Some(p) = &c.path {
            if !p.is_file() {
                return Err(CliError::input(format!("corpus file not found: {}", p.display())));
            }
        }
        if let Some(p) = &c.grammar {
            if !p.is_file() {
                return Err(CliError::input(format!("grammar file not found: {}", p.display())));
            }
        }
        if !(c.eval_fraction > 0.0 && c.eval_fraction < 1.0) {
            return Err(CliError::input(format!("eval_fraction must be in (0, 1), got {}", c.eval_fraction)));
        }
        if c.path.is_none() && c.synthetic_size == 0 {
            return Err(CliError::input("synthetic_size must be >= 1"));
        }
        if c.vocab_size < 5 {
            return Err(CliError::input(format!("vocab_size must be >= 5, got {}", c.vocab_size)));
        }
        self.augment.params().validate()?;
        if self.augment.modes.is_empty() {
            return Err(CliError::input("augment.modes is empty"));
        }
        if self.augment.bleu_bins < 2 {
            return Err(CliError::input("bleu_bins must be >= 2"));
        }
        self.model_config(c.vocab_size).validate()?;
        self.train_config().validate()?;
        if self.train.checkpoint_every == 0 {
            return Err(CliError::input("checkpoint_every must be >= 1"));
        }
        if let Some(t) = &self.train.tag {
            check_tag(t)?;
        }
        check_tag(&self.eval.scorer)?;
        self.interpolation_spec().validate()?;
        let n = self.noise_spec();
        if !n.etas.contains(&0.0) {
            return Err(CliError::input("etas must include 0"));
        }
        if n.n_anchors == 0 || self.eval.n_pairs == 0 {
            return Err(CliError::input("n_pairs and n_anchors must be >= 1"));
        }
        self.suite_config().validate()?;
        if let Some(p) = &self.eval.topics {
            if !p.is_file() {
                return Err(CliError::input(format!("topics file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Only valid after [`validate`](Self::validate).
    pub fn global_seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            max_len: self.corpus.max_len,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            bottleneck_dim: m.bottleneck,
            dropout_rate: m.dropout_rate,
            positional: PositionalEncoding::Sinusoidal,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            total_steps: t.steps,
            warmup_steps: t.warmup_steps,
            clip_norm: t.clip_norm,
            seed: self.seed.unwrap_or(0),
            ..TrainConfig::default()
        }
    }

    pub fn interpolation_spec(&self) -> InterpolationSpec {
        InterpolationSpec {
            alphas: self.eval.alphas.clone(),
            n_pairs: self.eval.n_pairs,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            etas: self.eval.etas.clone(),
            n_anchors: self.eval.n_anchors,
            sigma: Vec::new(),
        }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            n_samples: self.eval.samples,
            n_jeffreys: self.eval.jeffreys_samples,
            decode_p: self.eval.decode_p,
            max_decode_len: 0,
            hull_samples: self.eval.hull_samples,
        }
    }

    pub fn model_tag(&self) -> String {
        self.train
            .tag
            .clone()
            .unwrap_or_else(|| format!("{}-b{}", crate::commands::pair_stem(self.train.mode, self.augment.dropout_p), self.model.bottleneck))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    pub fn pairs_dir(&self) -> PathBuf {
        self.out.join("pairs")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
}

fn check_tag(t: &str) -> CliResult<()> {
    let ok = !t.is_empty()
        && t != "."
        && t != ".."
        && t.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::input(format!("invalid tag {t:?} (use letters, digits, '-', '_' or '.')")))
    }
}

/// Parses `0.5,1,2` style lists.
pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("not a number: {x:?}")))
        .collect()
}
