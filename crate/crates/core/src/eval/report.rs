use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Vocab};
use crate::error::{Error, Result};
use crate::eval::metrics::{entropy_estimate, fluency_metrics, jeffreys_approx, per_dim_std, sample_rngs, FluencyScorer};
use crate::eval::spaces::{build_interpolation_space, build_noise_space, InterpolationSpec, NoiseSpec, Provenance, SpacePoint};
use crate::eval::topics::{convex_hull_samples, TopicSet};
use crate::eval::{clustering_scores, decoded_sentence, embed_all, EvalSet};
use crate::model::decode::sample_many;
use crate::model::{DecodeConfig, EmbeddingVector, Model, TokenPair};
use crate::rng::SeedTree;
use crate::tensor::Real;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const REPORT_COLUMNS: [&str; 13] = [
    "condition",
    "value",
    "accuracy",
    "entropy",
    "entropy_per_token",
    "mean_n_tokens",
    "mean_max_word_repeat",
    "mean_lm_llh",
    "mean_lm_llh_per_token",
    "jeffreys",
    "silhouette",
    "davies_bouldin",
    "calinski_harabasz",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Samples per embedding for entropy and for fluency.
    pub n_samples: usize,
    /// Sample pairs per embedding for Jeffreys.
    pub n_jeffreys: usize,
    /// Nucleus mass for the fluency decodes.
    pub decode_p: f64,
    /// 0 means the model's `max_len`.
    pub max_decode_len: usize,
    /// Convex-hull points per topic.
    pub hull_samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            n_jeffreys: 32,
            decode_p: 0.95,
            max_decode_len: 0,
            hull_samples: 8,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_jeffreys == 0 || self.hull_samples == 0 {
            return Err(Error::Config("suite sample counts must be >= 1".into()));
        }
        if !(self.decode_p > 0.0 && self.decode_p <= 1.0) {
            return Err(Error::Config(format!("decode_p {} outside (0, 1]", self.decode_p)));
        }
        Ok(())
    }
}

/// Everything the suite reads besides the model.
pub struct SuiteInputs<'a> {
    pub vocab: &'a Vocab,
    pub eval: &'a EvalSet,
    /// Rephrasings aligned with `eval.sentences`, used as inputs with the originals as targets.
    pub paraphrased: &'a [Sentence],
    pub topics: &'a [TopicSet],
    pub model_id: &'a str,
}

/// One condition; `None` fields are not measured for that condition.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PropertyRow {
    pub condition: String,
    pub value: Option<f64>,
    pub accuracy: Option<f64>,
    pub entropy: Option<f64>,
    pub entropy_per_token: Option<f64>,
    pub mean_n_tokens: Option<f64>,
    pub mean_max_word_repeat: Option<f64>,
    pub mean_lm_llh: Option<f64>,
    pub mean_lm_llh_per_token: Option<f64>,
    pub jeffreys: Option<f64>,
    pub silhouette: Option<f64>,
    pub davies_bouldin: Option<f64>,
    pub calinski_harabasz: Option<f64>,
}

impl PropertyRow {
    fn cells(&self) -> [Option<f64>; 12] {
        [
            self.value,
            self.accuracy,
            self.entropy,
            self.entropy_per_token,
            self.mean_n_tokens,
            self.mean_max_word_repeat,
            self.mean_lm_llh,
            self.mean_lm_llh_per_token,
            self.jeffreys,
            self.silhouette,
            self.davies_bouldin,
            self.calinski_harabasz,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PropertyReport {
    pub rows: Vec<PropertyRow>,
    pub metadata: BTreeMap<String, String>,
}

/// Like C's `%.6g`; non-finite values print as `nan`, `inf`, `-inf`.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let fixed = format!("{x:.*}", (5 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl PropertyReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_field(&r.condition));
            for c in r.cells() {
                out.push(',');
                if let Some(x) = c {
                    out.push_str(&format_sig6(x));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn metadata_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.metadata).expect("string map serializes");
        s.push('\n');
        s
    }

    pub fn row(&self, condition: &str) -> Option<&PropertyRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Probe<'a> {
    embedding: &'a EmbeddingVector,
    anchor: &'a EmbeddingVector,
}

/// Entropy, fluency and Jeffreys over a group of probes, averaged.
fn measure_group<T: Real, S: FluencyScorer + ?Sized>(
    model: &Model<T>,
    scorer: &S,
    vocab: &Vocab,
    probes: &[Probe<'_>],
    cfg: &SuiteConfig,
    max_len: usize,
    seeds: &SeedTree,
    with_jeffreys: bool,
) -> Result<PropertyRow> {
    let mut ent = Vec::new();
    let mut ept = Vec::new();
    let mut jef = Vec::new();
    let mut decoded = Vec::new();
    let nucleus = DecodeConfig::nucleus(cfg.decode_p, max_len, 0);
    for (k, p) in probes.iter().enumerate() {
        let k = k as u64;
        let e = entropy_estimate(model, p.embedding, cfg.n_samples, max_len, &mut seeds.child("entropy").index(k).rng())?;
        ent.push(e.entropy);
        ept.push(e.entropy_per_token);
        let mut rngs = sample_rngs(&mut seeds.child("decode").index(k).rng(), cfg.n_samples);
        for s in sample_many(model, p.embedding, &nucleus, &mut rngs)? {
            decoded.push(decoded_sentence(vocab, &s.tokens)?);
        }
        if with_jeffreys {
            let j = jeffreys_approx(model, p.anchor, p.embedding, cfg.n_jeffreys, max_len, &mut seeds.child("jeffreys").index(k).rng())?;
            jef.push(j.mean);
        }
    }
    let f = fluency_metrics(&decoded, scorer)?;
    Ok(PropertyRow {
        entropy: Some(mean(&ent)),
        entropy_per_token: Some(mean(&ept)),
        mean_n_tokens: Some(f.mean_n_tokens),
        mean_max_word_repeat: Some(f.mean_max_word_repeat),
        mean_lm_llh: Some(f.mean_lm_llh),
        mean_lm_llh_per_token: Some(f.mean_lm_llh_per_token),
        jeffreys: with_jeffreys.then(|| mean(&jef)),
        ..Default::default()
    })
}

/// Runs the full battery for one model. Rows, in order: clean and
/// paraphrased reconstruction accuracy, one row per alpha, one per eta, one
/// per topic (convex-hull decodes) and one clustering row when there are at
/// least two topics. Deterministic given `seed`.
pub fn run_property_suite<T: Real, S: FluencyScorer + ?Sized>(
    model: &Model<T>,
    scorer: &S,
    inputs: &SuiteInputs<'_>,
    ispec: &InterpolationSpec,
    nspec: &NoiseSpec,
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<PropertyReport> {
    cfg.validate()?;
    ispec.validate()?;
    let eval = inputs.eval;
    let max_len = if cfg.max_decode_len == 0 { model.config().max_len } else { cfg.max_decode_len };
    DecodeConfig::nucleus(cfg.decode_p, max_len, 0).validate(model.config().max_len)?;
    if inputs.paraphrased.len() != eval.len() {
        return Err(Error::Shape(format!(
            "{} paraphrased sentences for {} eval sentences",
            inputs.paraphrased.len(),
            eval.len()
        )));
    }
    let tree = SeedTree::new(seed);
    let mut rows = Vec::new();

    let clean: Vec<TokenPair<'_>> = eval.sentences.iter().map(|s| TokenPair { input: s.ids(), target: s.ids() }).collect();
    let para: Vec<TokenPair<'_>> = inputs
        .paraphrased
        .iter()
        .zip(&eval.sentences)
        .map(|(p, s)| TokenPair { input: p.ids(), target: s.ids() })
        .collect();
    for (name, pairs) in [("reconstruction/clean", &clean), ("reconstruction/paraphrased", &para)] {
        let acc = model.token_accuracy(pairs).map_err(|e| e.context(name))?;
        rows.push(PropertyRow {
            condition: name.into(),
            accuracy: Some(acc),
            ..Default::default()
        });
    }

    let ipoints = build_interpolation_space(eval, ispec, &mut tree.child("interpolation").rng())?;
    for (ai, &alpha) in ispec.alphas.iter().enumerate() {
        let condition = format!("interpolation/alpha={}", format_sig6(alpha));
        let probes: Vec<Probe<'_>> = ipoints
            .iter()
            .filter(|p| matches!(p.provenance, Provenance::Interpolation { alpha: a, .. } if a == alpha))
            .map(|p| interpolation_probe(p, eval))
            .collect();
        let mut row = measure_group(model, scorer, inputs.vocab, &probes, cfg, max_len, &tree.child("alpha").index(ai as u64), true)
            .map_err(|e| e.context(condition.clone()))?;
        row.condition = condition;
        row.value = Some(alpha);
        rows.push(row);
    }

    let nspec = if nspec.sigma.is_empty() {
        nspec.clone().with_sigma(per_dim_std(&eval.embeddings)?)
    } else {
        nspec.clone()
    };
    let npoints = build_noise_space(eval, &nspec, &mut tree.child("noise").rng())?;
    for (ni, &eta) in nspec.etas.iter().enumerate() {
        let condition = format!("noise/eta={}", format_sig6(eta));
        let probes: Vec<Probe<'_>> = npoints
            .iter()
            .filter(|p| matches!(p.provenance, Provenance::Noise { eta: x, .. } if x == eta))
            .map(|p| {
                let Provenance::Noise { anchor, .. } = p.provenance else { unreachable!() };
                Probe {
                    embedding: &p.embedding,
                    anchor: &eval.embeddings[anchor],
                }
            })
            .collect();
        let mut row = measure_group(model, scorer, inputs.vocab, &probes, cfg, max_len, &tree.child("eta").index(ni as u64), true)
            .map_err(|e| e.context(condition.clone()))?;
        row.condition = condition;
        row.value = Some(eta);
        rows.push(row);
    }

    let mut topic_points = Vec::new();
    let mut topic_labels = Vec::new();
    for (ti, topic) in inputs.topics.iter().enumerate() {
        let condition = format!("topic/{}", topic.label);
        let max_model = model.config().max_len;
        let sentences: Vec<Sentence> = topic.sentences.iter().map(|t| crate::corpus::encode_sentence(inputs.vocab, t, max_model)).collect();
        let vertices = embed_all(model, &sentences).map_err(|e| e.context(condition.clone()))?;
        let hull = convex_hull_samples(&vertices, cfg.hull_samples, &mut tree.child("hull").index(ti as u64).rng())
            .map_err(|e| e.context(condition.clone()))?;
        let probes: Vec<Probe<'_>> = hull.iter().map(|h| Probe { embedding: &h.embedding, anchor: &h.embedding }).collect();
        let mut row = measure_group(model, scorer, inputs.vocab, &probes, cfg, max_len, &tree.child("topic").index(ti as u64), false)
            .map_err(|e| e.context(condition.clone()))?;
        row.condition = condition;
        rows.push(row);
        for v in vertices {
            topic_points.push(v.0);
            topic_labels.push(topic.label.clone());
        }
    }
    if inputs.topics.len() >= 2 {
        let c = clustering_scores(&topic_points, &topic_labels).map_err(|e| e.context("clustering"))?;
        rows.push(PropertyRow {
            condition: "clustering".into(),
            silhouette: Some(c.silhouette),
            davies_bouldin: Some(c.davies_bouldin),
            calinski_harabasz: Some(c.calinski_harabasz),
            ..Default::default()
        });
    }

    let mut metadata = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        metadata.insert(k.to_string(), v);
    };
    put("schema_version", REPORT_SCHEMA_VERSION.to_string());
    put("model_id", inputs.model_id.to_string());
    put("seed", seed.to_string());
    put("eval_sentences", eval.len().to_string());
    put("n_samples", cfg.n_samples.to_string());
    put("n_jeffreys", cfg.n_jeffreys.to_string());
    put("n_pairs", ispec.n_pairs.to_string());
    put("n_anchors", nspec.n_anchors.to_string());
    put("hull_samples", cfg.hull_samples.to_string());
    put("decode_p", format_sig6(cfg.decode_p));
    put("max_decode_len", max_len.to_string());
    put("entropy_sampling", "nucleus p=1".into());
    put("entropy_per_token", "per-sentence -log p / tokens incl. EOS, then mean".into());
    put("jeffreys", "mean over probes of mean over sample pairs, vs alpha=1 / eta=0 anchor".into());
    put("alphas", ispec.alphas.iter().map(|a| format_sig6(*a)).collect::<Vec<_>>().join(" "));
    put("etas", nspec.etas.iter().map(|e| format_sig6(*e)).collect::<Vec<_>>().join(" "));
    Ok(PropertyReport { rows, metadata })
}

fn interpolation_probe<'a>(p: &'a SpacePoint, eval: &'a EvalSet) -> Probe<'a> {
    let Provenance::Interpolation { x1, .. } = p.provenance else { unreachable!() };
    Probe {
        embedding: &p.embedding,
        anchor: &eval.embeddings[x1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_sentence};
    use crate::model::ModelConfig;

    #[test]
    fn sig6_matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1.0297, "1.0297"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (999999.5, "1e+06"),
            (0.1 + 0.2, "0.3"),
            (f64::NAN, "nan"),
            (f64::NEG_INFINITY, "-inf"),
        ];
        for (x, want) in cases {
            assert_eq!(format_sig6(x), want, "{x}");
        }
    }

    fn setup() -> (Vocab, Model<f32>, Model<f32>, Vec<Sentence>) {
        let texts = ["the cat saw the dog", "a dog ran", "the bird sang a song", "we ate soup", "a red ball", "the sun set"];
        let vocab = build_vocab(&texts, 64, 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            max_len: 10,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            bottleneck_dim: 4,
            dropout_rate: 0.0,
            positional: Default::default(),
        };
        let model = Model::new(cfg.clone(), 1).unwrap();
        let scorer = Model::new(ModelConfig { bottleneck_dim: 0, ..cfg }, 2).unwrap();
        let sentences = texts.iter().map(|t| encode_sentence(&vocab, t, 10)).collect();
        (vocab, model, scorer, sentences)
    }

    fn run(seed: u64) -> PropertyReport {
        let (vocab, model, scorer, sentences) = setup();
        let eval = EvalSet::new(&model, sentences.clone()).unwrap();
        let topics = vec![
            TopicSet {
                label: "animals".into(),
                sentences: vec!["the cat".into(), "a dog".into(), "the bird".into()],
            },
            TopicSet {
                label: "food".into(),
                sentences: vec!["we ate soup".into(), "a red ball".into(), "soup".into()],
            },
        ];
        let inputs = SuiteInputs {
            vocab: &vocab,
            eval: &eval,
            paraphrased: &sentences,
            topics: &topics,
            model_id: "tiny",
        };
        let ispec = InterpolationSpec { alphas: vec![0.5, 1.0], n_pairs: 2 };
        let nspec = NoiseSpec { etas: vec![0.0, 2.0], n_anchors: 2, ..Default::default() };
        let cfg = SuiteConfig {
            n_samples: 4,
            n_jeffreys: 4,
            hull_samples: 2,
            ..Default::default()
        };
        run_property_suite(&model, &scorer, &inputs, &ispec, &nspec, &cfg, seed).unwrap()
    }

    #[test]
    fn suite_layout_and_determinism() {
        let r = run(5);
        let names: Vec<&str> = r.rows.iter().map(|r| r.condition.as_str()).collect();
        assert_eq!(
            names,
            [
                "reconstruction/clean",
                "reconstruction/paraphrased",
                "interpolation/alpha=0.5",
                "interpolation/alpha=1",
                "noise/eta=0",
                "noise/eta=2",
                "topic/animals",
                "topic/food",
                "clustering"
            ]
        );
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + names.len());
        assert!(csv.lines().all(|l| l.split(',').count() == REPORT_COLUMNS.len()));
        assert_eq!(csv, run(5).to_csv());
        assert_ne!(csv, run(6).to_csv());

        let clean = r.row("reconstruction/clean").unwrap().accuracy.unwrap();
        assert_eq!(clean, r.row("reconstruction/paraphrased").unwrap().accuracy.unwrap());
        for row in &r.rows {
            if let Some(h) = row.entropy {
                assert!(h >= 0.0);
            }
        }
        // The anchor conditions compare a distribution with itself.
        let j1 = r.row("interpolation/alpha=1").unwrap().jeffreys.unwrap();
        let j0 = r.row("noise/eta=0").unwrap().jeffreys.unwrap();
        assert!(j1.abs() < 1.0 && j0.abs() < 1.0, "{j1} {j0}");
        assert_eq!(r.metadata["n_samples"], "4");
    }

    #[test]
    fn mismatched_paraphrases_are_rejected() {
        let (vocab, model, scorer, sentences) = setup();
        let eval = EvalSet::new(&model, sentences.clone()).unwrap();
        let inputs = SuiteInputs {
            vocab: &vocab,
            eval: &eval,
            paraphrased: &sentences[..2],
            topics: &[],
            model_id: "tiny",
        };
        let err = run_property_suite(&model, &scorer, &inputs, &InterpolationSpec::default(), &NoiseSpec::default(), &SuiteConfig::default(), 0);
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
