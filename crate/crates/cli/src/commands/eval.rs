use log::info;
use v2t_core::augment::Paraphraser;
use v2t_core::corpus::{encode_sentence, Sentence};
use v2t_core::eval::{
    fluency_metrics, format_sig6, read_topics, run_property_suite, EvalSet, PropertyReport, PropertyRow, SuiteInputs,
};
use v2t_core::model::{load_checkpoint, load_checkpoint_expecting, Model};
use v2t_core::rng::SeedTree;

use super::{load_grammar, model_dir, pair_stem, PreparedCorpus};
use crate::config::ExperimentConfig;
use crate::error::{artifact, CliError, CliResult};
use crate::fsutil::{require_file, OutputLock, Staging};
use crate::svg::{LineChart, Reference, Series};

/// Metrics plotted against alpha and eta; the fluency ones get a corpus reference line.
pub const CURVE_METRICS: [(&str, bool); 7] = [
    ("entropy", false),
    ("entropy_per_token", false),
    ("mean_n_tokens", true),
    ("mean_max_word_repeat", true),
    ("mean_lm_llh", true),
    ("mean_lm_llh_per_token", true),
    ("jeffreys", false),
];

pub fn metric(row: &PropertyRow, name: &str) -> Option<f64> {
    match name {
        "value" => row.value,
        "accuracy" => row.accuracy,
        "entropy" => row.entropy,
        "entropy_per_token" => row.entropy_per_token,
        "mean_n_tokens" => row.mean_n_tokens,
        "mean_max_word_repeat" => row.mean_max_word_repeat,
        "mean_lm_llh" => row.mean_lm_llh,
        "mean_lm_llh_per_token" => row.mean_lm_llh_per_token,
        "jeffreys" => row.jeffreys,
        "silhouette" => row.silhouette,
        "davies_bouldin" => row.davies_bouldin,
        "calinski_harabasz" => row.calinski_harabasz,
        _ => None,
    }
}

/// `(prefix, axis)` of the two control-space sweeps.
pub const SWEEPS: [(&str, &str); 2] = [("interpolation/", "alpha"), ("noise/", "eta")];

fn curve(rows: &[PropertyRow], prefix: &str, name: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.condition.starts_with(prefix))
        .filter_map(|r| Some((r.value?, metric(r, name)?)))
        .collect()
}

fn plots(report: &PropertyReport, tag: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (prefix, axis) in SWEEPS {
        for (name, with_ref) in CURVE_METRICS {
            let references = report
                .metadata
                .get(&format!("reference.{name}"))
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|_| with_ref)
                .map(|y| Reference {
                    name: "eval corpus".into(),
                    y,
                })
                .into_iter()
                .collect();
            let chart = LineChart {
                title: format!("{name} vs {axis}"),
                x_label: axis.into(),
                y_label: name.into(),
                series: vec![Series {
                    name: tag.into(),
                    points: curve(&report.rows, prefix, name),
                }],
                references,
            };
            out.push((format!("{}_{name}.svg", prefix.trim_end_matches('/')), chart.render()));
        }
    }
    out
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let corpus = PreparedCorpus::load(cfg)?;
    let seed = cfg.global_seed();
    let tag = cfg.model_tag();
    let ckpt = model_dir(cfg, &tag).join("model.ckpt");
    require_file(&ckpt, "model checkpoint (run `v2t train` first)")?;
    let scorer_ckpt = model_dir(cfg, &cfg.eval.scorer).join("model.ckpt");
    require_file(
        &scorer_ckpt,
        "fluency scorer checkpoint (train one with `--mode identity --bottleneck 0`)",
    )?;
    let topics_path = cfg.eval.topics.clone().or_else(|| Some(corpus.topics_path()).filter(|p| p.is_file()));

    let expected = cfg.model_config(corpus.vocab.len());
    let model = load_checkpoint_expecting(&ckpt, &expected).map_err(artifact)?.model;
    let scorer: Model<f32> = load_checkpoint(&scorer_ckpt).map_err(artifact)?.model;
    let sc = scorer.config();
    if sc.vocab_size != corpus.vocab.len() || sc.max_len != expected.max_len {
        return Err(CliError::mismatch(format!(
            "scorer {} has vocab {} / max_len {}, corpus needs {} / {}",
            scorer_ckpt.display(),
            sc.vocab_size,
            sc.max_len,
            corpus.vocab.len(),
            expected.max_len
        )));
    }
    let topics = match &topics_path {
        Some(p) => read_topics(p)?,
        None => Vec::new(),
    };

    let max_len = expected.max_len;
    let sentences: Vec<Sentence> = corpus.eval.iter().map(|t| encode_sentence(&corpus.vocab, t, max_len)).collect();
    let grammar = load_grammar(cfg)?;
    let para = Paraphraser::new(&grammar, max_len);
    let tree = SeedTree::new(seed).child("eval-paraphrase");
    let paraphrased: Vec<Sentence> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| para.paraphrase(&corpus.vocab, s, cfg.eval.paraphrase_temperature, &mut tree.index(i as u64).rng()))
        .collect();
    let eval = EvalSet::new(&model, sentences)?;
    let inputs = SuiteInputs {
        vocab: &corpus.vocab,
        eval: &eval,
        paraphrased: &paraphrased,
        topics: &topics,
        model_id: &tag,
    };
    info!("running property suite for {tag} on {} eval sentences", eval.len());
    let mut report = run_property_suite(
        &model,
        &scorer,
        &inputs,
        &cfg.interpolation_spec(),
        &cfg.noise_spec(),
        &cfg.suite_config(),
        seed,
    )?;

    let reference = fluency_metrics(&eval.sentences, &scorer)?;
    let md = &mut report.metadata;
    md.insert("reference.mean_n_tokens".into(), format_sig6(reference.mean_n_tokens));
    md.insert("reference.mean_max_word_repeat".into(), format_sig6(reference.mean_max_word_repeat));
    md.insert("reference.mean_lm_llh".into(), format_sig6(reference.mean_lm_llh));
    md.insert("reference.mean_lm_llh_per_token".into(), format_sig6(reference.mean_lm_llh_per_token));
    md.insert("bottleneck".into(), expected.bottleneck_dim.to_string());
    md.insert("family".into(), pair_stem(cfg.train.mode, cfg.augment.dropout_p));
    md.insert("checkpoint_step".into(), model.step().to_string());
    md.insert("scorer".into(), cfg.eval.scorer.clone());
    md.insert(
        "topics".into(),
        topics_path.map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
    );

    let dir = cfg.eval_dir().join(&tag);
    let _lock = OutputLock::acquire(&cfg.out)?;
    let stage = Staging::new(&dir)?;
    stage.write("report.csv", report.to_csv())?;
    stage.write("report.json", report.metadata_json())?;
    if cfg.eval.plots {
        for (name, svg) in plots(&report, &tag) {
            stage.write(&name, svg)?;
        }
    }
    stage.commit_replace()?;
    info!("wrote {}", dir.join("report.csv").display());
    Ok(())
}
