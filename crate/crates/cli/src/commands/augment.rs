use log::info;
use serde::Serialize;
use v2t_core::augment::{
    bleu_histogram, build_pair_dataset, rtt_via_mt, rtt_via_paraphraser, write_pairs, write_records, Paraphraser,
    ParaphraseRecord, PairParams, RoundTrip,
};
use v2t_core::corpus::{encode_sentence, Sentence, SentenceDataset, Split};
use v2t_core::mt_client::{ApiKey, ClientConfig, TranslationClient};

use super::{load_grammar, pair_stem, to_json, PreparedCorpus};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::fsutil::{OutputLock, Staging};

#[derive(Debug, Serialize)]
struct PairInfo<'a> {
    mode: String,
    params: PairParams,
    seed: u64,
    n_pairs: usize,
    changed_fraction: f64,
    round_trip_source: &'a str,
}

fn round_trips(cfg: &ExperimentConfig, corpus: &PreparedCorpus) -> CliResult<(Vec<ParaphraseRecord>, String)> {
    let a = &cfg.augment;
    match a.mt_endpoint.as_deref().filter(|e| !e.is_empty()) {
        Some(endpoint) => {
            let cache = a.mt_cache.clone().unwrap_or_else(|| cfg.out.join("mt_cache"));
            let mut cc = ClientConfig::new(endpoint, cache);
            cc.decode_mode = a.mt_decode;
            cc.seed = cfg.global_seed();
            if let Some(k) = &a.mt_api_key {
                cc.api_key = ApiKey::new(k.clone());
            }
            let client = TranslationClient::new(cc)?;
            let records = rtt_via_mt(&corpus.train, &client)?;
            info!("round-tripped {} sentences through {endpoint} ({} requests)", records.len(), client.requests_sent());
            Ok((records, format!("mt:{}", a.mt_decode)))
        }
        None => {
            info!("no MT endpoint configured; using the synthetic paraphraser for round trips");
            let grammar = load_grammar(cfg)?;
            let p = Paraphraser::new(&grammar, cfg.corpus.max_len);
            let records = rtt_via_paraphraser(&corpus.train, &p, a.temperature, cfg.global_seed());
            Ok((records, format!("synthetic:T={}", a.temperature)))
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let corpus = PreparedCorpus::load(cfg)?;
    let seed = cfg.global_seed();
    let max_len = cfg.corpus.max_len;
    let params = cfg.augment.params();
    let ds = SentenceDataset::encode(&corpus.vocab, &corpus.train, max_len, Split::Train);

    let _lock = OutputLock::acquire(&cfg.out)?;
    let stage = Staging::new(&cfg.pairs_dir())?;
    let mut rtt: Option<(Vec<Sentence>, String)> = None;
    if cfg.augment.modes.iter().any(|m| m.uses_rtt()) {
        let (records, source) = round_trips(cfg, &corpus)?;
        write_records(&stage.path("rtt_records.tsv"), &records)?;
        let hist = bleu_histogram(&records, cfg.augment.bleu_bins)?;
        info!("round-trip BLEU: {:.1}% exactly 100", 100.0 * hist.exact_100_fraction());
        stage.write("rtt_bleu.json", to_json(&hist))?;
        let encoded = records.iter().map(|r| encode_sentence(&corpus.vocab, &r.round_trip, max_len)).collect();
        rtt = Some((encoded, source));
    }
    let mut seen = Vec::new();
    for &mode in &cfg.augment.modes {
        if seen.contains(&mode) {
            continue;
        }
        seen.push(mode);
        let rt = rtt.as_ref().filter(|_| mode.uses_rtt());
        let pairs = build_pair_dataset(&ds, mode, params, rt.map(|(s, _)| RoundTrip::Precomputed(s)), seed)?;
        let stem = pair_stem(mode, params.dropout_p);
        write_pairs(&stage.path(&format!("{stem}.tsv")), &pairs)?;
        let meta = PairInfo {
            mode: mode.to_string(),
            params,
            seed,
            n_pairs: pairs.len(),
            changed_fraction: pairs.changed_fraction(),
            round_trip_source: rt.map(|(_, s)| s.as_str()).unwrap_or("none"),
        };
        stage.write(&format!("{stem}.json"), to_json(&meta))?;
        info!("{mode}: {} pairs, {:.1}% changed", pairs.len(), 100.0 * meta.changed_fraction);
    }
    stage.commit()?;
    Ok(())
}

