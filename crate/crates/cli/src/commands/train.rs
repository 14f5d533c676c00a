use std::fs;

use log::{info, warn};
use serde::Serialize;
use v2t_core::augment::read_pairs;
use v2t_core::model::{fit, load_checkpoint_expecting, save_checkpoint, Adam, Model, ModelConfig, TrainConfig};
use v2t_core::Error;

use super::{model_dir, pair_file, to_json, PreparedCorpus};
use crate::config::ExperimentConfig;
use crate::error::{artifact, CliError, CliResult};
use crate::fsutil::{require_file, OutputLock, Staging};

#[derive(Debug, Serialize)]
struct TrainInfo<'a> {
    tag: &'a str,
    mode: String,
    pair_file: String,
    n_pairs: usize,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    num_parameters: usize,
    start_step: u64,
    final_step: u64,
    final_loss: Option<f64>,
}

const LOSS_HEADER: &str = "step,loss,lr\n";

/// Keeps the rows of an earlier run that precede `start`.
fn previous_losses(text: &str, start: u64) -> String {
    let mut out = String::from(LOSS_HEADER);
    for line in text.lines().skip(1) {
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if step.is_some_and(|s| s < start) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let corpus = PreparedCorpus::load(cfg)?;
    let pf = pair_file(cfg, cfg.train.mode);
    require_file(&pf, "pair file (run `v2t augment` for this mode first)")?;
    let pairs = read_pairs(&pf, &corpus.vocab, cfg.corpus.max_len)?;
    if pairs.is_empty() {
        return Err(CliError::input(format!("{} has no pairs", pf.display())));
    }
    let ids: Vec<_> = pairs.iter().map(|(i, t)| (i.ids().to_vec(), t.ids().to_vec())).collect();
    let mcfg = cfg.model_config(corpus.vocab.len());
    let tc = cfg.train_config();
    let tag = cfg.model_tag();
    let dir = model_dir(cfg, &tag);
    let ckpt = dir.join("model.ckpt");

    let _lock = OutputLock::acquire(&cfg.out)?;
    let (mut model, mut adam) = if ckpt.is_file() {
        let c = load_checkpoint_expecting(&ckpt, &mcfg).map_err(artifact)?;
        let adam = c.adam.unwrap_or_else(|| {
            warn!("{} has no optimizer state; resuming with fresh moments", ckpt.display());
            Adam::new(&c.model)
        });
        info!("resuming {tag} from step {}", c.model.step());
        (c.model, adam)
    } else {
        let m = Model::<f32>::new(mcfg.clone(), cfg.global_seed())?;
        let a = Adam::new(&m);
        (m, a)
    };
    let start = model.step();
    let target = cfg.train.steps;
    if start > target {
        return Err(CliError::mismatch(format!(
            "{} is at step {start}, beyond the requested {target} steps",
            ckpt.display()
        )));
    }

    let stage = Staging::new(&dir)?;
    let mut losses = match fs::read_to_string(dir.join("loss.csv")) {
        Ok(text) if start > 0 => previous_losses(&text, start),
        _ => String::from(LOSS_HEADER),
    };
    let schedule = tc.schedule();
    let every = cfg.train.checkpoint_every;
    let mut last_loss = None;
    let mut failure = None;
    while model.step() < target {
        let step = model.step();
        let next = ((step / every) + 1) * every;
        let n = next.min(target) - step;
        let r = fit(&mut model, &mut adam, &ids, &tc, n, |s, loss| {
            losses.push_str(&format!("{s},{loss:.6},{:.6e}\n", schedule.at(s)));
            last_loss = Some(loss);
            if (s + 1) % 100 == 0 {
                info!("{tag} step {} loss {loss:.4}", s + 1);
            }
            Ok(())
        });
        if let Err(e) = r {
            failure = Some(e);
            break;
        }
        if model.step() % every == 0 && model.step() < target {
            save_checkpoint(&stage.path(&format!("ckpt-{:06}.ckpt", model.step())), &model, Some(&adam))?;
        }
    }

    save_checkpoint(&stage.path("model.ckpt"), &model, Some(&adam))?;
    if target > 0 {
        stage.write("loss.csv", &losses)?;
    }
    let info = TrainInfo {
        tag: &tag,
        mode: cfg.train.mode.to_string(),
        pair_file: pf.display().to_string(),
        n_pairs: ids.len(),
        model: &mcfg,
        train: &tc,
        num_parameters: model.num_parameters(),
        start_step: start,
        final_step: model.step(),
        final_loss: last_loss,
    };
    stage.write("train.json", to_json(&info))?;
    stage.commit()?;
    match failure {
        Some(e @ Error::Training { .. }) => {
            warn!("kept the last good checkpoint at step {}", model.step());
            Err(e.into())
        }
        Some(e) => Err(e.into()),
        None => {
            info!("{tag}: {} steps done -> {}", model.step(), dir.display());
            Ok(())
        }
    }
}
