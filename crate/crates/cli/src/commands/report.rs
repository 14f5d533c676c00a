use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use v2t_core::eval::{PropertyRow, REPORT_COLUMNS, REPORT_SCHEMA_VERSION};

use super::eval::{metric, CURVE_METRICS, SWEEPS};
use super::{read_json, to_json};
use crate::error::{CliError, CliResult};
use crate::fsutil::{require_file, OutputLock, Staging};
use crate::svg::{LineChart, Series};

/// One evaluated model, loaded from an `eval/<tag>` directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub tag: String,
    pub metadata: BTreeMap<String, String>,
    /// Data lines of `report.csv`, verbatim.
    pub lines: Vec<String>,
    pub rows: Vec<PropertyRow>,
}

fn cell(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| format!("not a number: {s:?}"))
}

fn parse_rows(text: &str, path: &Path) -> CliResult<(Vec<String>, Vec<PropertyRow>)> {
    let bad = |m: String| CliError::schema(format!("{}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
    if header != REPORT_COLUMNS {
        return Err(bad(format!("unexpected columns {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let v = |i: usize| cell(&rec[i]).map_err(bad);
        rows.push(PropertyRow {
            condition: rec[0].to_string(),
            value: v(1)?,
            accuracy: v(2)?,
            entropy: v(3)?,
            entropy_per_token: v(4)?,
            mean_n_tokens: v(5)?,
            mean_max_word_repeat: v(6)?,
            mean_lm_llh: v(7)?,
            mean_lm_llh_per_token: v(8)?,
            jeffreys: v(9)?,
            silhouette: v(10)?,
            davies_bouldin: v(11)?,
            calinski_harabasz: v(12)?,
        });
    }
    let lines: Vec<String> = text.lines().skip(1).map(str::to_string).collect();
    if lines.len() != rows.len() {
        return Err(bad("multi-line fields are not supported".into()));
    }
    Ok((lines, rows))
}

impl Run {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let (csv_path, json_path) = (dir.join("report.csv"), dir.join("report.json"));
        require_file(&csv_path, "report")?;
        require_file(&json_path, "report metadata")?;
        let metadata: BTreeMap<String, String> = read_json(&json_path)?;
        let version = metadata
            .get("schema_version")
            .ok_or_else(|| CliError::schema(format!("{}: no schema_version", json_path.display())))?;
        if version.parse::<u32>().ok() != Some(REPORT_SCHEMA_VERSION) {
            return Err(CliError::schema(format!(
                "{}: schema version {version}, this build reads {REPORT_SCHEMA_VERSION}",
                json_path.display()
            )));
        }
        let text = fs::read_to_string(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
        let (lines, rows) = parse_rows(&text, &csv_path)?;
        let tag = metadata.get("model_id").cloned().unwrap_or_else(|| {
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        });
        Ok(Self {
            dir: dir.to_path_buf(),
            tag,
            metadata,
            lines,
            rows,
        })
    }

    pub fn bottleneck(&self) -> Option<f64> {
        self.metadata.get("bottleneck")?.parse().ok()
    }

    fn family(&self) -> String {
        self.metadata.get("family").cloned().unwrap_or_else(|| self.tag.clone())
    }

    fn row(&self, condition: &str) -> Option<&PropertyRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Long-format CSV: the report columns prefixed by `model_tag`.
pub fn merge(runs: &[Run]) -> CliResult<String> {
    let mut seen = BTreeMap::new();
    for r in runs {
        if let Some(prev) = seen.insert(r.tag.clone(), r.dir.clone()) {
            return Err(CliError::input(format!(
                "model tag {} appears in both {} and {}",
                r.tag,
                prev.display(),
                r.dir.display()
            )));
        }
    }
    let mut out = format!("model_tag,{}\n", REPORT_COLUMNS.join(","));
    for r in runs {
        let tag = csv_field(&r.tag);
        for line in &r.lines {
            out.push_str(&tag);
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Families plotted against bottleneck size, one series each.
fn by_bottleneck(runs: &[Run], condition: &str, name: &str) -> Vec<Series> {
    let mut fams: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in runs {
        if let (Some(b), Some(y)) = (r.bottleneck(), r.row(condition).and_then(|row| metric(row, name))) {
            fams.entry(r.family()).or_default().push((b, y));
        }
    }
    fams.into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect()
}

fn plots(runs: &[Run]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut accuracy = by_bottleneck(runs, "reconstruction/clean", "accuracy");
    for s in &mut accuracy {
        s.name.push_str(" (clean)");
    }
    for mut s in by_bottleneck(runs, "reconstruction/paraphrased", "accuracy") {
        s.name.push_str(" (paraphrased)");
        accuracy.push(s);
    }
    out.push(("accuracy_vs_bottleneck.svg".to_string(), chart("accuracy vs bottleneck", "bottleneck", "accuracy", accuracy)));
    for name in ["silhouette", "davies_bouldin", "calinski_harabasz"] {
        let series = by_bottleneck(runs, "clustering", name);
        out.push((format!("{name}_vs_bottleneck.svg"), chart(&format!("{name} vs bottleneck"), "bottleneck", name, series)));
    }
    for (prefix, axis) in SWEEPS {
        for (name, _) in CURVE_METRICS {
            let series = runs
                .iter()
                .map(|r| Series {
                    name: r.tag.clone(),
                    points: r
                        .rows
                        .iter()
                        .filter(|row| row.condition.starts_with(prefix))
                        .filter_map(|row| Some((row.value?, metric(row, name)?)))
                        .collect(),
                })
                .collect();
            let file = format!("{}_{name}.svg", prefix.trim_end_matches('/'));
            out.push((file, chart(&format!("{name} vs {axis}"), axis, name, series)));
        }
    }
    out
}

fn chart(title: &str, x: &str, y: &str, series: Vec<Series>) -> String {
    LineChart {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        series,
        references: Vec::new(),
    }
    .render()
}

#[derive(Debug, Serialize)]
struct Summary {
    schema_version: u32,
    runs: Vec<(String, String)>,
    rows: usize,
}

fn is_report_output(name: &str) -> bool {
    name == ".lock" || name == "comparison.csv" || name == "comparison.json" || name.ends_with(".svg")
}

pub fn run(run_dirs: &[PathBuf], out: &Path, with_plots: bool) -> CliResult<()> {
    if run_dirs.is_empty() {
        return Err(CliError::input("report needs at least one eval run directory"));
    }
    let runs = run_dirs.iter().map(|d| Run::load(d)).collect::<CliResult<Vec<_>>>()?;
    let merged = merge(&runs)?;
    if out.is_dir() {
        for e in fs::read_dir(out).map_err(|e| CliError::io(out, e))? {
            let name = e.map_err(|e| CliError::io(out, e))?.file_name().to_string_lossy().into_owned();
            if !is_report_output(&name) {
                return Err(CliError::input(format!(
                    "{} holds other files ({name}); choose an empty or report-only directory",
                    out.display()
                )));
            }
        }
    }
    let _lock = OutputLock::acquire(out)?;
    let stage = Staging::new(out)?;
    stage.write("comparison.csv", &merged)?;
    let summary = Summary {
        schema_version: REPORT_SCHEMA_VERSION,
        runs: runs.iter().map(|r| (r.tag.clone(), r.dir.display().to_string())).collect(),
        rows: runs.iter().map(|r| r.rows.len()).sum(),
    };
    stage.write("comparison.json", to_json(&summary))?;
    if with_plots {
        for (name, svg) in plots(&runs) {
            stage.write(&name, svg)?;
        }
    }
    // The lock file lives in `out`; keep it out of the swap.
    for e in fs::read_dir(out).map_err(|e| CliError::io(out, e))? {
        let p = e.map_err(|e| CliError::io(out, e))?.path();
        if p.file_name().is_some_and(|n| n != ".lock") {
            fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }
    stage.commit()?;
    info!("merged {} runs ({} rows) -> {}", runs.len(), summary.rows, out.join("comparison.csv").display());
    Ok(())
}
