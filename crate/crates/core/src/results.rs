//! Per-round results files and run/grid summaries.
//!
//! A results file is a `#` header line carrying the tool version, config
//! hash and seed, a column-name line, then one comma-separated row per
//! round. Floats use 17 significant digits; per-client losses that were not
//! computed are left empty.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{FedError, Result};
use crate::orchestrator::{post_attack_mean, ExperimentResult, GridRow, RoundReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Round-trip-exact float text.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(s: &str) -> Option<f64> {
    s.parse().ok()
}

pub fn results_csv(config: &ExperimentConfig, reports: &[RoundReport]) -> String {
    let n = config.clients;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# fedsim {VERSION} config_hash={} seed={}",
        config.hash(),
        config.seed
    );
    out.push_str("round,accuracy,server_eval_loss,k_t,selected_ids,attack_active");
    for i in 0..n {
        let _ = write!(out, ",v_{i}");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&results_row(r, n));
        out.push('\n');
    }
    out
}

/// One data row, without the trailing newline.
pub fn results_row(r: &RoundReport, num_clients: usize) -> String {
    let selected: Vec<String> = r
        .selection
        .selected_ids
        .iter()
        .map(|i| i.to_string())
        .collect();
    let mut row = format!(
        "{},{},{},{},{},{}",
        r.round,
        format_float(r.centralized_accuracy),
        format_float(r.server_eval_loss),
        r.selection.k_t(),
        selected.join(";"),
        r.attack_active
    );
    for i in 0..num_clients {
        row.push(',');
        if let Some(v) = r.per_client_loss.as_ref().and_then(|l| l.get(i)) {
            row.push_str(&format_float(*v));
        }
    }
    row
}

/// A results row read back from text.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub round: usize,
    pub accuracy: f64,
    pub server_eval_loss: f64,
    pub k_t: usize,
    pub selected_ids: Vec<usize>,
    pub attack_active: bool,
    pub per_client_loss: Vec<Option<f64>>,
}

/// Parsed results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsFile {
    pub header: String,
    pub rows: Vec<ResultsRow>,
}

pub fn parse_results(text: &str) -> Result<ResultsFile> {
    let bad =
        |line: usize, what: &str| FedError::InvalidArgument(format!("results line {line}: {what}"));
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|l| l.starts_with('#'))
        .ok_or_else(|| bad(1, "missing # header"))?
        .to_string();
    lines.next().ok_or_else(|| bad(2, "missing column names"))?;
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let no = k + 3;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 6 {
            return Err(bad(no, "too few fields"));
        }
        let selected_ids = if f[4].is_empty() {
            Vec::new()
        } else {
            f[4].split(';')
                .map(|s| s.parse().map_err(|_| bad(no, "bad selected id")))
                .collect::<Result<_>>()?
        };
        rows.push(ResultsRow {
            round: f[0].parse().map_err(|_| bad(no, "bad round"))?,
            accuracy: parse_float(f[1]).ok_or_else(|| bad(no, "bad accuracy"))?,
            server_eval_loss: parse_float(f[2]).ok_or_else(|| bad(no, "bad loss"))?,
            k_t: f[3].parse().map_err(|_| bad(no, "bad k_t"))?,
            selected_ids,
            attack_active: f[5].parse().map_err(|_| bad(no, "bad attack flag"))?,
            per_client_loss: f[6..]
                .iter()
                .map(|s| if s.is_empty() { None } else { parse_float(s) })
                .collect(),
        });
    }
    Ok(ResultsFile { header, rows })
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FedError::io(dir, 0, e))?;
    tmp.write_all(contents)
        .map_err(|e| FedError::io(path, 0, e))?;
    tmp.persist(path)
        .map_err(|e| FedError::io(path, 0, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub defense: String,
    pub attack: String,
    pub rounds: usize,
    pub start_round: usize,
    pub post_attack_mean_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub defense_failures: usize,
    pub config: serde_json::Value,
}

impl RunSummary {
    pub fn new(config: &ExperimentConfig, result: &ExperimentResult) -> Self {
        RunSummary {
            version: VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            dataset: config.dataset.label(),
            defense: config.aggregator.kind.name().into(),
            attack: config.attack.kind.name().into(),
            rounds: config.rounds,
            start_round: config.attack.start_round,
            post_attack_mean_accuracy: post_attack_mean(&result.reports, config.attack.start_round),
            final_accuracy: result.reports.last().map(|r| r.centralized_accuracy),
            defense_failures: result.reports.iter().filter(|r| r.defense_failed).count(),
            config: config.canonical(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummaryRow {
    pub defense: String,
    pub attack: String,
    pub dataset: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: Vec<GridRunSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRunSummary {
    pub seed: u64,
    pub post_attack_accuracy: Option<f64>,
    pub error: Option<String>,
}

impl From<&GridRow> for GridSummaryRow {
    fn from(row: &GridRow) -> Self {
        GridSummaryRow {
            defense: row.defense.clone(),
            attack: row.attack.clone(),
            dataset: row.dataset.clone(),
            mean: row.mean,
            std: row.std,
            runs: row
                .runs
                .iter()
                .map(|r| GridRunSummary {
                    seed: r.seed,
                    post_attack_accuracy: r.post_attack_accuracy,
                    error: r.error.clone(),
                })
                .collect(),
            error: row.error.clone(),
        }
    }
}

/// `defense,attack,dataset,mean,std,runs,status` with one line per row.
pub fn grid_summary_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("defense,attack,dataset,mean,std,runs,status\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.defense,
            r.attack,
            r.dataset,
            opt(r.mean),
            opt(r.std),
            r.runs.len(),
            status
        );
    }
    out
}
