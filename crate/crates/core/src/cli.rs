//! Command implementations behind the `fedsim` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use crate::config::{parse_config, parse_config_str, ExperimentConfig};
use crate::error::{FedError, Result};
use crate::orchestrator::{run_experiment, run_grid, GridCell, GridRow};
use crate::results::{atomic_write, grid_summary_csv, results_csv, GridSummaryRow, RunSummary};

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated learning simulator with Byzantine clients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run a defense x attack x dataset grid with repeated seeds.
    Grid(GridArgs),
    /// Parse and validate a config without running it.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Results file; the summary goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of repeats per cell.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

/// Runs one experiment and writes its results file and summary. Nothing
/// is written if the config is invalid or the run fails.
pub fn cmd_run(args: &RunArgs) -> Result<RunSummary> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| FedError::config("no output path: pass --out or set `output`"))?;
    let result = run_experiment(&cfg)?;
    let summary = RunSummary::new(&cfg, &result);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    atomic_write(&out, results_csv(&cfg, &result.reports).as_bytes())?;
    atomic_write(&summary_path(&out), format!("{json}\n").as_bytes())?;
    Ok(summary)
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<ExperimentConfig> {
    parse_config(&args.config)
}

/// A parsed grid description.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub seeds: Vec<u64>,
    pub cells: Vec<GridCell>,
}

const GRID_KEYS: [&str; 6] = ["repeats", "seed", "base", "defenses", "attacks", "datasets"];

fn entries(root: &Table, key: &str) -> Result<Vec<Table>> {
    match root.get(key) {
        None => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::Table(t) => Ok(t.clone()),
                _ => Err(FedError::config(format!(
                    "every [[{key}]] entry must be a table"
                ))),
            })
            .collect(),
        Some(_) => Err(FedError::config(format!(
            "`{key}` must be an array of tables"
        ))),
    }
}

/// Takes `label` out of an entry, defaulting to its `kind`, and makes it
/// unique within `taken`.
fn take_label(entry: &mut Table, taken: &mut BTreeSet<String>) -> String {
    let base = match entry.remove("label") {
        Some(Value::String(s)) => s,
        _ => entry
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("default")
            .to_string(),
    };
    let mut label = base.clone();
    let mut k = 2;
    while !taken.insert(label.clone()) {
        label = format!("{base}_{k}");
        k += 1;
    }
    label
}

/// Parses a grid document:
///
/// ```toml
/// repeats = 3
/// seed = 1
/// [base]            # any experiment keys
/// rounds = 30
/// [base.dataset]
/// kind = "synthetic"
/// [[defenses]]      # aggregator tables, optional `label`
/// kind = "loss_cluster"
/// [[attacks]]       # merged over base.attack, optional `label`
/// kind = "sign_flip"
/// [[datasets]]      # optional; replaces base.dataset
/// kind = "synthetic"
/// ```
///
/// Cells whose config does not validate are kept with their error.
pub fn parse_grid_str(text: &str, base_dir: &Path) -> Result<GridSpec> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| FedError::config(e.to_string()))?;
    let unknown: Vec<&String> = root
        .keys()
        .filter(|k| !GRID_KEYS.contains(&k.as_str()))
        .collect();
    if !unknown.is_empty() {
        let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
        return Err(FedError::config(format!(
            "unknown keys: {}",
            names.join(", ")
        )));
    }
    let repeats = match root.get("repeats") {
        None => 3,
        Some(Value::Integer(r)) if *r >= 1 => *r as usize,
        Some(_) => return Err(FedError::config("repeats must be a positive integer")),
    };
    let seed = match root.get("seed") {
        None => 1,
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(_) => return Err(FedError::config("seed must be a non-negative integer")),
    };
    let base = match root.get("base") {
        None => Table::new(),
        Some(Value::Table(t)) => t.clone(),
        Some(_) => return Err(FedError::config("`base` must be a table")),
    };
    let defenses = entries(&root, "defenses")?;
    if defenses.is_empty() {
        return Err(FedError::config(
            "grid needs at least one [[defenses]] entry",
        ));
    }
    let mut attacks = entries(&root, "attacks")?;
    if attacks.is_empty() {
        attacks.push(Table::new());
    }
    let datasets = entries(&root, "datasets")?;
    let datasets: Vec<Option<Table>> = if datasets.is_empty() {
        vec![None]
    } else {
        datasets.into_iter().map(Some).collect()
    };

    let base_attack = match base.get("attack") {
        Some(Value::Table(t)) => t.clone(),
        _ => Table::new(),
    };
    let mut cells = Vec::new();
    let mut defense_labels = BTreeSet::new();
    let mut attack_labels = BTreeSet::new();
    let mut dataset_labels = BTreeSet::new();
    let base_attack_kind = base_attack
        .get("kind")
        .and_then(Value::as_str)
        .unwrap_or("none")
        .to_string();
    let attacks: Vec<(String, Table)> = attacks
        .into_iter()
        .map(|mut a| {
            if !a.contains_key("kind") && !a.contains_key("label") {
                a.insert("label".into(), Value::String(base_attack_kind.clone()));
            }
            (take_label(&mut a, &mut attack_labels), a)
        })
        .collect();
    let datasets: Vec<(Option<String>, Option<Table>)> = datasets
        .into_iter()
        .map(|d| match d {
            Some(mut t) => {
                let label = match t.get("name").and_then(Value::as_str) {
                    Some(n) if !t.contains_key("label") => n.to_string(),
                    _ => take_label(&mut t, &mut dataset_labels),
                };
                t.remove("label");
                (Some(label), Some(t))
            }
            None => (None, None),
        })
        .collect();

    for mut defense in defenses {
        let defense_label = take_label(&mut defense, &mut defense_labels);
        for (attack_label, attack) in &attacks {
            for (dataset_label, dataset) in &datasets {
                let mut table = base.clone();
                table.insert("aggregator".into(), Value::Table(defense.clone()));
                let mut merged_attack = base_attack.clone();
                merged_attack.extend(attack.clone());
                table.insert("attack".into(), Value::Table(merged_attack));
                if let Some(d) = dataset {
                    table.insert("dataset".into(), Value::Table(d.clone()));
                }
                let config = toml::to_string(&table)
                    .map_err(|e| FedError::config(e.to_string()))
                    .and_then(|text| parse_config_str(&text, base_dir))
                    .map(|mut c| {
                        c.seed = seed;
                        c
                    })
                    .map_err(|e| e.to_string());
                let dataset = match (dataset_label, &config) {
                    (Some(l), _) => l.clone(),
                    (None, Ok(c)) => c.dataset.label(),
                    (None, Err(_)) => table
                        .get("dataset")
                        .and_then(|d| d.get("name").or_else(|| d.get("kind")))
                        .and_then(Value::as_str)
                        .unwrap_or("unknown")
                        .to_string(),
                };
                cells.push(GridCell {
                    defense: defense_label.clone(),
                    attack: attack_label.clone(),
                    dataset,
                    config,
                });
            }
        }
    }
    Ok(GridSpec {
        seeds: (0..repeats as u64).map(|r| seed + r).collect(),
        cells,
    })
}

pub fn parse_grid(path: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(path).map_err(|e| FedError::io(path, 0, e))?;
    parse_grid_str(&text, path.parent().unwrap_or(Path::new(".")))
}

/// File name of one cell/seed results file inside the grid directory.
pub fn cell_file_name(cell: &GridCell, seed: u64) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '-'
                }
            })
            .collect()
    };
    format!(
        "{}__{}__{}__seed{seed}.csv",
        clean(&cell.defense),
        clean(&cell.attack),
        clean(&cell.dataset)
    )
}

/// Runs a grid, writing one results file per cell and seed plus
/// `summary.csv` and `summary.json`. Returns the rows; callers treat any
/// row with an error as a failed grid.
pub fn cmd_grid(args: &GridArgs) -> Result<Vec<GridRow>> {
    let mut spec = parse_grid(&args.config)?;
    if let Some(seed) = args.seed {
        let n = spec.seeds.len() as u64;
        spec.seeds = (0..n).map(|r| seed + r).collect();
    }
    if let Some(r) = args.repeats {
        if r == 0 {
            return Err(FedError::config("--repeats must be >= 1"));
        }
        let first = spec.seeds[0];
        spec.seeds = (0..r as u64).map(|k| first + k).collect();
    }
    fs::create_dir_all(&args.out).map_err(|e| FedError::io(&args.out, 0, e))?;
    let rows = run_grid(&spec.cells, &spec.seeds, |cell, cfg, result| {
        let path = args.out.join(cell_file_name(cell, cfg.seed));
        atomic_write(&path, results_csv(cfg, &result.reports).as_bytes())
    });
    let summary: Vec<GridSummaryRow> = rows.iter().map(GridSummaryRow::from).collect();
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    atomic_write(
        &args.out.join("summary.csv"),
        grid_summary_csv(&rows).as_bytes(),
    )?;
    atomic_write(
        &args.out.join("summary.json"),
        format!("{json}\n").as_bytes(),
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cells_are_defense_major() {
        let text = r#"
            repeats = 2
            seed = 7
            [base]
            rounds = 2
            [base.dataset]
            kind = "synthetic"
            [[defenses]]
            kind = "mean"
            [[defenses]]
            kind = "loss_cluster"
            [[attacks]]
            kind = "none"
            [[attacks]]
            kind = "sign_flip"
        "#;
        let spec = parse_grid_str(text, Path::new(".")).unwrap();
        assert_eq!(spec.seeds, vec![7, 8]);
        let order: Vec<(String, String)> = spec
            .cells
            .iter()
            .map(|c| (c.defense.clone(), c.attack.clone()))
            .collect();
        assert_eq!(
            order,
            vec![
                ("mean".into(), "none".into()),
                ("mean".into(), "sign_flip".into()),
                ("loss_cluster".into(), "none".into()),
                ("loss_cluster".into(), "sign_flip".into()),
            ]
        );
        assert!(spec.cells.iter().all(|c| c.config.is_ok()));
    }

    #[test]
    fn invalid_cells_keep_their_error() {
        let text = r#"
            [base.dataset]
            kind = "synthetic"
            [[defenses]]
            kind = "krum"
            f = 8
            [[defenses]]
            kind = "median"
        "#;
        let spec = parse_grid_str(text, Path::new(".")).unwrap();
        assert!(spec.cells[0].config.as_ref().unwrap_err().contains("N-f-2"));
        assert!(spec.cells[1].config.is_ok());
    }

    #[test]
    fn duplicate_labels_are_disambiguated() {
        let text = r#"
            [base.dataset]
            kind = "synthetic"
            [[defenses]]
            kind = "krum"
            f = 1
            [[defenses]]
            kind = "krum"
            f = 2
        "#;
        let spec = parse_grid_str(text, Path::new(".")).unwrap();
        assert_eq!(spec.cells[0].defense, "krum");
        assert_eq!(spec.cells[1].defense, "krum_2");
    }

    #[test]
    fn attack_entries_merge_over_base_attack() {
        let text = r#"
            [base]
            [base.dataset]
            kind = "synthetic"
            [base.attack]
            start_round = 4
            [[defenses]]
            kind = "mean"
            [[attacks]]
            kind = "gaussian_noise"
            sigma = 2.0
        "#;
        let spec = parse_grid_str(text, Path::new(".")).unwrap();
        let cfg = spec.cells[0].config.as_ref().unwrap();
        assert_eq!(cfg.attack.start_round, 4);
        assert_eq!(cfg.attack.sigma, 2.0);
    }

    #[test]
    fn unknown_grid_keys_are_rejected() {
        let err = parse_grid_str("bogus = 1\n[[defenses]]\nkind = \"mean\"\n", Path::new("."))
            .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
