//! The simulation loop: broadcast, local training, attack, aggregation,
//! centralized evaluation.
//!
//! RNG streams per experiment seed: client `i` trains with stream `i`, the
//! server uses stream `N`, and client `i`'s attack noise comes from stream
//! `N + 1 + i`. Data generation and splitting use reserved streams at the
//! top of the id range.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::aggregators::{aggregate, AggregatorKind, SelectionReport, Submission};
use crate::attacks::{apply_attack, flip_labels, AttackKind};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{load_idx, make_split, subsample_filter, synth_blobs, Dataset};
use crate::error::{FedError, Result};
use crate::math::{ParamVector, RngStream};
use crate::model::{self, init_params, local_train, Batch, ModelSpec, OptimizerState};

const TRAIN_DATA_STREAM: u64 = u64::MAX;
const TEST_DATA_STREAM: u64 = u64::MAX - 1;
const SPLIT_STREAM: u64 = u64::MAX - 2;
const FILTER_STREAM: u64 = u64::MAX - 3;

/// One simulated participant.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub partition: Batch,
    /// Label-flipped copy of `partition`, present for label-flipping clients.
    pub poisoned: Option<Batch>,
    pub malicious: bool,
    pub optimizer: OptimizerState,
    pub rng: RngStream,
    pub attack_rng: RngStream,
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub centralized_accuracy: f64,
    pub server_eval_loss: f64,
    /// Server-side losses of each submission, ascending client id, when the
    /// aggregator computed them.
    pub per_client_loss: Option<Vec<f64>>,
    pub selection: SelectionReport,
    pub attack_active: bool,
    /// The aggregator could not produce a model; the global model was kept.
    pub defense_failed: bool,
    pub wall_time: Duration,
}

/// Reports plus the final global model.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub final_model: ParamVector,
}

fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let ds = &config.dataset;
    match ds.kind {
        DatasetKind::Synthetic => {
            let train = synth_blobs(
                &mut RngStream::new(config.seed, TRAIN_DATA_STREAM),
                ds.train_size,
                ds.classes,
                ds.input_dim,
                ds.separation,
            )?;
            let test = synth_blobs(
                &mut RngStream::new(config.seed, TEST_DATA_STREAM),
                ds.test_size,
                ds.classes,
                ds.input_dim,
                ds.separation,
            )?;
            Ok((train, test))
        }
        DatasetKind::Idx => {
            let [ti, tl, si, sl] = ds.paths()?;
            let truncate = |d: Dataset, limit: Option<usize>| -> Result<Dataset> {
                match limit {
                    Some(l) if l < d.len() => {
                        let idx: Vec<usize> = (0..l).collect();
                        let name = d.name.clone();
                        let classes = d.num_classes;
                        Dataset::new(name, d.subset(&idx), classes)
                    }
                    _ => Ok(d),
                }
            };
            let train = truncate(load_idx(ti, tl)?, ds.train_limit)?;
            let test = truncate(load_idx(si, sl)?, ds.test_limit)?;
            if train.input_dim() != test.input_dim() {
                return Err(FedError::config(format!(
                    "train and test inputs differ in size ({} vs {})",
                    train.input_dim(),
                    test.input_dim()
                )));
            }
            Ok((train, test))
        }
    }
}

/// A running simulation.
pub struct Simulation {
    config: ExperimentConfig,
    spec: ModelSpec,
    clients: Vec<ClientState>,
    eval: Batch,
    filter: Batch,
    global: ParamVector,
    round: usize,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(config)?;
        let n = config.clients;
        let split = make_split(
            &train,
            &test,
            n,
            &mut RngStream::new(config.seed, SPLIT_STREAM),
        )?;
        let filter_idx = match config.filter_size {
            Some(m) => {
                subsample_filter(&split, m, &mut RngStream::new(config.seed, FILTER_STREAM))?
            }
            None => split.server_filter.clone(),
        };
        let num_classes = train.num_classes.max(test.num_classes);
        let spec = config.model.spec(train.input_dim(), num_classes);
        spec.validate()?;

        let malicious = config.malicious();
        let flips = config.attack.kind == AttackKind::LabelFlip;
        let clients = split
            .client_partitions
            .iter()
            .enumerate()
            .map(|(i, idx)| {
                let partition = train.subset(idx);
                let is_bad = malicious.contains(&i);
                let poisoned = if is_bad && flips {
                    Some(partition.with_labels(flip_labels(partition.labels(), num_classes))?)
                } else {
                    None
                };
                Ok(ClientState {
                    client_id: i,
                    partition,
                    poisoned,
                    malicious: is_bad,
                    optimizer: config.optimizer.state(spec.param_count()),
                    rng: RngStream::new(config.seed, i as u64),
                    attack_rng: RngStream::new(config.seed, (n + 1 + i) as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let global = init_params(&spec, &mut RngStream::new(config.seed, n as u64));
        Ok(Simulation {
            config: config.clone(),
            spec,
            clients,
            eval: test.subset(&split.server_eval),
            filter: test.subset(&filter_idx),
            global,
            round: 0,
        })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// The server's trusted filtering data.
    pub fn filter_batch(&self) -> &Batch {
        &self.filter
    }

    pub fn eval_batch(&self) -> &Batch {
        &self.eval
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Ground-truth malicious ids. Never handed to an aggregator.
    pub fn malicious_ids(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| c.malicious)
            .map(|c| c.client_id)
            .collect()
    }

    /// Loss of `params` on the trusted filtering data.
    pub fn filter_loss(&self, params: &ParamVector) -> Result<f64> {
        model::loss(params, &self.filter, &self.spec)
    }

    /// Every client's submission for the current round.
    pub fn client_submissions(&mut self) -> Result<Vec<Submission>> {
        let round = self.round;
        let cfg = &self.config;
        let spec = &self.spec;
        let global = &self.global;
        let train_one = |c: &mut ClientState| -> Result<Submission> {
            let active = c.malicious && cfg.attack.is_active(round);
            let data = match (&c.poisoned, active) {
                (Some(p), true) => p,
                _ => &c.partition,
            };
            let opt = if cfg.reset_optimizer {
                c.optimizer.reset()
            } else {
                c.optimizer.clone()
            };
            let (local, opt) = local_train(
                global,
                data,
                cfg.local_steps,
                cfg.batch_size,
                opt,
                &mut c.rng,
                spec,
            )?;
            c.optimizer = opt;
            let model = if c.malicious {
                apply_attack(&cfg.attack, round, &mut c.attack_rng, &local, global)?
            } else {
                local
            };
            Ok(Submission {
                client_id: c.client_id,
                model,
                num_samples: c.partition.len(),
            })
        };
        if cfg.parallel {
            self.clients.par_iter_mut().map(train_one).collect()
        } else {
            self.clients.iter_mut().map(train_one).collect()
        }
    }

    /// Runs one full round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let started = Instant::now();
        let subs = self.client_submissions()?;
        let mut report = self.finish_round(&subs)?;
        report.wall_time = started.elapsed();
        Ok(report)
    }

    /// Aggregates this round's submissions, advances the global model and
    /// evaluates it. `run_round` is `client_submissions` followed by this.
    pub fn finish_round(&mut self, subs: &[Submission]) -> Result<RoundReport> {
        let started = Instant::now();
        let round = self.round;

        let filter = &self.filter;
        let spec = &self.spec;
        let filter_loss = move |p: &ParamVector| model::loss(p, filter, spec);
        let (next, selection, defense_failed) =
            match aggregate(&self.config.aggregator, subs, Some(&filter_loss)) {
                Ok((model, selection)) => (model, selection, false),
                Err(FedError::Defense(_)) => {
                    (self.global.clone(), SelectionReport::default(), true)
                }
                Err(e) => return Err(e),
            };
        self.global = next;
        self.round += 1;

        let per_client_loss = match self.config.aggregator.kind {
            AggregatorKind::LossCluster => selection
                .scores
                .as_ref()
                .map(|s| s.iter().map(|&(_, v)| v).collect()),
            _ => None,
        };
        Ok(RoundReport {
            round,
            centralized_accuracy: model::accuracy(&self.global, &self.eval, &self.spec)?,
            server_eval_loss: model::loss(&self.global, &self.eval, &self.spec)?,
            per_client_loss,
            selection,
            attack_active: self.config.attack.is_active(round),
            defense_failed,
            wall_time: started.elapsed(),
        })
    }
}

/// Runs all configured rounds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(config)?;
    let mut reports = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        reports.push(sim.run_round()?);
    }
    Ok(ExperimentResult {
        reports,
        final_model: sim.global,
    })
}

/// Mean centralized accuracy over rounds `start_round..`, or `None` when
/// no such round exists.
pub fn post_attack_mean(reports: &[RoundReport], start_round: usize) -> Option<f64> {
    let tail: Vec<f64> = reports
        .iter()
        .filter(|r| r.round >= start_round)
        .map(|r| r.centralized_accuracy)
        .collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    // shifted so identical values give exactly that value and zero spread
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// One (defense, attack, dataset) cell of a grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub defense: String,
    pub attack: String,
    pub dataset: String,
    /// The cell's config, or why it could not be built.
    pub config: std::result::Result<ExperimentConfig, String>,
}

/// Outcome of one repeat of a cell.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub seed: u64,
    pub post_attack_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Table row: mean and sample std of the post-attack accuracy over repeats.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub defense: String,
    pub attack: String,
    pub dataset: String,
    pub runs: Vec<GridRun>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub error: Option<String>,
}

/// Runs every cell once per seed. `on_result` sees each finished run (for
/// writing result files); a failure there, or in the run, is recorded in
/// the row and the grid moves on.
pub fn run_grid(
    cells: &[GridCell],
    seeds: &[u64],
    mut on_result: impl FnMut(&GridCell, &ExperimentConfig, &ExperimentResult) -> Result<()>,
) -> Vec<GridRow> {
    cells
        .iter()
        .map(|cell| {
            let mut row = GridRow {
                defense: cell.defense.clone(),
                attack: cell.attack.clone(),
                dataset: cell.dataset.clone(),
                runs: Vec::new(),
                mean: None,
                std: None,
                error: None,
            };
            let base = match &cell.config {
                Ok(c) => c,
                Err(e) => {
                    row.error = Some(e.clone());
                    return row;
                }
            };
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                let outcome = run_experiment(&cfg).and_then(|res| {
                    on_result(cell, &cfg, &res)?;
                    Ok(post_attack_mean(&res.reports, cfg.attack.start_round))
                });
                row.runs.push(match outcome {
                    Ok(acc) => GridRun {
                        seed,
                        post_attack_accuracy: acc,
                        error: None,
                    },
                    Err(e) => GridRun {
                        seed,
                        post_attack_accuracy: None,
                        error: Some(e.to_string()),
                    },
                });
            }
            if let Some(e) = row.runs.iter().find_map(|r| r.error.clone()) {
                row.error = Some(e);
            } else {
                let accs: Vec<f64> = row
                    .runs
                    .iter()
                    .filter_map(|r| r.post_attack_accuracy)
                    .collect();
                if let Some((m, s)) = mean_std(&accs) {
                    row.mean = Some(m);
                    row.std = Some(s);
                }
            }
            row
        })
        .collect()
}
