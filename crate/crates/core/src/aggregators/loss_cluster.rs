use rayon::prelude::*;

use super::{ordered, Aggregate, SelectionReport, Submission};
use crate::error::{FedError, Result};
use crate::math::{mean_of, nan_last_cmp, ParamVector};

/// Loss of a candidate global model on the server's trusted filtering data.
pub type LossFn<'a> = dyn Fn(&ParamVector) -> Result<f64> + Sync + 'a;

const MAX_LLOYD_ITERATIONS: usize = 100;

/// Splits scalar losses into a low and a high group with 1-d 2-means.
///
/// Centres start at the minimum and maximum finite loss; values go to the
/// nearer centre (ties to the low one), centres move to their cluster means,
/// and this repeats until assignments stop changing. With `single_pass`
/// only the initial assignment is made. Non-finite losses are placed in the
/// high group without taking part in the clustering.
///
/// Returns positions into `losses`, each group in ascending order.
pub fn two_means_split(losses: &[f64], single_pass: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if losses.is_empty() {
        return Err(FedError::Empty("loss values"));
    }
    let finite: Vec<usize> = (0..losses.len())
        .filter(|&i| losses[i].is_finite())
        .collect();
    let mut high: Vec<usize> = (0..losses.len())
        .filter(|&i| !losses[i].is_finite())
        .collect();
    if finite.is_empty() {
        return Err(FedError::Defense(format!(
            "all {} server losses are non-finite",
            losses.len()
        )));
    }

    let mut low_center = finite
        .iter()
        .map(|&i| losses[i])
        .fold(f64::INFINITY, f64::min);
    let mut high_center = finite
        .iter()
        .map(|&i| losses[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let assign = |lc: f64, hc: f64| -> Vec<bool> {
        finite
            .iter()
            .map(|&i| (losses[i] - lc).abs() <= (losses[i] - hc).abs())
            .collect()
    };
    let mut is_low = assign(low_center, high_center);
    if !single_pass {
        for _ in 0..MAX_LLOYD_ITERATIONS {
            if let Some(c) = cluster_mean(&finite, &is_low, losses, true) {
                low_center = c;
            }
            if let Some(c) = cluster_mean(&finite, &is_low, losses, false) {
                high_center = c;
            }
            let next = assign(low_center, high_center);
            if next == is_low {
                break;
            }
            is_low = next;
        }
    }

    let mut low = Vec::new();
    for (&i, &l) in finite.iter().zip(&is_low) {
        if l {
            low.push(i);
        } else {
            high.push(i);
        }
    }
    high.sort_unstable();
    Ok((low, high))
}

/// Running mean of one cluster; `None` when it is empty.
fn cluster_mean(finite: &[usize], is_low: &[bool], losses: &[f64], want_low: bool) -> Option<f64> {
    let mut mean = 0.0;
    let mut count = 0.0;
    for (&i, &l) in finite.iter().zip(is_low) {
        if l == want_low {
            count += 1.0;
            mean += (losses[i] - mean) / count;
        }
    }
    (count > 0.0).then_some(mean)
}

/// Scores every submission by its server-side loss, keeps the low-loss
/// group (or the `k_t_override` lowest) and averages it unweighted.
pub fn agg_loss_cluster(
    subs: &[Submission],
    filter_loss: &LossFn<'_>,
    k_t_override: Option<usize>,
    single_pass: bool,
) -> Result<Aggregate> {
    let subs = ordered(subs)?;
    let losses: Vec<f64> = subs
        .par_iter()
        .map(|s| filter_loss(&s.model))
        .collect::<Result<_>>()?;
    select_low_loss(&subs, losses, k_t_override, single_pass)
}

/// Same as [`agg_loss_cluster`] with the losses already evaluated.
/// `losses[i]` belongs to `subs[i]`.
pub fn agg_loss_cluster_with_losses(
    subs: &[Submission],
    losses: &[f64],
    k_t_override: Option<usize>,
    single_pass: bool,
) -> Result<Aggregate> {
    if losses.len() != subs.len() {
        return Err(FedError::DimensionMismatch {
            expected: subs.len(),
            actual: losses.len(),
        });
    }
    let mut paired: Vec<(&Submission, f64)> = subs.iter().zip(losses.iter().copied()).collect();
    paired.sort_by_key(|(s, _)| s.client_id);
    let losses = paired.iter().map(|p| p.1).collect();
    let subs = ordered(subs)?;
    select_low_loss(&subs, losses, k_t_override, single_pass)
}

fn select_low_loss(
    subs: &[&Submission],
    losses: Vec<f64>,
    k_t_override: Option<usize>,
    single_pass: bool,
) -> Result<Aggregate> {
    let keep: Vec<usize> = match k_t_override {
        Some(k) => {
            if k == 0 || k > subs.len() {
                return Err(FedError::config(format!(
                    "k_t_override must be in 1..={}, got {k}",
                    subs.len()
                )));
            }
            let mut idx: Vec<usize> = (0..subs.len()).collect();
            idx.sort_by(|&a, &b| nan_last_cmp(&losses[a], &losses[b]).then(a.cmp(&b)));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        None => two_means_split(&losses, single_pass)?.0,
    };

    let models: Vec<&ParamVector> = keep.iter().map(|&i| &subs[i].model).collect();
    let report = SelectionReport {
        selected_ids: keep.iter().map(|&i| subs[i].client_id).collect(),
        scores: Some(subs.iter().map(|s| s.client_id).zip(losses).collect()),
    };
    Ok((mean_of(&models)?, report))
}
