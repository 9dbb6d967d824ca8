use super::{ordered, Aggregate, SelectionReport, Submission};
use crate::error::{FedError, Result};
use crate::math::{mean_of, nan_last_cmp, sq_euclidean, ParamVector};

/// `N - f - 2`, the number of neighbours each Krum score sums over.
pub(crate) fn neighbour_count(n: usize, f: usize) -> Result<usize> {
    match n.checked_sub(f + 2) {
        Some(m) if m >= 1 => Ok(m),
        _ => Err(FedError::config(format!(
            "krum requires N-f-2 >= 1 (N={n}, f={f})"
        ))),
    }
}

fn scores_of(subs: &[&Submission], f: usize) -> Result<Vec<f64>> {
    let n = subs.len();
    let m = neighbour_count(n, f)?;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_euclidean(&subs[i].model, &subs[j].model)?;
            // a NaN distance counts as infinitely far
            let d = if d.is_nan() { f64::INFINITY } else { d };
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist[i][j], j))
                .collect();
            others.sort_by(|a, b| nan_last_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
            others[..m].iter().map(|(d, _)| d).sum()
        })
        .collect())
}

/// Krum score of every submission, as `(client_id, score)` in ascending id
/// order.
pub fn krum_scores(subs: &[Submission], f: usize) -> Result<Vec<(usize, f64)>> {
    let subs = ordered(subs)?;
    let scores = scores_of(&subs, f)?;
    Ok(subs.iter().map(|s| s.client_id).zip(scores).collect())
}

/// Positions of the `k` lowest scores, ties toward the lower position.
fn lowest(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| nan_last_cmp(&scores[a], &scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// The single submission with the smallest Krum score.
pub fn agg_krum(subs: &[Submission], f: usize) -> Result<Aggregate> {
    agg_multi_krum(subs, f, 1)
}

/// Unweighted mean of the `k` submissions with the smallest Krum scores.
pub fn agg_multi_krum(subs: &[Submission], f: usize, k: usize) -> Result<Aggregate> {
    let subs = ordered(subs)?;
    let m = neighbour_count(subs.len(), f)?;
    if k == 0 || k > m {
        return Err(FedError::config(format!(
            "multi_krum requires 1 <= k <= N-f-2 (k={k}, N={}, f={f})",
            subs.len()
        )));
    }
    let scores = scores_of(&subs, f)?;
    let keep = lowest(&scores, k);
    let models: Vec<&ParamVector> = keep.iter().map(|&i| &subs[i].model).collect();
    let report = SelectionReport {
        selected_ids: keep.iter().map(|&i| subs[i].client_id).collect(),
        scores: Some(subs.iter().map(|s| s.client_id).zip(scores).collect()),
    };
    Ok((mean_of(&models)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subs_from(rows: &[Vec<f64>]) -> Vec<Submission> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| Submission {
                client_id: i,
                model: ParamVector::new(r.clone()),
                num_samples: 1,
            })
            .collect()
    }

    #[test]
    fn hand_enumerated_scores() {
        let subs = subs_from(&[vec![0.], vec![1.], vec![2.], vec![10.]]);
        let scores: Vec<f64> = krum_scores(&subs, 0)
            .unwrap()
            .into_iter()
            .map(|s| s.1)
            .collect();
        assert_eq!(scores, vec![5., 2., 5., 145.]);
        let (out, report) = agg_krum(&subs, 0).unwrap();
        assert_eq!(out, ParamVector::new(vec![1.]));
        assert_eq!(report.selected_ids, vec![1]);
    }

    #[test]
    fn identical_submissions_score_zero_and_pick_client_zero() {
        let subs = subs_from(&vec![vec![3., 4.]; 5]);
        assert!(krum_scores(&subs, 1).unwrap().iter().all(|s| s.1 == 0.0));
        let (_, report) = agg_krum(&subs, 1).unwrap();
        assert_eq!(report.selected_ids, vec![0]);
        let (out, report) = agg_multi_krum(&subs, 1, 2).unwrap();
        assert_eq!(out, ParamVector::new(vec![3., 4.]));
        assert_eq!(report.k_t(), 2);
    }

    #[test]
    fn far_outlier_is_never_selected() {
        let mut rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1, 1.0]).collect();
        rows.insert(2, vec![1e6, 1e6]);
        let subs = subs_from(&rows);
        for k in 1..=3 {
            let (_, report) = agg_multi_krum(&subs, 1, k).unwrap();
            assert!(!report.selected_ids.contains(&2));
        }
    }

    #[test]
    fn constraint_errors_name_n_and_f() {
        let subs = subs_from(&vec![vec![0.]; 4]);
        let msg = krum_scores(&subs, 3).unwrap_err().to_string();
        assert!(msg.contains("N=4") && msg.contains("f=3"), "{msg}");
        assert!(agg_multi_krum(&subs, 0, 3).is_err());
        assert!(agg_multi_krum(&subs, 0, 0).is_err());
    }

    #[test]
    fn nan_models_sort_as_far_away() {
        let subs = subs_from(&[vec![0.], vec![f64::NAN], vec![0.1], vec![0.2]]);
        let (_, report) = agg_multi_krum(&subs, 0, 2).unwrap();
        assert!(!report.selected_ids.contains(&1));
    }
}
