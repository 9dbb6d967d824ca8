use super::{ordered, Aggregate, SelectionReport, Submission};
use crate::error::{FedError, Result};
use crate::math::{coordwise_sorted, weighted_mean_of, ParamVector};

/// Data-size-weighted average of all submissions.
pub fn agg_mean(subs: &[Submission]) -> Result<Aggregate> {
    let subs = ordered(subs)?;
    let weights: Vec<f64> = subs.iter().map(|s| s.num_samples as f64).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(FedError::InvalidArgument(
            "mean aggregation needs a positive total sample count".into(),
        ));
    }
    let models: Vec<&ParamVector> = subs.iter().map(|s| &s.model).collect();
    Ok((
        weighted_mean_of(&models, &weights)?,
        SelectionReport::all(&subs),
    ))
}

/// Values trimmed from each side: `floor(beta * n)`.
pub fn trim_count(beta: f64, n: usize) -> usize {
    // the epsilon keeps products such as 0.7 * 10 from flooring to 6
    (beta * n as f64 + 1e-9).floor() as usize
}

fn per_coordinate(
    subs: &[&Submission],
    mut reduce: impl FnMut(&[f64]) -> f64,
) -> Result<ParamVector> {
    let models: Vec<&ParamVector> = subs.iter().map(|s| &s.model).collect();
    let d = models[0].dim();
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        out.push(reduce(&coordwise_sorted(&models, j)?));
    }
    Ok(ParamVector::new(out))
}

/// Coordinate-wise mean after dropping `floor(beta * N)` values from each
/// end. Unweighted.
pub fn agg_trimmed_mean(subs: &[Submission], beta: f64) -> Result<Aggregate> {
    let subs = ordered(subs)?;
    let n = subs.len();
    if !(0.0..0.5).contains(&beta) {
        return Err(FedError::config(format!(
            "trimmed_mean requires beta in [0, 0.5), got {beta}"
        )));
    }
    let t = trim_count(beta, n);
    if n <= 2 * t {
        return Err(FedError::config(format!(
            "trimmed_mean trims {t} per side and leaves nothing of N={n}"
        )));
    }
    let out = per_coordinate(&subs, |col| {
        let kept = &col[t..n - t];
        let shift = kept[0];
        let m = kept.len() as f64;
        shift + kept.iter().map(|v| (v - shift) / m).sum::<f64>()
    })?;
    Ok((out, SelectionReport::all(&subs)))
}

/// Coordinate-wise median; the mean of the two central values for even N.
pub fn agg_median(subs: &[Submission]) -> Result<Aggregate> {
    let subs = ordered(subs)?;
    let n = subs.len();
    let out = per_coordinate(&subs, |col| {
        if n % 2 == 1 {
            col[n / 2]
        } else {
            (col[n / 2 - 1] + col[n / 2]) / 2.0
        }
    })?;
    Ok((out, SelectionReport::all(&subs)))
}
