//! Aggregation rules: (submitted models) -> (new global model, selection).
//!
//! Every rule first orders submissions by `client_id`, so results do not
//! depend on the order in which submissions arrive. All client-level ties
//! break toward the lowest id.

mod coordinate;
mod krum;
mod loss_cluster;

use serde::{Deserialize, Serialize};

pub use coordinate::{agg_mean, agg_median, agg_trimmed_mean, trim_count};
pub use krum::{agg_krum, agg_multi_krum, krum_scores};
pub use loss_cluster::{agg_loss_cluster, agg_loss_cluster_with_losses, two_means_split, LossFn};

use crate::error::{FedError, Result};
use crate::math::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    TrimmedMean,
    Median,
    Krum,
    MultiKrum,
    LossCluster,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Median => "median",
            AggregatorKind::Krum => "krum",
            AggregatorKind::MultiKrum => "multi_krum",
            AggregatorKind::LossCluster => "loss_cluster",
        }
    }
}

/// One aggregation rule and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// Trimmed fraction per side (trimmed mean).
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Assumed maximum number of malicious clients (Krum, Multi-Krum).
    #[serde(default = "default_f")]
    pub f: usize,
    /// Number of lowest-score submissions averaged by Multi-Krum.
    #[serde(default)]
    pub k: Option<usize>,
    /// Loss clustering: keep exactly this many lowest-loss clients instead
    /// of running 2-means.
    #[serde(default)]
    pub k_t_override: Option<usize>,
    /// Loss clustering: stop 2-means after the initial assignment.
    #[serde(default)]
    pub single_pass: bool,
}

fn default_beta() -> f64 {
    0.2
}

fn default_f() -> usize {
    5
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind) -> Self {
        AggregatorSpec {
            kind,
            beta: default_beta(),
            f: default_f(),
            k: None,
            k_t_override: None,
            single_pass: false,
        }
    }

    /// Checks the parameters against a round of `n` submissions.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(FedError::config("aggregation needs at least one client"));
        }
        match self.kind {
            AggregatorKind::Mean | AggregatorKind::Median => Ok(()),
            AggregatorKind::TrimmedMean => {
                if !(0.0..0.5).contains(&self.beta) {
                    return Err(FedError::config(format!(
                        "trimmed_mean requires beta in [0, 0.5), got {}",
                        self.beta
                    )));
                }
                let t = trim_count(self.beta, n);
                if n <= 2 * t {
                    return Err(FedError::config(format!(
                        "trimmed_mean with beta={} trims {t} per side and leaves nothing of N={n}",
                        self.beta
                    )));
                }
                Ok(())
            }
            AggregatorKind::Krum | AggregatorKind::MultiKrum => {
                let neighbours = krum::neighbour_count(n, self.f)?;
                if self.kind == AggregatorKind::MultiKrum {
                    let k = self.k.unwrap_or(neighbours);
                    if k == 0 || k > neighbours {
                        return Err(FedError::config(format!(
                            "multi_krum requires 1 <= k <= N-f-2 (k={k}, N={n}, f={})",
                            self.f
                        )));
                    }
                }
                Ok(())
            }
            AggregatorKind::LossCluster => match self.k_t_override {
                Some(k) if k == 0 || k > n => Err(FedError::config(format!(
                    "loss_cluster k_t_override must be in 1..={n}, got {k}"
                ))),
                _ => Ok(()),
            },
        }
    }
}

/// A client's model for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub client_id: usize,
    pub model: ParamVector,
    pub num_samples: usize,
}

/// Which clients made it into the aggregate, and the per-client scores
/// the decision was based on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionReport {
    /// Ascending client ids.
    pub selected_ids: Vec<usize>,
    /// `(client_id, score)` in ascending id order: Krum scores, or server
    /// losses for loss clustering.
    pub scores: Option<Vec<(usize, f64)>>,
}

impl SelectionReport {
    pub fn k_t(&self) -> usize {
        self.selected_ids.len()
    }

    fn all(subs: &[&Submission]) -> Self {
        SelectionReport {
            selected_ids: subs.iter().map(|s| s.client_id).collect(),
            scores: None,
        }
    }
}

pub type Aggregate = (ParamVector, SelectionReport);

/// Submissions sorted by client id, checked for a common dimension.
pub(crate) fn ordered(subs: &[Submission]) -> Result<Vec<&Submission>> {
    let first = subs.first().ok_or(FedError::Empty("submissions"))?;
    let mut out: Vec<&Submission> = subs.iter().collect();
    for s in &out {
        first.model.check_dim(&s.model)?;
    }
    out.sort_by_key(|s| s.client_id);
    if out.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(FedError::InvalidArgument("duplicate client id".into()));
    }
    Ok(out)
}

/// Runs the rule described by `spec`. Loss clustering needs `filter_loss`.
pub fn aggregate(
    spec: &AggregatorSpec,
    subs: &[Submission],
    filter_loss: Option<&LossFn<'_>>,
) -> Result<Aggregate> {
    spec.validate(subs.len())?;
    match spec.kind {
        AggregatorKind::Mean => agg_mean(subs),
        AggregatorKind::TrimmedMean => agg_trimmed_mean(subs, spec.beta),
        AggregatorKind::Median => agg_median(subs),
        AggregatorKind::Krum => agg_krum(subs, spec.f),
        AggregatorKind::MultiKrum => {
            let k = spec.k.unwrap_or(krum::neighbour_count(subs.len(), spec.f)?);
            agg_multi_krum(subs, spec.f, k)
        }
        AggregatorKind::LossCluster => {
            let loss = filter_loss.ok_or_else(|| {
                FedError::InvalidArgument("loss_cluster needs a server filter loss".into())
            })?;
            agg_loss_cluster(subs, loss, spec.k_t_override, spec.single_pass)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RngStream;

    const ALL: [AggregatorKind; 6] = [
        AggregatorKind::Mean,
        AggregatorKind::TrimmedMean,
        AggregatorKind::Median,
        AggregatorKind::Krum,
        AggregatorKind::MultiKrum,
        AggregatorKind::LossCluster,
    ];

    fn norm_loss(p: &ParamVector) -> Result<f64> {
        Ok(p.as_slice().iter().map(|v| v * v).sum())
    }

    fn random_subs(rng: &mut RngStream, n: usize, d: usize) -> Vec<Submission> {
        (0..n)
            .map(|i| Submission {
                client_id: i,
                model: ParamVector::new((0..d).map(|_| rng.uniform_range(-5.0, 5.0)).collect()),
                num_samples: 10,
            })
            .collect()
    }

    fn spec_for(kind: AggregatorKind) -> AggregatorSpec {
        AggregatorSpec {
            f: 2,
            k: Some(3),
            ..AggregatorSpec::new(kind)
        }
    }

    #[test]
    fn unanimity_returns_the_shared_model() {
        let shared = ParamVector::new(vec![0.1, -1.0 / 3.0, 7.25]);
        let subs: Vec<Submission> = (0..10)
            .map(|i| Submission {
                client_id: i,
                model: shared.clone(),
                num_samples: 5,
            })
            .collect();
        for kind in ALL {
            let (out, _) = aggregate(&spec_for(kind), &subs, Some(&norm_loss)).unwrap();
            assert_eq!(out, shared, "{kind:?}");
        }
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..20 {
            let subs = random_subs(&mut rng, 9, 4);
            let mut shuffled = subs.clone();
            rng.shuffle(&mut shuffled);
            for kind in ALL {
                let spec = spec_for(kind);
                let a = aggregate(&spec, &subs, Some(&norm_loss)).unwrap();
                let b = aggregate(&spec, &shuffled, Some(&norm_loss)).unwrap();
                assert_eq!(a.0.as_slice(), b.0.as_slice(), "{kind:?}");
                assert_eq!(a.1, b.1, "{kind:?}");
            }
        }
    }

    #[test]
    fn validation_rules() {
        let tm = AggregatorSpec {
            beta: 0.6,
            ..AggregatorSpec::new(AggregatorKind::TrimmedMean)
        };
        assert!(tm.validate(10).is_err());
        let krum = AggregatorSpec {
            f: 8,
            ..AggregatorSpec::new(AggregatorKind::Krum)
        };
        assert!(krum.validate(10).is_err());
        let mk = AggregatorSpec {
            f: 5,
            k: Some(4),
            ..AggregatorSpec::new(AggregatorKind::MultiKrum)
        };
        let msg = mk.validate(10).unwrap_err().to_string();
        assert!(msg.contains("k <= N-f-2"), "{msg}");
        assert!(AggregatorSpec {
            k: Some(3),
            ..mk.clone()
        }
        .validate(10)
        .is_ok());
        let lc = AggregatorSpec {
            k_t_override: Some(0),
            ..AggregatorSpec::new(AggregatorKind::LossCluster)
        };
        assert!(lc.validate(10).is_err());
    }

    #[test]
    fn loss_cluster_requires_a_loss() {
        let mut rng = RngStream::new(22, 0);
        let subs = random_subs(&mut rng, 3, 2);
        assert!(aggregate(
            &AggregatorSpec::new(AggregatorKind::LossCluster),
            &subs,
            None
        )
        .is_err());
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let subs = vec![
            Submission {
                client_id: 0,
                model: ParamVector::new(vec![1.0]),
                num_samples: 1,
            },
            Submission {
                client_id: 1,
                model: ParamVector::new(vec![1.0, 2.0]),
                num_samples: 1,
            },
        ];
        assert!(matches!(
            agg_mean(&subs),
            Err(FedError::DimensionMismatch { .. })
        ));
    }
}
