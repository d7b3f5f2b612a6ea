//! Plot-ready diagnostic tables: normal Q-Q coordinates with pointwise
//! bands, bootstrap prediction envelopes, variogram envelopes, simulated
//! point counts and the direct-versus-model efficiency table.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::bootstrap::{quantile_type7, sorted, BootstrapRun};
use crate::error::{Error, Result};
use crate::sfh::AreaPrediction;
use crate::survey::DirectEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    pub series: String,
    pub region_id: String,
    pub rank: usize,
    /// Standardized sample value.
    pub sample: f64,
    /// Normal quantile at the Blom plotting position.
    pub theoretical: f64,
    pub band_lower: f64,
    pub band_upper: f64,
}

/// Q-Q coordinates of standardized values against the standard normal with
/// a pointwise band from the Beta distribution of uniform order statistics.
pub fn qq_normal(series: &str, ids: &[String], values: &[f64], level: f64) -> Result<Vec<QqPoint>> {
    let n = values.len();
    if n < 3 || ids.len() != n {
        return Err(Error::InvalidInput("Q-Q table needs at least 3 labeled values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let z = Normal::standard();
    let a = (1.0 - level) / 2.0;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let r = (k + 1) as f64;
            let blom = (r - 0.375) / (n as f64 + 0.25);
            let beta = Beta::new(r, n as f64 - r + 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
            Ok(QqPoint {
                series: series.into(),
                region_id: ids[i].clone(),
                rank: k + 1,
                sample: (values[i] - mean) / sd,
                theoretical: z.inverse_cdf(blom),
                band_lower: z.inverse_cdf(beta.inverse_cdf(a)),
                band_upper: z.inverse_cdf(beta.inverse_cdf(1.0 - a)),
            })
        })
        .collect()
}

/// Share of Q-Q points inside their band.
pub fn qq_band_share(points: &[QqPoint]) -> f64 {
    let inside = points.iter().filter(|p| p.sample >= p.band_lower && p.sample <= p.band_upper).count();
    inside as f64 / points.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEnvelope {
    pub region_id: String,
    pub eblup_log: f64,
    pub bootstrap_mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-area mean of replicate EBLUPs with percentile envelope.
pub fn prediction_envelope(run: &BootstrapRun, eblups: &[f64], level: f64) -> Result<Vec<PredictionEnvelope>> {
    if eblups.len() != run.region_ids.len() || run.replicates.is_empty() {
        return Err(Error::InvalidInput("envelope needs one EBLUP per area and a nonempty run".into()));
    }
    let a = (1.0 - level) / 2.0;
    Ok(run
        .region_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let v: Vec<f64> = run.replicates.iter().map(|r| r.predicted[i]).collect();
            let s = sorted(&v);
            PredictionEnvelope {
                region_id: id.clone(),
                eblup_log: eblups[i],
                bootstrap_mean: v.iter().sum::<f64>() / v.len() as f64,
                lower: quantile_type7(&s, a),
                upper: quantile_type7(&s, 1.0 - a),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramEnvelopeRow {
    pub bin: usize,
    pub lag_upper: f64,
    #[serde(with = "crate::io::na_float")]
    pub data_gamma: f64,
    #[serde(with = "crate::io::na_float")]
    pub sim_mean: f64,
    #[serde(with = "crate::io::na_float")]
    pub lower: f64,
    #[serde(with = "crate::io::na_float")]
    pub upper: f64,
    pub inside: bool,
}

/// Percentile envelope of per-trajectory binned semivariances (`sims[r][k]`,
/// NaN for empty bins) against the data values on the same bins.
pub fn variogram_envelope(data: &[f64], sims: &[Vec<f64>], max_lag: f64, level: f64) -> Vec<VariogramEnvelopeRow> {
    let n_bins = data.len();
    let width = max_lag / n_bins.max(1) as f64;
    let a = (1.0 - level) / 2.0;
    (0..n_bins)
        .map(|k| {
            let v: Vec<f64> = sims.iter().filter_map(|s| s.get(k).copied()).filter(|g| g.is_finite()).collect();
            let s = sorted(&v);
            let (lower, upper) = (quantile_type7(&s, a), quantile_type7(&s, 1.0 - a));
            VariogramEnvelopeRow {
                bin: k,
                lag_upper: (k + 1) as f64 * width,
                data_gamma: data[k],
                sim_mean: if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 },
                lower,
                upper,
                inside: data[k] >= lower && data[k] <= upper,
            }
        })
        .collect()
}

/// Share of bins with data and simulations where the data lie inside.
pub fn envelope_share(rows: &[VariogramEnvelopeRow]) -> f64 {
    let usable: Vec<&VariogramEnvelopeRow> =
        rows.iter().filter(|r| r.data_gamma.is_finite() && r.lower.is_finite()).collect();
    usable.iter().filter(|r| r.inside).count() as f64 / usable.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCountRow {
    pub region_id: String,
    pub grid_points: usize,
    pub simulated_mean: f64,
}

pub fn point_count_table(run: &BootstrapRun, grid_counts: &[usize]) -> Vec<PointCountRow> {
    let rounds: Vec<_> = run.replicates.iter().filter_map(|r| r.round.as_ref()).collect();
    run.region_ids
        .iter()
        .enumerate()
        .map(|(i, id)| PointCountRow {
            region_id: id.clone(),
            grid_points: grid_counts.get(i).copied().unwrap_or(0),
            simulated_mean: if rounds.is_empty() {
                f64::NAN
            } else {
                rounds.iter().map(|r| r.point_counts[i] as f64).sum::<f64>() / rounds.len() as f64
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub region_id: String,
    pub tau_direct: f64,
    #[serde(with = "crate::io::na_float")]
    pub cv_direct: f64,
    pub tau_model: f64,
    #[serde(with = "crate::io::na_float")]
    pub cv_model: f64,
    /// `1 - cv_model / cv_direct`.
    #[serde(with = "crate::io::na_float")]
    pub cv_reduction: f64,
}

/// Direct versus model coefficients of variation per area (areas present
/// in both inputs, model order).
pub fn efficiency_table(direct: &[DirectEstimate], model: &[AreaPrediction]) -> Vec<EfficiencyRow> {
    model
        .iter()
        .filter_map(|p| {
            let d = direct.iter().find(|d| d.region_id == p.region_id)?;
            let cv_direct = if d.tau_tilde > 0.0 { d.var_tau.sqrt() / d.tau_tilde } else { f64::NAN };
            let cv_model = p.rmse_total / p.tau_hat;
            Some(EfficiencyRow {
                region_id: p.region_id.clone(),
                tau_direct: d.tau_tilde,
                cv_direct,
                tau_model: p.tau_hat,
                cv_model,
                cv_reduction: 1.0 - cv_model / cv_direct,
            })
        })
        .collect()
}

/// Area-averaged CVs `(direct, model)` over rows where both are finite.
pub fn mean_cvs(rows: &[EfficiencyRow]) -> (f64, f64) {
    let ok: Vec<&EfficiencyRow> = rows.iter().filter(|r| r.cv_direct.is_finite() && r.cv_model.is_finite()).collect();
    let n = ok.len().max(1) as f64;
    (
        ok.iter().map(|r| r.cv_direct).sum::<f64>() / n,
        ok.iter().map(|r| r.cv_model).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bootstrap::Replicate;
    use crate::rng::{Lane, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn qq_band_covers_gaussian_samples() {
        let n = 60;
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let mut total = 0.0;
        for rep in 0..40 {
            let mut r = Stream::new(4, rep, Lane::Auxiliary).rng();
            let v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
            let qq = qq_normal("e", &ids, &v, 0.95).unwrap();
            assert!(qq.windows(2).all(|w| w[0].sample <= w[1].sample && w[0].theoretical < w[1].theoretical));
            total += qq_band_share(&qq);
        }
        assert!(total / 40.0 >= 0.95);
    }

    #[test]
    fn envelope_collapses_without_noise() {
        let rep = |k| Replicate {
            index: k,
            beta: vec![],
            sigma2_v: 0.0,
            rho: 0.0,
            truth: vec![1.0, 2.0],
            predicted: vec![1.0, 2.0],
            round: None,
        };
        let run = BootstrapRun {
            b: 3,
            master_seed: 0,
            names: vec![],
            region_ids: vec!["a".into(), "b".into()],
            replicates: (1..=3).map(rep).collect(),
            failures: vec![],
            reliable: true,
        };
        let env = prediction_envelope(&run, &[1.0, 2.0], 0.95).unwrap();
        for e in env {
            assert_eq!((e.lower, e.upper, e.bootstrap_mean), (e.eblup_log, e.eblup_log, e.eblup_log));
        }
        let rows = variogram_envelope(&[1.0, f64::NAN], &[vec![0.5, 1.0], vec![1.5, f64::NAN]], 2.0, 0.95);
        assert!(rows[0].inside && !rows[1].inside);
        assert_eq!(envelope_share(&rows), 1.0);
    }
}
