//! Parametric bootstrap for the SFH model: standard errors, percentile
//! intervals and EBLUP MSEs with covariate-upscaling uncertainty, plus the
//! Monte Carlo likelihood-ratio test.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::point_in_region;
use crate::rng::{Lane, Stream};
use crate::sfh::{Design, Likelihood, RandomEffect, SfhFit, Structure};
use crate::simulate::{CovariateRound, CovariateSimulator};
use crate::variogram::{empirical_variogram, EstimatorKind};

/// Minimum share of successful replicates for a run to be reported.
pub const MIN_SUCCESS_SHARE: f64 = 0.9;

/// Covariate rounds: which design column is replaced by the replicate's
/// block means, and optional binning for trajectory variograms.
#[derive(Debug, Clone)]
pub struct CovariateRounds<'a> {
    pub simulator: &'a CovariateSimulator,
    pub column: String,
    /// `(max_lag, n_bins)` for per-round log-trajectory variograms.
    pub envelope_bins: Option<(f64, usize)>,
}

/// Data and model structure shared by every replicate.
#[derive(Debug, Clone)]
pub struct BootstrapInputs<'a> {
    pub design: &'a Design,
    pub w: Option<&'a DMatrix<f64>>,
    pub effect: RandomEffect,
    pub covariate: Option<CovariateRounds<'a>>,
}

/// Per-round covariate summary kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    /// Raw block means in design order.
    pub block_means: Vec<f64>,
    /// Simulated points falling in each design area.
    pub point_counts: Vec<usize>,
    /// Classical variogram of the log trajectory (empty when not requested).
    pub variogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: u64,
    pub beta: Vec<f64>,
    pub sigma2_v: f64,
    pub rho: f64,
    /// Simulated true log means.
    pub truth: Vec<f64>,
    /// EBLUPs of the refit.
    pub predicted: Vec<f64>,
    pub round: Option<RoundSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub b: usize,
    pub master_seed: u64,
    pub names: Vec<String>,
    pub region_ids: Vec<String>,
    pub replicates: Vec<Replicate>,
    pub failures: Vec<(u64, String)>,
    pub reliable: bool,
}

impl BootstrapRun {
    /// Replicate values of one named parameter (`sigma2_v`, `rho`, or a
    /// coefficient name).
    pub fn parameter(&self, name: &str) -> Option<Vec<f64>> {
        match name {
            "sigma2_v" => Some(self.replicates.iter().map(|r| r.sigma2_v).collect()),
            "rho" => Some(self.replicates.iter().map(|r| r.rho).collect()),
            _ => {
                let j = self.names.iter().position(|n| n == name)?;
                Some(self.replicates.iter().map(|r| r.beta[j]).collect())
            }
        }
    }

    pub fn parameter_names(&self, effect: RandomEffect) -> Vec<String> {
        let mut out = self.names.clone();
        out.push("sigma2_v".into());
        if effect == RandomEffect::Sar {
            out.push("rho".into());
        }
        out
    }
}

/// Design matrix for a replicate: the observed one, or the observed one with
/// the covariate column replaced by the round's block means.
fn replicate_design(
    design: &Design,
    rounds: Option<&CovariateRounds>,
    stream: Stream,
) -> Result<(DMatrix<f64>, Option<RoundSummary>)> {
    let Some(cr) = rounds else {
        return Ok((design.x.clone(), None));
    };
    let round = cr.simulator.round(stream)?;
    let summary = summarize_round(design, cr, &round)?;
    let x = design.with_raw_column(&cr.column, &summary.block_means)?;
    Ok((x, Some(summary)))
}

fn summarize_round(design: &Design, cr: &CovariateRounds, round: &CovariateRound) -> Result<RoundSummary> {
    let regions = &cr.simulator.regions;
    let mut block_means = Vec::with_capacity(design.len());
    let mut point_counts = Vec::with_capacity(design.len());
    for id in &design.region_ids {
        let k = regions
            .regions
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("covariate simulation has no region `{id}`")))?;
        block_means.push(round.blocks[k].block_mean);
        point_counts.push(round.locations.iter().filter(|p| point_in_region(p, &regions.regions[k])).count());
    }
    let variogram = match cr.envelope_bins {
        Some((max_lag, n_bins)) => {
            let logs: Vec<f64> = round.values.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
            empirical_variogram(&round.locations, &logs, EstimatorKind::Classical, max_lag, n_bins)
                .map(|e| fill_bins(&e.bins, max_lag, n_bins))
                .unwrap_or_else(|_| vec![f64::NAN; n_bins])
        }
        None => Vec::new(),
    };
    Ok(RoundSummary { block_means, point_counts, variogram })
}

/// Semivariances on a fixed set of equal-width bins (NaN for empty bins).
pub fn fill_bins(bins: &[crate::variogram::LagBin], max_lag: f64, n_bins: usize) -> Vec<f64> {
    let width = max_lag / n_bins as f64;
    let mut out = vec![f64::NAN; n_bins];
    for b in bins {
        let k = ((b.lag / width).floor() as usize).min(n_bins - 1);
        out[k] = b.gamma;
    }
    out
}

/// Draws `u* = A^-1 v*` and `eps*` for one replicate.
fn draw_effects(fit: &SfhFit, v_eps: &DVector<f64>, stream: Stream) -> (DVector<f64>, DVector<f64>) {
    let m = v_eps.len();
    let mut rv = stream.with_lane(Lane::RandomEffect).rng();
    let sd = fit.sigma2_v.max(0.0).sqrt();
    let v = DVector::from_fn(m, |_, _| sd * rv.sample::<f64, _>(StandardNormal));
    let u = match fit.a_inverse() {
        Some(a_inv) => a_inv * v,
        None => v,
    };
    let mut re = stream.with_lane(Lane::SamplingError).rng();
    let eps = DVector::from_fn(m, |i, _| v_eps[i].sqrt() * re.sample::<f64, _>(StandardNormal));
    (u, eps)
}

fn structure_for(inputs: &BootstrapInputs, effect: RandomEffect) -> Result<Structure> {
    let w = if effect == RandomEffect::Sar { inputs.w } else { None };
    Structure::new(inputs.design.v_eps.clone(), w)
}

fn check_success(b: usize, ok: usize, failures: &[(u64, String)]) -> Result<bool> {
    if ok == 0 {
        let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, r) in failures {
            *reasons.entry(r.as_str()).or_default() += 1;
        }
        let list: Vec<String> = reasons.iter().map(|(r, n)| format!("{n}x {r}")).collect();
        return Err(Error::Bootstrap(format!("all {b} replicates failed: {}", list.join("; "))));
    }
    let reliable = ok as f64 >= MIN_SUCCESS_SHARE * b as f64;
    if !reliable {
        log::warn!("only {ok} of {b} bootstrap replicates succeeded; results flagged unreliable");
    }
    Ok(reliable)
}

/// Double parametric bootstrap around a fitted model.
pub fn run_bootstrap(fit: &SfhFit, inputs: &BootstrapInputs, b: usize, master_seed: u64) -> Result<BootstrapRun> {
    if b == 0 {
        return Err(Error::InvalidInput("bootstrap needs B >= 1".into()));
    }
    if !fit.convergence.converged {
        return Err(Error::InvalidInput("bootstrap needs a converged fit".into()));
    }
    let design = inputs.design;
    let structure = structure_for(inputs, inputs.effect)?;
    let beta = DVector::from_column_slice(&fit.beta);
    let outcomes: Vec<std::result::Result<Replicate, (u64, String)>> = (1..=b as u64)
        .into_par_iter()
        .map(|index| {
            let stream = Stream::new(master_seed, index, Lane::Locations);
            let run = || -> Result<Replicate> {
                let (x, round) = replicate_design(design, inputs.covariate.as_ref(), stream)?;
                let (u, eps) = draw_effects(fit, &design.v_eps, stream);
                let truth = &x * &beta + u;
                let y = &truth + eps;
                let refit = structure.fit(&y, &x, &design.names, inputs.effect)?;
                Ok(Replicate {
                    index,
                    beta: refit.beta.clone(),
                    sigma2_v: refit.sigma2_v,
                    rho: refit.rho,
                    truth: truth.iter().copied().collect(),
                    predicted: refit.eblups(),
                    round,
                })
            };
            run().map_err(|e| (index, e.to_string()))
        })
        .collect();
    let mut replicates = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => replicates.push(r),
            Err(f) => failures.push(f),
        }
    }
    let reliable = check_success(b, replicates.len(), &failures)?;
    Ok(BootstrapRun {
        b,
        master_seed,
        names: fit.names.clone(),
        region_ids: design.region_ids.clone(),
        replicates,
        failures,
        reliable,
    })
}

/// Type-7 (linear interpolation between order statistics) sample quantile.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub estimate: f64,
    #[serde(with = "crate::io::na_float")]
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub replicates: usize,
}

/// Sample SD and percentile interval of replicate values. The SE is NaN with
/// fewer than two values.
pub fn se_ci(values: &[f64], level: f64) -> (f64, f64, f64) {
    let n = values.len();
    let se = if n < 2 {
        f64::NAN
    } else {
        let mean = values.iter().sum::<f64>() / n as f64;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let s = sorted(values);
    let a = (1.0 - level) / 2.0;
    (se, quantile_type7(&s, a), quantile_type7(&s, 1.0 - a))
}

pub fn summarize_se_ci(run: &BootstrapRun, fit: &SfhFit, level: f64) -> Result<Vec<ParameterSummary>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0, 1), got {level}")));
    }
    if run.replicates.len() < 2 {
        log::warn!("fewer than two successful replicates; standard errors undefined");
    }
    let mut out = Vec::new();
    for name in run.parameter_names(fit.random_effect) {
        let values = run.parameter(&name).expect("known parameter");
        let estimate = match name.as_str() {
            "sigma2_v" => fit.sigma2_v,
            "rho" => fit.rho,
            n => fit.coefficient(n).expect("fit and run share names"),
        };
        let (se, lo, hi) = se_ci(&values, level);
        out.push(ParameterSummary {
            parameter: name,
            estimate,
            se,
            ci_lower: lo,
            ci_upper: hi,
            level,
            replicates: values.len(),
        });
    }
    Ok(out)
}

/// Bootstrap MSE of the log-scale EBLUP per area.
pub fn mse_eblup(run: &BootstrapRun) -> Result<Vec<f64>> {
    let n = run.replicates.len();
    if n == 0 {
        return Err(Error::Bootstrap("no successful replicates".into()));
    }
    let m = run.region_ids.len();
    let mut acc = vec![0.0; m];
    for r in &run.replicates {
        for i in 0..m {
            acc[i] += (r.predicted[i] - r.truth[i]).powi(2);
        }
    }
    Ok(acc.into_iter().map(|s| s / n as f64).collect())
}

// ---------------------------------------------------------------------------
// Likelihood-ratio test

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "name")]
pub enum TestedParameter {
    /// H0: rho = 0 (independent effects) against SAR effects.
    Rho,
    /// H0: the named coefficient is 0.
    Coefficient(String),
}

impl TestedParameter {
    pub fn label(&self) -> String {
        match self {
            Self::Rho => "rho".into(),
            Self::Coefficient(n) => n.clone(),
        }
    }
}

/// Where the unrestricted refits take the covariate from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrCovariateSource {
    #[default]
    Simulated,
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    pub parameter: String,
    pub l_obs: f64,
    pub replicates: Vec<f64>,
    pub p_value: f64,
    pub b: usize,
    pub failures: Vec<(u64, String)>,
    pub reliable: bool,
    /// Likelihood kind behind both log-likelihoods below.
    pub likelihood: Likelihood,
    pub loglik_restricted: f64,
    pub loglik_unrestricted: f64,
}

/// `(1/(B+1)) #{b in 0..=B : l*_b >= l_obs}` with `l*_0 = l_obs`.
pub fn lr_p_value(l_obs: f64, replicates: &[f64]) -> f64 {
    let exceed = replicates.iter().filter(|l| **l >= l_obs).count();
    (1 + exceed) as f64 / (replicates.len() + 1) as f64
}

struct Hypotheses {
    restricted_effect: RandomEffect,
    unrestricted_effect: RandomEffect,
    restricted: Design,
    /// Column replaced by simulated covariates in unrestricted refits.
    same_fixed_effects: bool,
    likelihood: Likelihood,
}

fn hypotheses(inputs: &BootstrapInputs, parameter: &TestedParameter) -> Result<Hypotheses> {
    let design = inputs.design;
    match parameter {
        TestedParameter::Rho => {
            if inputs.w.is_none() {
                return Err(Error::InvalidInput("testing rho needs spatial weights".into()));
            }
            Ok(Hypotheses {
                restricted_effect: RandomEffect::Independent,
                unrestricted_effect: RandomEffect::Sar,
                restricted: design.clone(),
                same_fixed_effects: true,
                likelihood: Likelihood::Restricted,
            })
        }
        TestedParameter::Coefficient(name) => {
            if design.column(name).is_none() {
                return Err(Error::InvalidInput(format!("design has no column `{name}`")));
            }
            let keep: Vec<&str> = design.names.iter().map(String::as_str).filter(|n| n != name).collect();
            if keep.is_empty() {
                return Err(Error::InvalidInput("restricted model would have no fixed effects".into()));
            }
            Ok(Hypotheses {
                restricted_effect: inputs.effect,
                unrestricted_effect: inputs.effect,
                restricted: design.select_columns(&keep)?,
                same_fixed_effects: false,
                likelihood: Likelihood::Full,
            })
        }
    }
}

/// Monte Carlo likelihood-ratio test. Rho is tested with restricted
/// likelihoods. Coefficients are tested with full likelihoods, since
/// restricted likelihoods of different fixed-effect designs are not comparable.
pub fn run_lr_test(
    inputs: &BootstrapInputs,
    parameter: &TestedParameter,
    b: usize,
    master_seed: u64,
    source: LrCovariateSource,
) -> Result<LrTestResult> {
    if b == 0 {
        return Err(Error::InvalidInput("LR test needs B >= 1".into()));
    }
    let design = inputs.design;
    let h = hypotheses(inputs, parameter)?;
    let s0 = structure_for(inputs, h.restricted_effect)?.with_likelihood(h.likelihood);
    let s1 = structure_for(inputs, h.unrestricted_effect)?.with_likelihood(h.likelihood);
    let fit0 = s0.fit(&design.y, &h.restricted.x, &h.restricted.names, h.restricted_effect)?;
    let fit1 = s1.fit(&design.y, &design.x, &design.names, h.unrestricted_effect)?;
    let l_obs = fit1.loglik - fit0.loglik;
    if h.same_fixed_effects && l_obs < -1e-8 {
        return Err(Error::Optimization {
            message: "restricted model log-likelihood exceeds the unrestricted one".into(),
            best_objective: l_obs,
            gradient_norm: f64::NAN,
        });
    }
    let rounds = match source {
        LrCovariateSource::Simulated => inputs.covariate.as_ref(),
        LrCovariateSource::Observed => None,
    };
    let beta0 = DVector::from_column_slice(&fit0.beta);
    let outcomes: Vec<std::result::Result<f64, (u64, String)>> = (1..=b as u64)
        .into_par_iter()
        .map(|index| {
            let stream = Stream::new(master_seed, index, Lane::Locations);
            let run = || -> Result<f64> {
                let (x1, _) = replicate_design(design, rounds, stream)?;
                let x0 = match parameter {
                    TestedParameter::Rho => x1.clone(),
                    TestedParameter::Coefficient(_) => {
                        let keep: Vec<usize> = h
                            .restricted
                            .names
                            .iter()
                            .map(|n| design.column(n).expect("restricted names come from the design"))
                            .collect();
                        x1.select_columns(&keep)
                    }
                };
                let (u, eps) = draw_effects(&fit0, &design.v_eps, stream);
                let y = &x0 * &beta0 + u + eps;
                let r0 = s0.fit(&y, &x0, &h.restricted.names, h.restricted_effect)?;
                let r1 = s1.fit(&y, &x1, &design.names, h.unrestricted_effect)?;
                Ok(r1.loglik - r0.loglik)
            };
            run().map_err(|e| (index, e.to_string()))
        })
        .collect();
    let mut replicates = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(l) => replicates.push(l),
            Err(f) => failures.push(f),
        }
    }
    let reliable = check_success(b, replicates.len(), &failures)?;
    Ok(LrTestResult {
        parameter: parameter.label(),
        l_obs,
        p_value: lr_p_value(l_obs, &replicates),
        replicates,
        b,
        failures,
        reliable,
        likelihood: h.likelihood,
        loglik_restricted: fit0.loglik,
        loglik_unrestricted: fit1.loglik,
    })
}

// ---------------------------------------------------------------------------
// Grouped totals

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTotal {
    pub group: String,
    pub areas: usize,
    pub tau_hat: f64,
    pub tau_direct: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

/// Per-group sums of model totals with bootstrap intervals built from the
/// replicate prediction errors of the group total. In replicate `b` the
/// predicted total of area `i` is `N_i exp(pred + mse_i/2)` and the true one
/// is `N_i exp(truth)`; the interval is `T - [q(1-a/2), q(a/2)]` of the
/// errors.
#[allow(clippy::too_many_arguments)]
pub fn group_totals(
    run: &BootstrapRun,
    groups: &[String],
    populations: &[u64],
    tau_hat: &[f64],
    tau_direct: &[f64],
    mse_log: &[f64],
    level: f64,
) -> Result<Vec<GroupTotal>> {
    let m = run.region_ids.len();
    if [groups.len(), populations.len(), tau_hat.len(), tau_direct.len(), mse_log.len()]
        .iter()
        .any(|&l| l != m)
    {
        return Err(Error::InvalidInput("group inputs must align with the run's areas".into()));
    }
    let mut names: Vec<&String> = groups.iter().collect();
    names.sort();
    names.dedup();
    let a = (1.0 - level) / 2.0;
    let mut out = Vec::with_capacity(names.len());
    for g in names {
        let members: Vec<usize> = (0..m).filter(|&i| &groups[i] == g).collect();
        let t: f64 = members.iter().map(|&i| tau_hat[i]).sum();
        let errors: Vec<f64> = run
            .replicates
            .iter()
            .map(|r| {
                members
                    .iter()
                    .map(|&i| {
                        let n = populations[i] as f64;
                        n * (r.predicted[i] + mse_log[i] / 2.0).exp() - n * r.truth[i].exp()
                    })
                    .sum()
            })
            .collect();
        let s = sorted(&errors);
        out.push(GroupTotal {
            group: g.clone(),
            areas: members.len(),
            tau_hat: t,
            tau_direct: members.iter().map(|&i| tau_direct[i]).sum(),
            ci_lower: t - quantile_type7(&s, 1.0 - a),
            ci_upper: t - quantile_type7(&s, a),
            level,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfh::tests::rook;
    use crate::sfh::INTERCEPT;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn toy_design(n: usize, seed: u64, slope: f64, noise: f64) -> (Design, DMatrix<f64>) {
        let m = n * n;
        let w = rook(n);
        let mut r = Stream::new(seed, 0, Lane::Auxiliary).rng();
        let z: Vec<f64> = (0..m).map(|_| r.sample(StandardNormal)).collect();
        let v_eps = DVector::from_fn(m, |i, _| noise * (0.05 + 0.1 * ((i % 3) as f64)));
        let x = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
        let v = DVector::from_fn(m, |_, _| 0.45 * r.sample::<f64, _>(StandardNormal));
        let a = DMatrix::<f64>::identity(m, m) - &w * 0.5;
        let u = a.lu().solve(&v).unwrap();
        let y = DVector::from_fn(m, |i, _| 2.0 + slope * z[i] + u[i] + v_eps[i].sqrt() * r.sample::<f64, _>(StandardNormal));
        let design = Design {
            region_ids: (0..m).map(|i| format!("A{i:03}")).collect(),
            rows: (0..m).collect(),
            y,
            x,
            v_eps,
            names: vec![INTERCEPT.into(), "z".into()],
            scalings: vec![crate::sfh::ColumnScaling { name: "z".into(), mean: 0.0, sd: 1.0, standardized: false }],
        };
        (design, w)
    }

    #[test]
    fn quantiles_and_se() {
        let (se, lo, hi) = se_ci(&[1.0, 2.0, 3.0], 0.95);
        assert!((se - 1.0).abs() < 1e-15);
        assert!((lo - 1.05).abs() < 1e-12 && (hi - 2.95).abs() < 1e-12);
        let (se, lo, hi) = se_ci(&[4.0; 5], 0.95);
        assert_eq!((se, lo, hi), (0.0, 4.0, 4.0));
        let v: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64).collect();
        let (_, l50, h50) = se_ci(&v, 0.5);
        let (_, l95, h95) = se_ci(&v, 0.95);
        assert!(l95 < l50 && h50 < h95);
        assert!(se_ci(&[1.0], 0.95).0.is_nan());
    }

    #[test]
    fn p_value_formula() {
        assert_eq!(lr_p_value(5.0, &[1.0, 2.0, 3.0]), 0.25);
        assert_eq!(lr_p_value(0.0, &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(lr_p_value(2.0, &[1.0, 2.0, 3.0]), 0.75);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn p_value_bounds_and_monotone(reps in prop::collection::vec(-5.0f64..5.0, 1..40), a in -6.0f64..6.0, d in 0.0f64..3.0) {
            let b = reps.len() as f64;
            let p = lr_p_value(a, &reps);
            prop_assert!(p >= 1.0 / (b + 1.0) && p <= 1.0);
            prop_assert!(lr_p_value(a + d, &reps) <= p);
        }

        #[test]
        fn ci_brackets_median(values in prop::collection::vec(-10.0f64..10.0, 2..60), level in 0.5f64..0.99) {
            let (_, lo, hi) = se_ci(&values, level);
            let med = quantile_type7(&sorted(&values), 0.5);
            prop_assert!(lo <= med && med <= hi);
        }
    }

    fn fake_run(pairs: &[(Vec<f64>, Vec<f64>)]) -> BootstrapRun {
        BootstrapRun {
            b: pairs.len(),
            master_seed: 0,
            names: vec![],
            region_ids: (0..pairs[0].0.len()).map(|i| i.to_string()).collect(),
            replicates: pairs
                .iter()
                .enumerate()
                .map(|(k, (t, p))| Replicate {
                    index: k as u64 + 1,
                    beta: vec![],
                    sigma2_v: 0.0,
                    rho: 0.0,
                    truth: t.clone(),
                    predicted: p.clone(),
                    round: None,
                })
                .collect(),
            failures: vec![],
            reliable: true,
        }
    }

    #[test]
    fn mse_arithmetic_and_order_invariance() {
        let run = fake_run(&[(vec![1.0, 2.0], vec![1.0, 2.0])]);
        assert_eq!(mse_eblup(&run).unwrap(), vec![0.0, 0.0]);
        let run = fake_run(&[(vec![1.0], vec![1.3])]);
        assert!((mse_eblup(&run).unwrap()[0] - 0.09).abs() < 1e-15);
        let pairs = vec![(vec![0.0], vec![0.1]), (vec![0.0], vec![-0.4]), (vec![1.0], vec![1.2])];
        let mut rev = pairs.clone();
        rev.reverse();
        let a = mse_eblup(&fake_run(&pairs)).unwrap()[0];
        let b = mse_eblup(&fake_run(&rev)).unwrap()[0];
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_determinism_and_degenerate_noise() {
        let (design, w) = toy_design(4, 3, 0.8, 1.0);
        let inputs = BootstrapInputs { design: &design, w: Some(&w), effect: RandomEffect::Sar, covariate: None };
        let fit = structure_for(&inputs, RandomEffect::Sar)
            .unwrap()
            .fit(&design.y, &design.x, &design.names, RandomEffect::Sar)
            .unwrap();
        let a = run_bootstrap(&fit, &inputs, 6, 11).unwrap();
        let b = run_bootstrap(&fit, &inputs, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replicates.len() + a.failures.len(), 6);
        let one = run_bootstrap(&fit, &inputs, 1, 11).unwrap();
        assert_eq!(one.replicates.len(), 1);
        assert!(summarize_se_ci(&one, &fit, 0.95).unwrap()[0].se.is_nan());

        // Tiny sampling variances and an independent model with no
        // between-area variation beyond X beta: coefficients barely move.
        let (mut tiny, _) = toy_design(4, 3, 0.8, 1e-10);
        let xb = &tiny.x * DVector::from_column_slice(&[2.0, 0.8]);
        tiny.y = xb;
        let inputs = BootstrapInputs { design: &tiny, w: None, effect: RandomEffect::Independent, covariate: None };
        let fit = structure_for(&inputs, RandomEffect::Independent)
            .unwrap()
            .fit(&tiny.y, &tiny.x, &tiny.names, RandomEffect::Independent)
            .unwrap();
        assert!(fit.sigma2_v < 1e-6);
        let run = run_bootstrap(&fit, &inputs, 20, 5).unwrap();
        let s = summarize_se_ci(&run, &fit, 0.95).unwrap();
        assert!(s[1].se < 1e-3, "{:?}", s[1]);
    }

    #[test]
    fn lr_test_strong_signal_and_rho() {
        let (design, w) = toy_design(4, 8, 2.0, 1.0);
        let inputs = BootstrapInputs { design: &design, w: Some(&w), effect: RandomEffect::Sar, covariate: None };
        let r = run_lr_test(&inputs, &TestedParameter::Coefficient("z".into()), 19, 1, LrCovariateSource::Observed)
            .unwrap();
        assert!((r.p_value - 0.05).abs() < 1e-12, "{r:?}");
        assert_eq!(r.likelihood, Likelihood::Full);
        let r = run_lr_test(&inputs, &TestedParameter::Rho, 9, 1, LrCovariateSource::Observed).unwrap();
        assert_eq!(r.likelihood, Likelihood::Restricted);
        assert!(r.l_obs >= -1e-8);
        assert!(r.p_value >= 0.1 && r.p_value <= 1.0);
        let again = run_lr_test(&inputs, &TestedParameter::Rho, 9, 1, LrCovariateSource::Observed).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn grouped_totals_add_up_and_bracket() {
        let run = fake_run(&[
            (vec![1.0, 2.0, 0.5], vec![1.1, 1.9, 0.5]),
            (vec![1.0, 2.0, 0.5], vec![0.9, 2.1, 0.4]),
            (vec![1.2, 1.8, 0.5], vec![1.1, 1.9, 0.6]),
        ]);
        let groups = vec!["a".to_string(), "a".into(), "b".into()];
        let tau = [10.0, 20.0, 5.0];
        let g = group_totals(&run, &groups, &[3, 4, 5], &tau, &[9.0, 21.0, 4.0], &[0.01, 0.01, 0.01], 0.95).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].tau_hat, 30.0);
        assert_eq!(g[1].tau_hat, 5.0);
        assert_eq!(g[0].tau_direct, 30.0);
        assert!(g[0].ci_lower <= g[0].tau_hat && g[0].tau_hat <= g[0].ci_upper);
    }
}
