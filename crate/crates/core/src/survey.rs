//! Post-stratified Horvitz–Thompson direct estimates.
//!
//! Cell weights are `N_ist / n_ist`; the area total and its variance follow
//! the usual HT forms with those weights, and the log-scale sampling variance
//! comes from the delta method.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::RegionSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub region_id: String,
    pub size_class: u8,
    pub type_class: u8,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusCell {
    pub region_id: String,
    pub size_class: u8,
    pub type_class: u8,
    #[serde(rename = "N")]
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CellKey {
    pub region_id: String,
    pub size_class: u8,
    pub type_class: u8,
}

impl CellKey {
    fn of_record(r: &SurveyRecord) -> Self {
        Self {
            region_id: r.region_id.clone(),
            size_class: r.size_class,
            type_class: r.type_class,
        }
    }
    fn of_cell(c: &CensusCell) -> Self {
        Self {
            region_id: c.region_id.clone(),
            size_class: c.size_class,
            type_class: c.type_class,
        }
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, s={}, t={})", self.region_id, self.size_class, self.type_class)
    }
}

/// Post-stratification weights plus the census cells that have no sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightTable {
    pub weights: BTreeMap<CellKey, f64>,
    pub sample_counts: BTreeMap<CellKey, u64>,
    pub uncovered: Vec<(CellKey, u64)>,
}

impl WeightTable {
    pub fn weight(&self, key: &CellKey) -> Option<f64> {
        self.weights.get(key).copied()
    }

    /// Uncovered census cells per region: (cell count, population count).
    pub fn uncovered_by_region(&self) -> BTreeMap<String, (usize, u64)> {
        let mut out: BTreeMap<String, (usize, u64)> = BTreeMap::new();
        for (k, n) in &self.uncovered {
            let e = out.entry(k.region_id.clone()).or_default();
            e.0 += 1;
            e.1 += n;
        }
        out
    }
}

/// `w̃_ist = N_ist / n_ist` for every sampled cell.
pub fn poststratify(survey: &[SurveyRecord], census: &[CensusCell]) -> Result<WeightTable> {
    let mut counts: BTreeMap<CellKey, u64> = BTreeMap::new();
    for r in survey {
        *counts.entry(CellKey::of_record(r)).or_default() += 1;
    }
    let mut population: BTreeMap<CellKey, u64> = BTreeMap::new();
    for c in census {
        let key = CellKey::of_cell(c);
        if population.insert(key.clone(), c.n).is_some() {
            return Err(Error::Survey(format!("duplicate census cell {key}")));
        }
    }
    let mut weights = BTreeMap::new();
    for (key, &n) in &counts {
        let big_n = *population
            .get(key)
            .ok_or_else(|| Error::Survey(format!("survey cell {key} has no census counterpart")))?;
        if big_n < n {
            return Err(Error::Survey(format!(
                "census undercount in cell {key}: N = {big_n} < n = {n}"
            )));
        }
        weights.insert(key.clone(), big_n as f64 / n as f64);
    }
    let uncovered = population
        .iter()
        .filter(|(k, n)| **n > 0 && !counts.contains_key(*k))
        .map(|(k, n)| (k.clone(), *n))
        .collect();
    Ok(WeightTable {
        weights,
        sample_counts: counts,
        uncovered,
    })
}

/// Per-area direct estimate on the total and log-mean scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub region_id: String,
    pub n_i: u64,
    pub tau_tilde: f64,
    pub var_tau: f64,
    #[serde(with = "crate::io::na_float")]
    pub log_mu_tilde: f64,
    #[serde(with = "crate::io::na_float")]
    pub var_log: f64,
    pub usable: bool,
}

impl DirectEstimate {
    fn unusable(region_id: &str, n_i: u64, tau: f64, var: f64) -> Self {
        Self {
            region_id: region_id.to_owned(),
            n_i,
            tau_tilde: tau,
            var_tau: var,
            log_mu_tilde: f64::NAN,
            var_log: f64::NAN,
            usable: false,
        }
    }
}

/// `τ̃_i = Σ y w̃` and `Var(τ̃_i) = Σ w̃(w̃−1)y²` over the area's sample.
/// The log-scale fields are left unset; see [`log_scale`].
pub fn direct_total(survey: &[SurveyRecord], weights: &WeightTable, region_id: &str) -> Result<DirectEstimate> {
    let mut tau = 0.0;
    let mut var = 0.0;
    let mut n = 0u64;
    for r in survey.iter().filter(|r| r.region_id == region_id) {
        let key = CellKey::of_record(r);
        let w = weights
            .weight(&key)
            .ok_or_else(|| Error::Survey(format!("no weight for cell {key}")))?;
        tau += r.y * w;
        var += w * (w - 1.0) * r.y * r.y;
        n += 1;
    }
    Ok(DirectEstimate::unusable(region_id, n, tau, var))
}

/// Fills `log μ̃ = log(τ̃/N)` and `σ̂²_ε = Var(τ̃)/τ̃²`. Areas with `τ̃ ≤ 0`,
/// no sample or `N = 0` stay unusable. `var_floor` replaces log-scale
/// variances of exactly zero.
pub fn log_scale(mut est: DirectEstimate, population: u64, var_floor: f64) -> DirectEstimate {
    est.usable = false;
    if est.n_i == 0 || !(est.tau_tilde > 0.0) || population == 0 {
        est.log_mu_tilde = f64::NAN;
        est.var_log = f64::NAN;
        return est;
    }
    est.log_mu_tilde = (est.tau_tilde / population as f64).ln();
    let v = est.var_tau / (est.tau_tilde * est.tau_tilde);
    est.var_log = if v > 0.0 { v } else { var_floor };
    est.usable = true;
    est
}

/// Direct estimates for every region in `regions`, in region order.
pub fn direct_estimates(
    regions: &RegionSet,
    survey: &[SurveyRecord],
    census: &[CensusCell],
    var_floor: f64,
) -> Result<(Vec<DirectEstimate>, WeightTable)> {
    validate_inputs(regions, survey, census)?;
    let weights = poststratify(survey, census)?;
    let mut by_region: BTreeMap<&str, Vec<SurveyRecord>> = BTreeMap::new();
    for r in survey {
        by_region.entry(r.region_id.as_str()).or_default().push(r.clone());
    }
    let empty = Vec::new();
    let out = regions
        .regions
        .iter()
        .map(|reg| {
            let recs = by_region.get(reg.id.as_str()).unwrap_or(&empty);
            let est = direct_total(recs, &weights, &reg.id)?;
            Ok(log_scale(est, reg.population_count, var_floor))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, weights))
}

fn validate_inputs(regions: &RegionSet, survey: &[SurveyRecord], census: &[CensusCell]) -> Result<()> {
    for (k, r) in survey.iter().enumerate() {
        if regions.index_of(&r.region_id).is_none() {
            return Err(Error::Survey(format!(
                "survey record {}: unknown region `{}`",
                k + 1,
                r.region_id
            )));
        }
        if !r.y.is_finite() {
            return Err(Error::Survey(format!("survey record {}: non-finite y", k + 1)));
        }
    }
    for (k, c) in census.iter().enumerate() {
        if regions.index_of(&c.region_id).is_none() {
            return Err(Error::Survey(format!(
                "census cell {}: unknown region `{}`",
                k + 1,
                c.region_id
            )));
        }
    }
    Ok(())
}

pub fn read_survey_csv(path: &Path) -> Result<Vec<SurveyRecord>> {
    crate::io::read_csv(path)
}

pub fn read_census_csv(path: &Path) -> Result<Vec<CensusCell>> {
    crate::io::read_csv(path)
}
