//! Flat TOML pipeline configuration. Every key has a default; relative paths
//! are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::LrCovariateSource;
use crate::error::{Error, Result};
use crate::geo::{AdjacencyRule, AdjacencyUniverse};
use crate::kriging::Anchor;
use crate::sfh::RandomEffect;
use crate::simulate::{ScenarioConfig, SimulateOver, VariogramScale};
use crate::variogram::{EstimatorKind, Family, NU_GRID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodMode {
    /// Use `q` as given.
    #[default]
    Fixed,
    /// Select `q` among `q_candidates` by cross-validation.
    Cv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulateMode {
    #[default]
    Scenario,
    Rounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // Inputs
    pub regions: PathBuf,
    pub survey: PathBuf,
    pub census: PathBuf,
    pub grid: PathBuf,
    /// Optional area-level covariates CSV (`region_id` plus numeric columns).
    pub covariates: Option<PathBuf>,
    pub group_property: String,
    pub crs_note: String,
    pub var_floor: f64,

    // Variogram
    pub variogram_family: Family,
    /// Scale of the variogram driving covariate simulation.
    pub variogram_scale: VariogramScale,
    pub variogram_estimator: EstimatorKind,
    pub variogram_bins: usize,
    /// Maximum lag; 0 selects a third of the grid's bounding-box diagonal.
    pub variogram_max_lag: f64,
    /// Matérn smoothness; 0 searches the smoothness grid.
    pub variogram_nu: f64,

    // Kriging
    pub neighborhood: NeighborhoodMode,
    pub q: usize,
    pub q_candidates: Vec<usize>,
    pub cv_folds: usize,
    pub buffer_km: f64,
    pub nodes_per_region: usize,
    pub block_anchor: Anchor,

    // Model
    pub model_covariates: Vec<String>,
    /// Name under which block-kriged grid means enter the covariate table.
    pub upscaled_covariate: String,
    pub standardize: bool,
    pub intercept: bool,
    pub random_effects: Vec<RandomEffect>,
    pub adjacency: AdjacencyRule,
    pub adjacency_scope: AdjacencyUniverse,
    pub adjacency_tolerance: f64,
    /// Report naive analytical MSEs from `fit`.
    pub naive_mse: bool,

    // Bootstrap and testing
    pub bootstrap_b: usize,
    pub level: f64,
    pub n_sim_points: usize,
    pub simulate_over: SimulateOver,
    pub simulate_covariate: bool,
    pub lr_b: usize,
    /// `rho` or a covariate name.
    pub test_parameter: String,
    pub lr_covariate_source: LrCovariateSource,

    // Simulate subcommand
    pub simulate_mode: SimulateMode,
    pub simulate_rounds: usize,
    pub scenario_nx: usize,
    pub scenario_ny: usize,
    pub scenario_cell_size: f64,
    pub scenario_grid_per_cell: usize,
    pub scenario_grid_margin: f64,
    pub scenario_beta0: f64,
    pub scenario_beta1: f64,
    pub scenario_sigma2_v: f64,
    pub scenario_rho: f64,
    pub scenario_grid_log_mean: f64,
    pub scenario_grid_sill: f64,
    pub scenario_grid_range: f64,
    pub scenario_grid_nu: f64,
    pub scenario_units_per_cell: usize,
    pub scenario_unit_sigma: f64,
    pub scenario_sampling_fraction: f64,

    // Run settings (command-line flags override)
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sc = ScenarioConfig::default();
        Self {
            regions: "regions.geojson".into(),
            survey: "survey.csv".into(),
            census: "census.csv".into(),
            grid: "grid.csv".into(),
            covariates: None,
            group_property: "group".into(),
            crs_note: "projected coordinates in km".into(),
            var_floor: 1e-8,
            variogram_family: Family::Matern,
            variogram_scale: VariogramScale::Log,
            variogram_estimator: EstimatorKind::Classical,
            variogram_bins: crate::variogram::DEFAULT_BINS,
            variogram_max_lag: 0.0,
            variogram_nu: 0.0,
            neighborhood: NeighborhoodMode::Fixed,
            q: 15,
            q_candidates: vec![5, 10, 15, 20, 30],
            cv_folds: 5,
            buffer_km: 10.0,
            nodes_per_region: 64,
            block_anchor: Anchor::Centroid,
            model_covariates: vec!["grid_block_mean".into()],
            upscaled_covariate: "grid_block_mean".into(),
            standardize: true,
            intercept: true,
            random_effects: vec![RandomEffect::Sar],
            adjacency: AdjacencyRule::SharedEdge,
            adjacency_scope: AdjacencyUniverse::ModeledOnly,
            adjacency_tolerance: 1e-6,
            naive_mse: false,
            bootstrap_b: 500,
            level: 0.95,
            n_sim_points: 1259,
            simulate_over: SimulateOver::Region,
            simulate_covariate: true,
            lr_b: 199,
            test_parameter: "rho".into(),
            lr_covariate_source: LrCovariateSource::Simulated,
            simulate_mode: SimulateMode::Scenario,
            simulate_rounds: 10,
            scenario_nx: sc.nx,
            scenario_ny: sc.ny,
            scenario_cell_size: sc.cell_size,
            scenario_grid_per_cell: sc.grid_per_cell,
            scenario_grid_margin: sc.grid_margin,
            scenario_beta0: sc.beta[0],
            scenario_beta1: sc.beta[1],
            scenario_sigma2_v: sc.sigma2_v,
            scenario_rho: sc.rho,
            scenario_grid_log_mean: sc.grid_log_mean,
            scenario_grid_sill: sc.grid_variogram.partial_sill,
            scenario_grid_range: sc.grid_variogram.range,
            scenario_grid_nu: sc.grid_variogram.smoothness,
            scenario_units_per_cell: sc.units_per_cell,
            scenario_unit_sigma: sc.unit_sigma,
            scenario_sampling_fraction: sc.sampling_fraction,
            seed: 1,
            workers: 1,
            out: "out".into(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.regions);
        fix(&mut self.survey);
        fix(&mut self.census);
        fix(&mut self.grid);
        if let Some(c) = self.covariates.as_mut() {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.var_floor > 0.0) {
            return bad(format!("var_floor must be > 0, got {}", self.var_floor));
        }
        if self.variogram_bins < 3 {
            return bad("variogram_bins must be >= 3".into());
        }
        if !(self.variogram_max_lag >= 0.0) {
            return bad("variogram_max_lag must be >= 0".into());
        }
        if self.variogram_nu != 0.0 && !(self.variogram_nu > 0.0) {
            return bad("variogram_nu must be > 0 (or 0 to search)".into());
        }
        if self.q == 0 || self.q > crate::kriging::MAX_NEIGHBORS {
            return bad(format!("q must be in 1..={}", crate::kriging::MAX_NEIGHBORS));
        }
        if self.neighborhood == NeighborhoodMode::Cv && (self.q_candidates.is_empty() || self.cv_folds < 2) {
            return bad("cross-validated neighborhoods need q_candidates and cv_folds >= 2".into());
        }
        if !(self.buffer_km >= 0.0) || self.nodes_per_region == 0 {
            return bad("buffer_km must be >= 0 and nodes_per_region > 0".into());
        }
        if self.random_effects.is_empty() {
            return bad("random_effects must list at least one model".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must be in (0, 1), got {}", self.level));
        }
        if self.bootstrap_b == 0 || self.lr_b == 0 {
            return bad("bootstrap_b and lr_b must be >= 1".into());
        }
        if self.n_sim_points < self.q {
            return bad(format!("n_sim_points ({}) must be >= q ({})", self.n_sim_points, self.q));
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        self.scenario().validate()
    }

    /// Smoothness fixed for variogram fits, if any.
    pub fn fixed_nu(&self) -> Option<f64> {
        (self.variogram_nu > 0.0).then_some(self.variogram_nu)
    }

    pub fn nu_grid(&self) -> &'static [f64] {
        &NU_GRID
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let mut sc = ScenarioConfig {
            nx: self.scenario_nx,
            ny: self.scenario_ny,
            cell_size: self.scenario_cell_size,
            grid_per_cell: self.scenario_grid_per_cell,
            grid_margin: self.scenario_grid_margin,
            beta: [self.scenario_beta0, self.scenario_beta1],
            sigma2_v: self.scenario_sigma2_v,
            rho: self.scenario_rho,
            grid_log_mean: self.scenario_grid_log_mean,
            units_per_cell: self.scenario_units_per_cell,
            unit_sigma: self.scenario_unit_sigma,
            sampling_fraction: self.scenario_sampling_fraction,
            ..ScenarioConfig::default()
        };
        sc.grid_variogram.partial_sill = self.scenario_grid_sill;
        sc.grid_variogram.range = self.scenario_grid_range;
        sc.grid_variogram.smoothness = self.scenario_grid_nu;
        sc
    }

    /// SHA-256 of the canonical JSON form, excluding settings that must not
    /// change results (`workers`, `out`).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("workers");
            o.remove("out");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
