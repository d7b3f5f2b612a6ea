//! Subcommand orchestration. Every command loads and validates all of its
//! inputs first, computes, and returns an [`OutputSet`]; nothing touches the
//! output directory until the whole command has succeeded.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bootstrap::{
    self, group_totals, mse_eblup, run_bootstrap, run_lr_test, summarize_se_ci, BootstrapInputs, BootstrapRun,
    CovariateRounds, ParameterSummary, TestedParameter,
};
use crate::config::{NeighborhoodMode, PipelineConfig, SimulateMode};
use crate::diagnostics::{
    efficiency_table, envelope_share, mean_cvs, point_count_table, prediction_envelope, qq_band_share, qq_normal,
    variogram_envelope,
};
use crate::error::{Error, Result};
use crate::geo::{build_contiguity, density_for_nodes, point_in_region, read_regions_geojson, Point, RegionSet};
use crate::io::{read_grid_csv, OutputSet, Provenance};
use crate::kriging::{upscale_all, BlockOptions, BlockPrediction};
use crate::rng::{Lane, Stream};
use crate::sfh::{back_transform, build_design, AreaPrediction, CovariateTable, Design, ModelSpec, MseSource, RandomEffect, SfhFit, Structure};
use crate::simulate::{make_scenario, CovariateSimulator, VariogramScale};
use crate::survey::{direct_estimates, read_census_csv, read_survey_csv, CensusCell, DirectEstimate, SurveyRecord, WeightTable};
use crate::variogram::{cv_neighborhood, default_max_lag, empirical_variogram, fit_ols, CvCurve, EmpiricalVariogram, VariogramDocument, VariogramModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Direct,
    Upscale,
    Fit,
    Bootstrap,
    Test,
    Simulate,
    Diagnose,
}

/// Parsed input files.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub regions: RegionSet,
    pub survey: Vec<SurveyRecord>,
    pub census: Vec<CensusCell>,
    pub grid: Option<(Vec<Point>, Vec<f64>)>,
    pub covariates: Option<CovariateTable>,
}

fn uses_grid(cfg: &PipelineConfig, cmd: Command) -> bool {
    match cmd {
        Command::Upscale => true,
        Command::Direct => false,
        Command::Simulate => cfg.simulate_mode == SimulateMode::Rounds,
        _ => cfg.model_covariates.contains(&cfg.upscaled_covariate),
    }
}

/// Reads every file the command needs; any parse error aborts before work.
pub fn load_inputs(cfg: &PipelineConfig, cmd: Command) -> Result<Option<Inputs>> {
    if cmd == Command::Simulate && cfg.simulate_mode == SimulateMode::Scenario {
        return Ok(None);
    }
    let regions = read_regions_geojson(&cfg.regions, &cfg.crs_note, Some(&cfg.group_property))?;
    let needs_survey = !matches!(cmd, Command::Upscale | Command::Simulate);
    let (survey, census) = if needs_survey {
        (read_survey_csv(&cfg.survey)?, read_census_csv(&cfg.census)?)
    } else {
        (Vec::new(), Vec::new())
    };
    let grid = if uses_grid(cfg, cmd) { Some(read_grid_csv(&cfg.grid)?) } else { None };
    let covariates = match (&cfg.covariates, needs_survey && cmd != Command::Direct) {
        (Some(p), true) => Some(CovariateTable::read_csv(p)?),
        _ => None,
    };
    Ok(Some(Inputs { regions, survey, census, grid, covariates }))
}

// ---------------------------------------------------------------------------
// Stages

pub struct DirectStage {
    pub estimates: Vec<DirectEstimate>,
    pub weights: WeightTable,
}

pub fn direct_stage(cfg: &PipelineConfig, inputs: &Inputs) -> Result<DirectStage> {
    let (estimates, weights) = direct_estimates(&inputs.regions, &inputs.survey, &inputs.census, cfg.var_floor)?;
    Ok(DirectStage { estimates, weights })
}

#[derive(Debug)]
pub struct UpscaleStage {
    pub points: Vec<Point>,
    pub values: Vec<f64>,
    pub empirical: EmpiricalVariogram,
    pub bk_model: VariogramModel,
    pub sim_empirical: EmpiricalVariogram,
    pub sim_model: VariogramModel,
    pub q: usize,
    pub cv: Option<CvCurve>,
    pub density: f64,
    pub blocks: Vec<Result<BlockPrediction>>,
}

impl UpscaleStage {
    pub fn block_means(&self, regions: &RegionSet) -> Vec<(String, f64)> {
        regions
            .regions
            .iter()
            .zip(&self.blocks)
            .filter_map(|(r, b)| b.as_ref().ok().map(|b| (r.id.clone(), b.block_mean)))
            .collect()
    }
}

pub fn upscale_stage(cfg: &PipelineConfig, inputs: &Inputs) -> Result<UpscaleStage> {
    let (all_points, all_values) = inputs.grid.as_ref().ok_or_else(|| Error::Config("grid file not loaded".into()))?;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (p, v) in all_points.iter().zip(all_values) {
        if inputs.regions.distance_to_union(p) <= cfg.buffer_km {
            points.push(*p);
            values.push(*v);
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no usable grid points within {} of the regions",
            cfg.buffer_km
        )));
    }
    let max_lag = if cfg.variogram_max_lag > 0.0 { cfg.variogram_max_lag } else { default_max_lag(&points) };
    let empirical = empirical_variogram(&points, &values, cfg.variogram_estimator, max_lag, cfg.variogram_bins)?;
    let bk_model = fit_ols(&empirical, cfg.variogram_family, cfg.fixed_nu())?.model;
    let (sim_empirical, sim_model) = match cfg.variogram_scale {
        VariogramScale::Raw => (empirical.clone(), bk_model),
        VariogramScale::Log => {
            if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "log-scale variogram needs positive grid values, found {v}"
                )));
            }
            let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
            let e = empirical_variogram(&points, &logs, cfg.variogram_estimator, max_lag, cfg.variogram_bins)?;
            let m = fit_ols(&e, cfg.variogram_family, cfg.fixed_nu())?.model;
            (e, m)
        }
    };
    let (q, cv) = match cfg.neighborhood {
        NeighborhoodMode::Fixed => {
            log::info!("neighborhood pinned at q = {}; cross-validation skipped", cfg.q);
            (cfg.q, None)
        }
        NeighborhoodMode::Cv => {
            let curve = cv_neighborhood(
                &points,
                &values,
                &bk_model,
                &cfg.q_candidates,
                cfg.cv_folds,
                Stream::new(cfg.seed, 0, Lane::Folds),
            )?;
            (curve.selected, Some(curve))
        }
    };
    let density = density_for_nodes(&inputs.regions, cfg.nodes_per_region);
    let opts = BlockOptions { anchor: cfg.block_anchor };
    let blocks = upscale_all(&inputs.regions, &points, &values, &bk_model, q, density, opts);
    Ok(UpscaleStage { points, values, empirical, bk_model, sim_empirical, sim_model, q, cv, density, blocks })
}

pub struct FitStage {
    pub direct: DirectStage,
    pub upscale: Option<UpscaleStage>,
    pub design: Design,
    pub w: Option<DMatrix<f64>>,
    pub fits: Vec<(RandomEffect, SfhFit)>,
}

pub fn fit_stage(cfg: &PipelineConfig, inputs: &Inputs) -> Result<FitStage> {
    let direct = direct_stage(cfg, inputs)?;
    let mut table = inputs.covariates.clone().unwrap_or_default();
    let upscale = if uses_grid(cfg, Command::Fit) {
        let up = upscale_stage(cfg, inputs)?;
        table.set_column(&cfg.upscaled_covariate, &up.block_means(&inputs.regions));
        Some(up)
    } else {
        None
    };
    let spec = ModelSpec {
        covariates: cfg.model_covariates.clone(),
        standardize: cfg.standardize,
        intercept: cfg.intercept,
        random_effect: cfg.random_effects[0],
    };
    let design = build_design(&direct.estimates, &table, &spec)?;
    let needs_w = cfg.random_effects.contains(&RandomEffect::Sar) || cfg.test_parameter == "rho";
    let w = if needs_w {
        let full = build_contiguity(&inputs.regions, cfg.adjacency, cfg.adjacency_tolerance)?;
        Some(full.restrict(&design.rows, cfg.adjacency_scope).w)
    } else {
        None
    };
    let mut fits = Vec::new();
    for &effect in &cfg.random_effects {
        let wx = if effect == RandomEffect::Sar { w.as_ref() } else { None };
        let fit = Structure::new(design.v_eps.clone(), wx)?.fit(&design.y, &design.x, &design.names, effect)?;
        fits.push((effect, fit));
    }
    Ok(FitStage { direct, upscale, design, w, fits })
}

fn effect_name(e: RandomEffect) -> &'static str {
    match e {
        RandomEffect::Independent => "independent",
        RandomEffect::Sar => "sar",
    }
}

fn predictions(
    inputs: &Inputs,
    design: &Design,
    fit: &SfhFit,
    mse: Option<&[f64]>,
    source: MseSource,
) -> Result<Vec<AreaPrediction>> {
    design
        .region_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let n = inputs.regions.get(id).map(|r| r.population_count).unwrap_or(0);
            back_transform(id.clone(), fit.eblup(i), mse.map(|m| m[i]), source, n)
        })
        .collect()
}

fn simulator(cfg: &PipelineConfig, inputs: &Inputs, up: &UpscaleStage) -> Result<CovariateSimulator> {
    let (_, raw) = (&up.points, &up.values);
    CovariateSimulator::new(
        inputs.regions.clone(),
        up.density,
        up.points.clone(),
        raw.clone(),
        up.sim_model,
        cfg.variogram_scale,
        up.bk_model,
        up.q,
        cfg.n_sim_points,
        cfg.simulate_over,
        cfg.buffer_km,
        BlockOptions { anchor: cfg.block_anchor },
    )
}

struct BootstrapStage {
    run: BootstrapRun,
    summary: Vec<ParameterSummary>,
    mse: Vec<f64>,
}

fn bootstrap_stage(
    cfg: &PipelineConfig,
    stage: &FitStage,
    sim: Option<&CovariateSimulator>,
    effect: RandomEffect,
    fit: &SfhFit,
    envelope_bins: Option<(f64, usize)>,
) -> Result<BootstrapStage> {
    let inputs = BootstrapInputs {
        design: &stage.design,
        w: stage.w.as_ref(),
        effect,
        covariate: sim.map(|s| CovariateRounds {
            simulator: s,
            column: cfg.upscaled_covariate.clone(),
            envelope_bins,
        }),
    };
    let run = run_bootstrap(fit, &inputs, cfg.bootstrap_b, cfg.seed)?;
    let summary = summarize_se_ci(&run, fit, cfg.level)?;
    let mse = mse_eblup(&run)?;
    Ok(BootstrapStage { run, summary, mse })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Serialize)]
struct CoverageRow {
    region_id: String,
    n_sample: u64,
    usable: bool,
    uncovered_cells: usize,
    uncovered_population: u64,
}

#[derive(Serialize)]
struct BlockRow {
    region_id: String,
    #[serde(with = "crate::io::na_float")]
    block_mean: f64,
    #[serde(with = "crate::io::na_float")]
    kriging_variance: f64,
    neighborhood: usize,
    n_nodes: usize,
    note: String,
}

#[derive(Serialize)]
struct VariogramReport<'a> {
    provenance: &'a Provenance,
    kriging_model: VariogramDocument,
    simulation_model: VariogramDocument,
    simulation_scale: VariogramScale,
    empirical: &'a EmpiricalVariogram,
    simulation_empirical: &'a EmpiricalVariogram,
    q: usize,
    grid_points_used: usize,
    quadrature_density: f64,
}

#[derive(Serialize)]
struct FitReport<'a> {
    provenance: &'a Provenance,
    random_effect: &'static str,
    n_areas: usize,
    names: &'a [String],
    beta: &'a [f64],
    beta_se: &'a [f64],
    sigma2_v: f64,
    rho: f64,
    loglik: f64,
    boundary: bool,
    rho_bounds: Option<(f64, f64)>,
    convergence: &'a crate::sfh::Convergence,
    scalings: &'a [crate::sfh::ColumnScaling],
}

#[derive(Serialize)]
struct BootstrapReport<'a> {
    provenance: &'a Provenance,
    random_effect: &'static str,
    b: usize,
    successes: usize,
    reliable: bool,
    failures: &'a [(u64, String)],
    parameters: &'a [ParameterSummary],
}

#[derive(Serialize)]
struct MseRow {
    region_id: String,
    mse_log: f64,
}

#[derive(Serialize)]
struct LrReport<'a> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    result: &'a bootstrap::LrTestResult,
}

#[derive(Serialize)]
struct RoundRow {
    round: u64,
    region_id: String,
    block_mean: f64,
    kriging_variance: f64,
}

#[derive(Serialize)]
struct DiagnoseSummary<'a> {
    provenance: &'a Provenance,
    random_effect: &'static str,
    mean_cv_direct: f64,
    mean_cv_model: f64,
    cv_reduction: f64,
    qq_residual_band_share: f64,
    qq_effect_band_share: f64,
    variogram_envelope_share: Option<f64>,
}

fn block_rows(regions: &RegionSet, blocks: &[Result<BlockPrediction>]) -> Vec<BlockRow> {
    regions
        .regions
        .iter()
        .zip(blocks)
        .map(|(r, b)| match b {
            Ok(b) => BlockRow {
                region_id: r.id.clone(),
                block_mean: b.block_mean,
                kriging_variance: b.kriging_variance,
                neighborhood: b.neighborhood,
                n_nodes: b.n_nodes,
                note: b.note.clone().unwrap_or_default(),
            },
            Err(e) => BlockRow {
                region_id: r.id.clone(),
                block_mean: f64::NAN,
                kriging_variance: f64::NAN,
                neighborhood: 0,
                n_nodes: 0,
                note: e.to_string(),
            },
        })
        .collect()
}

fn add_upscale_outputs(out: &mut OutputSet, p: &Provenance, cfg: &PipelineConfig, inputs: &Inputs, up: &UpscaleStage) -> Result<()> {
    out.add_json(
        "variogram.json",
        &VariogramReport {
            provenance: p,
            kriging_model: up.bk_model.document(),
            simulation_model: up.sim_model.document(),
            simulation_scale: cfg.variogram_scale,
            empirical: &up.empirical,
            simulation_empirical: &up.sim_empirical,
            q: up.q,
            grid_points_used: up.points.len(),
            quadrature_density: up.density,
        },
    )?;
    out.add_csv("block_means.csv", &block_rows(&inputs.regions, &up.blocks), p)?;
    if let Some(cv) = &up.cv {
        out.add_csv("cv_curve.csv", &cv.entries, p)?;
    }
    Ok(())
}

fn fit_report<'a>(p: &'a Provenance, stage: &'a FitStage, effect: RandomEffect, fit: &'a SfhFit) -> FitReport<'a> {
    FitReport {
        provenance: p,
        random_effect: effect_name(effect),
        n_areas: stage.design.len(),
        names: &fit.names,
        beta: &fit.beta,
        beta_se: &fit.beta_se,
        sigma2_v: fit.sigma2_v,
        rho: fit.rho,
        loglik: fit.loglik,
        boundary: fit.boundary,
        rho_bounds: fit.rho_bounds,
        convergence: &fit.convergence,
        scalings: &stage.design.scalings,
    }
}

/// Runs one subcommand and returns its outputs.
pub fn run(cfg: &PipelineConfig, cmd: Command) -> Result<OutputSet> {
    cfg.validate()?;
    let p = Provenance::new(cfg.hash(), cfg.seed);
    let loaded = load_inputs(cfg, cmd)?;
    let mut out = OutputSet::new();
    let Some(inputs) = loaded else {
        let scenario = make_scenario(&cfg.scenario(), cfg.seed)?;
        return scenario.outputs(&p);
    };
    match cmd {
        Command::Direct => {
            let d = direct_stage(cfg, &inputs)?;
            out.add_csv("direct.csv", &d.estimates, &p)?;
            let uncovered = d.weights.uncovered_by_region();
            let rows: Vec<CoverageRow> = d
                .estimates
                .iter()
                .map(|e| {
                    let (c, n) = uncovered.get(&e.region_id).copied().unwrap_or((0, 0));
                    CoverageRow {
                        region_id: e.region_id.clone(),
                        n_sample: e.n_i,
                        usable: e.usable,
                        uncovered_cells: c,
                        uncovered_population: n,
                    }
                })
                .collect();
            out.add_csv("coverage.csv", &rows, &p)?;
        }
        Command::Upscale => {
            let up = upscale_stage(cfg, &inputs)?;
            add_upscale_outputs(&mut out, &p, cfg, &inputs, &up)?;
        }
        Command::Simulate => {
            let up = upscale_stage(cfg, &inputs)?;
            let sim = simulator(cfg, &inputs, &up)?;
            let mut rows = Vec::new();
            for round in 1..=cfg.simulate_rounds as u64 {
                let r = sim.round(Stream::new(cfg.seed, round, Lane::Locations))?;
                rows.extend(r.blocks.into_iter().map(|b| RoundRow {
                    round,
                    region_id: b.region_id,
                    block_mean: b.block_mean,
                    kriging_variance: b.kriging_variance,
                }));
            }
            out.add_csv("rounds.csv", &rows, &p)?;
        }
        Command::Fit => {
            let stage = fit_stage(cfg, &inputs)?;
            out.add_csv("direct.csv", &stage.direct.estimates, &p)?;
            if let Some(up) = &stage.upscale {
                add_upscale_outputs(&mut out, &p, cfg, &inputs, up)?;
            }
            for (effect, fit) in &stage.fits {
                let name = effect_name(*effect);
                out.add_json(&format!("fit_{name}.json"), &fit_report(&p, &stage, *effect, fit))?;
                let preds = if cfg.naive_mse {
                    predictions(&inputs, &stage.design, fit, Some(fit.naive_mse().as_slice()), MseSource::AnalyticalNaive)?
                } else {
                    predictions(&inputs, &stage.design, fit, None, MseSource::None)?
                };
                out.add_csv(&format!("predictions_{name}.csv"), &preds, &p)?;
            }
        }
        Command::Bootstrap => {
            let stage = fit_stage(cfg, &inputs)?;
            let sim = match (&stage.upscale, cfg.simulate_covariate) {
                (Some(up), true) => Some(simulator(cfg, &inputs, up)?),
                _ => None,
            };
            for (effect, fit) in &stage.fits {
                let name = effect_name(*effect);
                let b = bootstrap_stage(cfg, &stage, sim.as_ref(), *effect, fit, None)?;
                out.add_json(
                    &format!("bootstrap_{name}.json"),
                    &BootstrapReport {
                        provenance: &p,
                        random_effect: name,
                        b: b.run.b,
                        successes: b.run.replicates.len(),
                        reliable: b.run.reliable,
                        failures: &b.run.failures,
                        parameters: &b.summary,
                    },
                )?;
                let mse: Vec<MseRow> = stage
                    .design
                    .region_ids
                    .iter()
                    .zip(&b.mse)
                    .map(|(id, m)| MseRow { region_id: id.clone(), mse_log: *m })
                    .collect();
                out.add_csv(&format!("mse_{name}.csv"), &mse, &p)?;
                let preds = predictions(&inputs, &stage.design, fit, Some(&b.mse), MseSource::Bootstrap)?;
                out.add_csv(&format!("predictions_{name}.csv"), &preds, &p)?;
            }
        }
        Command::Test => {
            let stage = fit_stage(cfg, &inputs)?;
            let sim = match (&stage.upscale, cfg.simulate_covariate) {
                (Some(up), true) => Some(simulator(cfg, &inputs, up)?),
                _ => None,
            };
            let parameter = if cfg.test_parameter == "rho" {
                TestedParameter::Rho
            } else {
                TestedParameter::Coefficient(cfg.test_parameter.clone())
            };
            let inputs_b = BootstrapInputs {
                design: &stage.design,
                w: stage.w.as_ref(),
                effect: cfg.random_effects[0],
                covariate: sim.as_ref().map(|s| CovariateRounds {
                    simulator: s,
                    column: cfg.upscaled_covariate.clone(),
                    envelope_bins: None,
                }),
            };
            let r = run_lr_test(&inputs_b, &parameter, cfg.lr_b, cfg.seed, cfg.lr_covariate_source)?;
            out.add_json("lr_test.json", &LrReport { provenance: &p, result: &r })?;
        }
        Command::Diagnose => diagnose(cfg, &inputs, &p, &mut out)?,
    }
    Ok(out)
}

fn diagnose(cfg: &PipelineConfig, inputs: &Inputs, p: &Provenance, out: &mut OutputSet) -> Result<()> {
    let stage = fit_stage(cfg, inputs)?;
    let sim = match (&stage.upscale, cfg.simulate_covariate) {
        (Some(up), true) => Some(simulator(cfg, inputs, up)?),
        _ => None,
    };
    let bins = stage.upscale.as_ref().map(|u| (u.sim_empirical.max_lag, cfg.variogram_bins));
    let mut variogram_done = false;
    for (effect, fit) in &stage.fits {
        let name = effect_name(*effect);
        let b = bootstrap_stage(cfg, &stage, sim.as_ref(), *effect, fit, bins)?;
        let ids = &stage.design.region_ids;

        let eblups = fit.eblups();
        let resid: Vec<f64> = (0..ids.len())
            .map(|i| (stage.design.y[i] - eblups[i]) / stage.design.v_eps[i].sqrt())
            .collect();
        let innov: Vec<f64> = fit.innovations(stage.w.as_ref()).iter().copied().collect();
        let mut qq = qq_normal("standardized_residual", ids, &resid, cfg.level)?;
        let qq_res_share = qq_band_share(&qq);
        let qq_eff = qq_normal("random_effect", ids, &innov, cfg.level)?;
        let qq_eff_share = qq_band_share(&qq_eff);
        qq.extend(qq_eff);
        out.add_csv(&format!("diagnostics/qq_{name}.csv"), &qq, p)?;
        out.add_csv(
            &format!("diagnostics/prediction_envelope_{name}.csv"),
            &prediction_envelope(&b.run, &eblups, cfg.level)?,
            p,
        )?;

        let mut env_share = None;
        if let (Some(up), Some((max_lag, n_bins)), false) = (&stage.upscale, bins, variogram_done) {
            let data = bootstrap::fill_bins(&up.sim_empirical.bins, max_lag, n_bins);
            let sims: Vec<Vec<f64>> =
                b.run.replicates.iter().filter_map(|r| r.round.as_ref().map(|s| s.variogram.clone())).collect();
            if !sims.is_empty() {
                let rows = variogram_envelope(&data, &sims, max_lag, cfg.level);
                env_share = Some(envelope_share(&rows));
                out.add_csv("diagnostics/variogram_envelope.csv", &rows, p)?;
                let grid_counts: Vec<usize> = ids
                    .iter()
                    .map(|id| {
                        let r = inputs.regions.get(id).expect("design ids come from regions");
                        up.points.iter().filter(|q| point_in_region(q, r)).count()
                    })
                    .collect();
                out.add_csv("diagnostics/point_counts.csv", &point_count_table(&b.run, &grid_counts), p)?;
                variogram_done = true;
            }
        }

        let preds = predictions(inputs, &stage.design, fit, Some(&b.mse), MseSource::Bootstrap)?;
        let eff = efficiency_table(&stage.direct.estimates, &preds);
        let (cv_d, cv_m) = mean_cvs(&eff);
        out.add_csv(&format!("diagnostics/efficiency_{name}.csv"), &eff, p)?;

        let groups: Vec<String> = ids
            .iter()
            .map(|id| inputs.regions.get(id).and_then(|r| r.group.clone()).unwrap_or_else(|| "all".into()))
            .collect();
        let pops: Vec<u64> = ids.iter().map(|id| inputs.regions.get(id).map(|r| r.population_count).unwrap_or(0)).collect();
        let tau_hat: Vec<f64> = preds.iter().map(|q| q.tau_hat).collect();
        let direct_by_id: BTreeMap<&str, f64> =
            stage.direct.estimates.iter().map(|d| (d.region_id.as_str(), d.tau_tilde)).collect();
        let tau_direct: Vec<f64> = ids.iter().map(|id| direct_by_id[id.as_str()]).collect();
        let g = group_totals(&b.run, &groups, &pops, &tau_hat, &tau_direct, &b.mse, cfg.level)?;
        out.add_csv(&format!("diagnostics/groups_{name}.csv"), &g, p)?;
        out.add_json(
            &format!("diagnostics/summary_{name}.json"),
            &DiagnoseSummary {
                provenance: p,
                random_effect: name,
                mean_cv_direct: cv_d,
                mean_cv_model: cv_m,
                cv_reduction: 1.0 - cv_m / cv_d,
                qq_residual_band_share: qq_res_share,
                qq_effect_band_share: qq_eff_share,
                variogram_envelope_share: env_share,
            },
        )?;
    }
    Ok(())
}
