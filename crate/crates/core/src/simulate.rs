//! Gaussian and log-Gaussian random fields, conditional simulation by the
//! kriging identity `Y_c = Yhat + (Y* - Yhat*)`, covariate simulation rounds,
//! and synthetic end-to-end scenarios.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{
    build_contiguity, discretize_block, point_in_region, regions_to_geojson, AdjacencyRule, BlockQuadrature,
    Point, Polygon, Region, RegionSet, SamplingDomain,
};
use crate::io::{OutputSet, Provenance};
use crate::kriging::{self, BlockOptions, BlockPrediction};
use crate::rng::{Lane, Stream};
use crate::sfh::CovariateTable;
use crate::survey::{CensusCell, SurveyRecord};
use crate::variogram::{VariogramDocument, VariogramModel};

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldScale {
    Gaussian,
    LogGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    pub locations: Vec<Point>,
    pub values: Vec<f64>,
    pub scale: FieldScale,
    pub conditional: bool,
}

/// Distinct locations and, for each input, the index of its distinct copy.
fn dedup_locations(locations: &[Point]) -> (Vec<Point>, Vec<usize>) {
    let mut key: Vec<usize> = (0..locations.len()).collect();
    key.sort_by(|&a, &b| {
        locations[a]
            .x
            .total_cmp(&locations[b].x)
            .then(locations[a].y.total_cmp(&locations[b].y))
            .then(a.cmp(&b))
    });
    let mut unique = Vec::new();
    let mut map = vec![0usize; locations.len()];
    let mut first_of: Vec<usize> = Vec::new();
    for (pos, &i) in key.iter().enumerate() {
        if pos > 0 && locations[key[pos - 1]] == locations[i] {
            map[i] = map[key[pos - 1]];
        } else {
            first_of.push(i);
            map[i] = first_of.len() - 1;
        }
    }
    // Renumber by first appearance so the draw order follows the input order.
    let mut order: Vec<usize> = (0..first_of.len()).collect();
    order.sort_by_key(|&u| first_of[u]);
    let mut rank = vec![0usize; first_of.len()];
    for (r, &u) in order.iter().enumerate() {
        rank[u] = r;
        unique.push(locations[first_of[u]]);
    }
    for m in map.iter_mut() {
        *m = rank[*m];
    }
    (unique, map)
}

/// Lower Cholesky factor of the covariance on `locations`, escalating a
/// diagonal jitter (relative to the sill) until the factorization succeeds.
pub fn covariance_factor(locations: &[Point], model: &VariogramModel) -> Result<(DMatrix<f64>, f64)> {
    model.validate()?;
    let n = locations.len();
    let sill = model.sill();
    if sill <= 0.0 {
        return Ok((DMatrix::zeros(n, n), 0.0));
    }
    let c = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            sill
        } else {
            model.covariance(locations[i].dist(&locations[j]))
        }
    });
    for &j in &JITTERS {
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += j * sill;
        }
        if let Some(ch) = cj.cholesky() {
            if j > 0.0 {
                log::debug!("covariance factorization needed jitter {j:e} x sill on {n} locations");
            }
            return Ok((ch.unpack(), j * sill));
        }
    }
    Err(Error::Simulation(format!(
        "covariance on {n} locations is not positive definite even with jitter {:e}",
        JITTERS[JITTERS.len() - 1]
    )))
}

/// One zero-mean Gaussian realization with covariance `sill - gamma(h)`.
pub fn simulate_unconditional(locations: &[Point], model: &VariogramModel, stream: Stream) -> Result<FieldRealization> {
    let (unique, map) = dedup_locations(locations);
    let (l, _) = covariance_factor(&unique, model)?;
    let mut rng = stream.rng();
    let z = DVector::from_fn(unique.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let draw = l * z;
    Ok(FieldRealization {
        locations: locations.to_vec(),
        values: map.iter().map(|&u| draw[u]).collect(),
        scale: FieldScale::Gaussian,
        conditional: false,
    })
}

/// Conditional realization at `targets` given Gaussian-scale data, with
/// local ordinary kriging on `q` neighbors for both kriged terms.
pub fn simulate_conditional(
    targets: &[Point],
    data_points: &[Point],
    data_values: &[f64],
    model: &VariogramModel,
    q: usize,
    stream: Stream,
) -> Result<FieldRealization> {
    if data_points.is_empty() || data_points.len() != data_values.len() {
        return Err(Error::InvalidInput("conditional simulation needs matching, nonempty data".into()));
    }
    let q = q.min(data_points.len()).min(kriging::MAX_NEIGHBORS);
    let nd = data_points.len();
    let mut all = Vec::with_capacity(nd + targets.len());
    all.extend_from_slice(data_points);
    all.extend_from_slice(targets);
    let uncond = simulate_unconditional(&all, model, stream)?;
    let (sim_data, sim_targets) = uncond.values.split_at(nd);
    let values = targets
        .par_iter()
        .zip(sim_targets.par_iter())
        .map(|(t, ys)| {
            let w = kriging::point_weights(*t, data_points, model, q)?;
            Ok(w.apply(data_values) + ys - w.apply(sim_data))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(FieldRealization {
        locations: targets.to_vec(),
        values,
        scale: FieldScale::Gaussian,
        conditional: true,
    })
}

/// Scale on which the simulation variogram was fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramScale {
    Raw,
    #[default]
    Log,
}

/// Domain for uniformly drawn simulation locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulateOver {
    #[default]
    Region,
    Buffered,
}

/// Everything needed for one covariate round: new uniform locations, a
/// trajectory conditional on the observed grid, block kriging per region.
#[derive(Debug, Clone)]
pub struct CovariateSimulator {
    pub regions: RegionSet,
    pub quads: Vec<BlockQuadrature>,
    pub data_points: Vec<Point>,
    /// Observed grid values on the raw scale.
    pub data_values: Vec<f64>,
    /// Variogram driving the simulation (log scale when `scale` is Log).
    pub sim_model: VariogramModel,
    pub scale: VariogramScale,
    /// Variogram used for block kriging the simulated points (raw scale).
    pub bk_model: VariogramModel,
    pub q: usize,
    pub n_points: usize,
    pub over: SimulateOver,
    pub buffer: f64,
    pub block: BlockOptions,
    conditioning: Vec<f64>,
}

/// Output of one covariate round.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRound {
    pub locations: Vec<Point>,
    pub values: Vec<f64>,
    pub blocks: Vec<BlockPrediction>,
}

impl CovariateSimulator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        regions: RegionSet,
        density: f64,
        data_points: Vec<Point>,
        data_values: Vec<f64>,
        sim_model: VariogramModel,
        scale: VariogramScale,
        bk_model: VariogramModel,
        q: usize,
        n_points: usize,
        over: SimulateOver,
        buffer: f64,
        block: BlockOptions,
    ) -> Result<Self> {
        if data_points.len() != data_values.len() || data_points.is_empty() {
            return Err(Error::InvalidInput("covariate simulation needs nonempty conditioning data".into()));
        }
        if n_points < q {
            return Err(Error::InvalidInput(format!(
                "{n_points} simulated points cannot support neighborhood size {q}"
            )));
        }
        let conditioning = match scale {
            VariogramScale::Raw => data_values.clone(),
            VariogramScale::Log => data_values
                .iter()
                .map(|v| {
                    if *v > 0.0 {
                        Ok(v.ln())
                    } else {
                        Err(Error::InvalidInput(format!(
                            "log-Gaussian simulation needs positive grid values, found {v}"
                        )))
                    }
                })
                .collect::<Result<_>>()?,
        };
        let quads = regions
            .regions
            .iter()
            .map(|r| discretize_block(r, density))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            regions,
            quads,
            data_points,
            data_values,
            sim_model,
            scale,
            bk_model,
            q,
            n_points,
            over,
            buffer,
            block,
            conditioning,
        })
    }

    /// Simulated values at `locations` on the data scale.
    pub fn trajectory(&self, locations: &[Point], stream: Stream) -> Result<Vec<f64>> {
        let field = simulate_conditional(
            locations,
            &self.data_points,
            &self.conditioning,
            &self.sim_model,
            self.q,
            stream,
        )?;
        Ok(match self.scale {
            VariogramScale::Raw => field.values,
            VariogramScale::Log => field.values.into_iter().map(f64::exp).collect(),
        })
    }

    /// One round using the replicate's `Locations` and `Field` lanes.
    pub fn round(&self, stream: Stream) -> Result<CovariateRound> {
        let domain = match self.over {
            SimulateOver::Region => SamplingDomain::union(&self.regions),
            SimulateOver::Buffered => SamplingDomain::buffered(&self.regions, self.buffer),
        };
        let locations = crate::geo::sample_uniform_in(&domain, self.n_points, stream.with_lane(Lane::Locations))?;
        let values = self.trajectory(&locations, stream.with_lane(Lane::Field))?;
        let blocks = self
            .regions
            .regions
            .iter()
            .zip(&self.quads)
            .map(|(r, quad)| kriging::block_krige(r, quad, &locations, &values, &self.bk_model, self.q, self.block))
            .collect::<Result<Vec<_>>>()?;
        Ok(CovariateRound { locations, values, blocks })
    }
}

// ---------------------------------------------------------------------------
// Synthetic populations and scenarios

/// All units of one (area, size class, type class) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCell {
    pub region_id: String,
    pub size_class: u8,
    pub type_class: u8,
    pub values: Vec<f64>,
}

/// Fully enumerated finite population.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Population {
    pub cells: Vec<PopulationCell>,
}

impl Population {
    pub fn census(&self) -> Vec<CensusCell> {
        self.cells
            .iter()
            .map(|c| CensusCell {
                region_id: c.region_id.clone(),
                size_class: c.size_class,
                type_class: c.type_class,
                n: c.values.len() as u64,
            })
            .collect()
    }

    /// Per-area `(N_i, tau_i)` in first-appearance order.
    pub fn area_totals(&self) -> Vec<(String, u64, f64)> {
        let mut out: Vec<(String, u64, f64)> = Vec::new();
        for c in &self.cells {
            let s: f64 = c.values.iter().sum();
            match out.iter_mut().find(|o| o.0 == c.region_id) {
                Some(o) => {
                    o.1 += c.values.len() as u64;
                    o.2 += s;
                }
                None => out.push((c.region_id.clone(), c.values.len() as u64, s)),
            }
        }
        out
    }

    /// Stratified simple random sample without replacement with
    /// `n = clamp(round(f N), 1, N)` units per cell.
    pub fn draw_sample(&self, fraction: f64, stream: Stream) -> Result<Vec<SurveyRecord>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput(format!("sampling fraction must be in (0, 1], got {fraction}")));
        }
        let mut rng = stream.rng();
        let mut out = Vec::new();
        for c in &self.cells {
            let big_n = c.values.len();
            if big_n == 0 {
                continue;
            }
            let n = ((fraction * big_n as f64).round() as usize).clamp(1, big_n);
            let mut idx = sample_indices(&mut rng, big_n, n).into_vec();
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|k| SurveyRecord {
                region_id: c.region_id.clone(),
                size_class: c.size_class,
                type_class: c.type_class,
                y: c.values[k],
            }));
        }
        Ok(out)
    }
}

/// Settings for [`make_scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    /// Grid points per lattice-cell side.
    pub grid_per_cell: usize,
    /// Extra grid margin around the lattice (distance units).
    pub grid_margin: f64,
    pub beta: [f64; 2],
    pub sigma2_v: f64,
    pub rho: f64,
    /// Log-scale variogram of the gridded covariate.
    pub grid_variogram: VariogramModel,
    pub grid_log_mean: f64,
    pub units_per_cell: usize,
    /// Within-area log-SD of unit values.
    pub unit_sigma: f64,
    pub sampling_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            nx: 6,
            ny: 6,
            cell_size: 10.0,
            grid_per_cell: 4,
            grid_margin: 10.0,
            beta: [3.45, 0.61],
            sigma2_v: 0.2,
            rho: 0.7,
            grid_variogram: VariogramModel::matern(0.0, 0.5, 15.0, 1.5),
            grid_log_mean: 2.0,
            units_per_cell: 40,
            unit_sigma: 0.8,
            sampling_fraction: 0.1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nx == 0 || self.ny == 0 || self.nx * self.ny < 2 {
            return bad(format!("lattice {}x{} needs at least 2 areas", self.nx, self.ny));
        }
        if !(self.cell_size > 0.0) || self.grid_per_cell == 0 || !(self.grid_margin >= 0.0) {
            return bad("cell_size and grid_per_cell must be positive, grid_margin >= 0".into());
        }
        if !(self.sigma2_v >= 0.0) || !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("need sigma2_v >= 0 and |rho| < 1, got {} and {}", self.sigma2_v, self.rho));
        }
        if self.units_per_cell < 2 || !(self.unit_sigma >= 0.0) {
            return bad("units_per_cell must be >= 2 and unit_sigma >= 0".into());
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return bad(format!("sampling_fraction must be in (0, 1], got {}", self.sampling_fraction));
        }
        self.grid_variogram.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Known truth for one area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaTruth {
    pub region_id: String,
    pub group: String,
    pub population: u64,
    /// Mean of the raw grid covariate over the area.
    pub grid_mean: f64,
    pub z_std: f64,
    pub u: f64,
    pub log_mu: f64,
    pub mu: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub beta: [f64; 2],
    pub sigma2_v: f64,
    pub rho: f64,
    pub grid_variogram: VariogramDocument,
    pub grid_log_mean: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScenario {
    pub config: ScenarioConfig,
    pub master_seed: u64,
    pub regions: RegionSet,
    pub w: DMatrix<f64>,
    pub population: Population,
    pub survey: Vec<SurveyRecord>,
    pub census: Vec<CensusCell>,
    pub grid_points: Vec<Point>,
    pub grid_values: Vec<f64>,
    pub covariates: CovariateTable,
    pub areas: Vec<AreaTruth>,
    pub truth: ScenarioTruth,
}

pub const GROUP_PROPERTY: &str = "group";

/// Square lattice of `nx x ny` regions with quadrant groups.
pub fn lattice_regions(nx: usize, ny: usize, cell: f64, populations: &[u64]) -> Result<RegionSet> {
    let mut regions = Vec::with_capacity(nx * ny);
    for r in 0..ny {
        for c in 0..nx {
            let id = format!("R{r:02}C{c:02}");
            let (x0, y0) = (c as f64 * cell, r as f64 * cell);
            let group = format!("G{}", 2 * usize::from(2 * r >= ny) + usize::from(2 * c >= nx) + 1);
            let pop = populations.get(r * nx + c).copied().unwrap_or(0);
            regions.push(Region::new(id, vec![Polygon::rect(x0, y0, x0 + cell, y0 + cell)], pop)?.with_group(Some(group)));
        }
    }
    RegionSet::new(regions, "planar lattice, distance units as configured")
}

/// `(I - rho W)^-1 v` by dense solve.
pub fn sar_transform(w: &DMatrix<f64>, rho: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    if rho == 0.0 {
        return Ok(v.clone());
    }
    let m = w.nrows();
    let a = DMatrix::<f64>::identity(m, m) - w * rho;
    a.lu()
        .solve(v)
        .ok_or_else(|| Error::Singular(format!("I - rho W is singular at rho = {rho}")))
}

/// Builds a reproducible scenario from `(config, master_seed)`.
pub fn make_scenario(config: &ScenarioConfig, master_seed: u64) -> Result<SyntheticScenario> {
    config.validate()?;
    let (nx, ny, cell) = (config.nx, config.ny, config.cell_size);
    let m = nx * ny;
    let base = Stream::new(master_seed, 0, Lane::Scenario);

    // Gridded covariate: log-Gaussian field on a regular grid with margin.
    let step = cell / config.grid_per_cell as f64;
    let k_margin = (config.grid_margin / step).ceil() as i64;
    let gx = (nx * config.grid_per_cell) as i64;
    let gy = (ny * config.grid_per_cell) as i64;
    let mut grid_points = Vec::new();
    for iy in -k_margin..gy + k_margin {
        for ix in -k_margin..gx + k_margin {
            grid_points.push(Point::new((ix as f64 + 0.5) * step, (iy as f64 + 0.5) * step));
        }
    }
    let field = simulate_unconditional(&grid_points, &config.grid_variogram, base.with_lane(Lane::Field))?;
    let grid_values: Vec<f64> = field.values.iter().map(|v| (config.grid_log_mean + v).exp()).collect();

    // Unit counts per cell decide the area populations.
    let mut rng = base.with_lane(Lane::Population).rng();
    let mut counts = vec![[0usize; 6]; m];
    for area in counts.iter_mut() {
        for (k, c) in area.iter_mut().enumerate() {
            let size_factor = if k < 3 { 1.5 } else { 0.5 };
            let jitter = 0.7 + 0.6 * rng.random::<f64>();
            *c = ((config.units_per_cell as f64 * size_factor * jitter).round() as usize).max(2);
        }
    }
    let populations: Vec<u64> = counts.iter().map(|c| c.iter().sum::<usize>() as u64).collect();
    let regions = lattice_regions(nx, ny, cell, &populations)?;
    let contiguity = build_contiguity(&regions, AdjacencyRule::SharedEdge, 1e-9 * cell)?;
    let w = contiguity.w.clone();

    // Linking covariate: area mean of the grid.
    let mut sums = vec![(0.0, 0usize); m];
    for (p, v) in grid_points.iter().zip(&grid_values) {
        let c = (p.x / cell).floor();
        let r = (p.y / cell).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < nx && (r as usize) < ny {
            let i = r as usize * nx + c as usize;
            debug_assert!(point_in_region(p, &regions.regions[i]));
            sums[i].0 += v;
            sums[i].1 += 1;
        }
    }
    let grid_mean: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    let zbar = grid_mean.iter().sum::<f64>() / m as f64;
    let zsd = (grid_mean.iter().map(|z| (z - zbar).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    if !(zsd > 0.0) {
        return Err(Error::Simulation("grid covariate is constant across areas".into()));
    }
    let z_std: Vec<f64> = grid_mean.iter().map(|z| (z - zbar) / zsd).collect();

    let mut vrng = base.with_lane(Lane::RandomEffect).rng();
    let v = DVector::from_fn(m, |_, _| config.sigma2_v.sqrt() * vrng.sample::<f64, _>(StandardNormal));
    let u = sar_transform(&w, config.rho, &v)?;

    let mut cells = Vec::with_capacity(6 * m);
    let mut areas = Vec::with_capacity(m);
    for (i, region) in regions.regions.iter().enumerate() {
        let log_mu = config.beta[0] + config.beta[1] * z_std[i] + u[i];
        let mu = log_mu.exp();
        let mut area_cells = Vec::with_capacity(6);
        for (k, &n) in counts[i].iter().enumerate() {
            let size_class = (k / 3 + 1) as u8;
            let type_class = (k % 3 + 1) as u8;
            let effect = (0.6 * (size_class as f64 - 1.5) + 0.2 * (type_class as f64 - 2.0)).exp();
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    effect * (config.unit_sigma * z).exp()
                })
                .collect();
            area_cells.push(PopulationCell { region_id: region.id.clone(), size_class, type_class, values });
        }
        let total: f64 = area_cells.iter().flat_map(|c| c.values.iter()).sum();
        let scale = mu * region.population_count as f64 / total;
        for c in &mut area_cells {
            for v in &mut c.values {
                *v *= scale;
            }
        }
        cells.extend(area_cells);
        areas.push(AreaTruth {
            region_id: region.id.clone(),
            group: region.group.clone().unwrap_or_default(),
            population: region.population_count,
            grid_mean: grid_mean[i],
            z_std: z_std[i],
            u: u[i],
            log_mu,
            mu,
            tau: mu * region.population_count as f64,
        });
    }
    let population = Population { cells };
    let survey = population.draw_sample(config.sampling_fraction, base.with_lane(Lane::Sample))?;
    let census = population.census();

    let mut covariates = CovariateTable::new(vec!["grid_mean".into(), "n_units".into(), "aux_noise".into()]);
    let mut arng = base.with_lane(Lane::Auxiliary).rng();
    for (a, r) in areas.iter().zip(&regions.regions) {
        covariates.push(r.id.clone(), vec![a.grid_mean, a.population as f64, arng.sample(StandardNormal)]);
    }

    Ok(SyntheticScenario {
        config: config.clone(),
        master_seed,
        regions,
        w,
        population,
        survey,
        census,
        grid_points,
        grid_values,
        covariates,
        areas,
        truth: ScenarioTruth {
            beta: config.beta,
            sigma2_v: config.sigma2_v,
            rho: config.rho,
            grid_variogram: config.grid_variogram.document(),
            grid_log_mean: config.grid_log_mean,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
struct GridOut {
    x: f64,
    y: f64,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ScenarioManifest<'a> {
    provenance: &'a Provenance,
    master_seed: u64,
    config: &'a ScenarioConfig,
    truth: &'a ScenarioTruth,
    files: BTreeMap<&'static str, &'static str>,
}

pub const SCENARIO_FILES: [(&str, &str); 7] = [
    ("regions", "regions.geojson"),
    ("survey", "survey.csv"),
    ("census", "census.csv"),
    ("grid", "grid.csv"),
    ("covariates", "covariates.csv"),
    ("truth", "truth.csv"),
    ("manifest", "manifest.json"),
];

impl SyntheticScenario {
    /// Input files plus truth and manifest, ready to be written.
    pub fn outputs(&self, provenance: &Provenance) -> Result<OutputSet> {
        let mut out = OutputSet::new();
        let mut geojson = regions_to_geojson(&self.regions, GROUP_PROPERTY);
        if let Some(o) = geojson.as_object_mut() {
            o.insert("provenance".into(), serde_json::to_value(provenance).expect("provenance serializes"));
        }
        out.add_json("regions.geojson", &geojson)?;
        out.add_csv("survey.csv", &self.survey, provenance)?;
        out.add_csv("census.csv", &self.census, provenance)?;
        let grid: Vec<GridOut> = self
            .grid_points
            .iter()
            .zip(&self.grid_values)
            .map(|(p, v)| GridOut { x: p.x, y: p.y, value: *v })
            .collect();
        out.add_csv("grid.csv", &grid, provenance)?;
        let mut cov = Vec::new();
        let header: Vec<String> = std::iter::once("region_id".to_owned())
            .chain(self.covariates.columns.iter().cloned())
            .collect();
        cov.push(header);
        for (id, row) in self.covariates.region_ids.iter().zip(&self.covariates.values) {
            cov.push(std::iter::once(id.clone()).chain(row.iter().map(|v| v.to_string())).collect());
        }
        out.add("covariates.csv", raw_csv(&cov, provenance)?);
        out.add_csv("truth.csv", &self.areas, provenance)?;
        let manifest = ScenarioManifest {
            provenance,
            master_seed: self.master_seed,
            config: &self.config,
            truth: &self.truth,
            files: SCENARIO_FILES.iter().cloned().collect(),
        };
        out.add_json("manifest.json", &manifest)?;
        Ok(out)
    }
}

/// CSV from string rows (first row is the header).
pub(crate) fn raw_csv(rows: &[Vec<String>], provenance: &Provenance) -> Result<Vec<u8>> {
    let mut buf = crate::io::csv_bytes::<()>(&[], Some(provenance))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    buf.extend(w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?);
    Ok(buf)
}
