//! Empirical semivariograms, parametric models (Matérn, exponential,
//! spherical), least-squares fitting, and cross-validated neighborhood size.
//!
//! The Matérn model is parameterized on `t = h / range` (scale constant 1):
//! `gamma(h) = nugget + psill * (1 - 2^(1-nu) / Gamma(nu) * t^nu * K_nu(t))` for `h > 0`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bessel::bessel_k;
use crate::error::{Error, Result};
use crate::geo::{BBox, Point};
use crate::kriging;
use crate::optimize::brent_min;
use crate::rng::Stream;

/// Scale convention recorded alongside every serialized model.
pub const CONVENTION: &str = "range-over-h, c=1";

/// Smoothness values tried when a Matérn fit does not pin `nu`.
pub const NU_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.5];

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Matern,
    Exponential,
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub family: Family,
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
    /// Matérn smoothness; ignored by the other families.
    pub smoothness: f64,
}

impl VariogramModel {
    pub fn matern(nugget: f64, partial_sill: f64, range: f64, smoothness: f64) -> Self {
        Self { family: Family::Matern, nugget, partial_sill, range, smoothness }
    }

    pub fn exponential(nugget: f64, partial_sill: f64, range: f64) -> Self {
        Self { family: Family::Exponential, nugget, partial_sill, range, smoothness: 0.5 }
    }

    pub fn spherical(nugget: f64, partial_sill: f64, range: f64) -> Self {
        Self { family: Family::Spherical, nugget, partial_sill, range, smoothness: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.nugget >= 0.0
            && self.nugget.is_finite()
            && self.partial_sill >= 0.0
            && self.partial_sill.is_finite()
            && self.range > 0.0
            && self.range.is_finite()
            && (self.family != Family::Matern || (self.smoothness > 0.0 && self.smoothness.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid variogram model {self:?}")))
        }
    }

    pub fn sill(&self) -> f64 {
        self.nugget + self.partial_sill
    }

    /// Structured part `gamma(h) - nugget` for unit partial sill, in [0, 1].
    pub fn unit_structure(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        let t = h / self.range;
        match self.family {
            Family::Exponential => -(-t).exp_m1(),
            Family::Spherical => {
                if t >= 1.0 {
                    1.0
                } else {
                    1.5 * t - 0.5 * t * t * t
                }
            }
            Family::Matern => 1.0 - matern_correlation(t, self.smoothness),
        }
    }

    /// Semivariance at distance `h >= 0`.
    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        self.nugget + self.partial_sill * self.unit_structure(h)
    }

    /// Covariance `C(h) = sill - gamma(h)`, with `C(0) = sill`.
    pub fn covariance(&self, h: f64) -> f64 {
        self.sill() - self.gamma(h)
    }

    pub fn document(&self) -> VariogramDocument {
        VariogramDocument {
            family: self.family,
            nugget: self.nugget,
            partial_sill: self.partial_sill,
            range: self.range,
            smoothness: self.smoothness,
            convention: CONVENTION.to_owned(),
        }
    }
}

/// JSON form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramDocument {
    pub family: Family,
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
    pub smoothness: f64,
    pub convention: String,
}

impl VariogramDocument {
    pub fn model(&self) -> Result<VariogramModel> {
        if self.convention != CONVENTION {
            return Err(Error::InvalidInput(format!(
                "unsupported variogram convention {:?} (expected {CONVENTION:?})",
                self.convention
            )));
        }
        let m = VariogramModel {
            family: self.family,
            nugget: self.nugget,
            partial_sill: self.partial_sill,
            range: self.range,
            smoothness: self.smoothness,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Matérn correlation `2^(1-nu)/Gamma(nu) t^nu K_nu(t)`.
pub fn matern_correlation(t: f64, nu: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t > 700.0 {
        return 0.0;
    }
    let half = |v: f64| (nu - v).abs() < 1e-12;
    if half(0.5) {
        return (-t).exp();
    }
    if half(1.5) {
        return (1.0 + t) * (-t).exp();
    }
    if half(2.5) {
        return (1.0 + t + t * t / 3.0) * (-t).exp();
    }
    let k = bessel_k(nu, t);
    if !k.is_finite() {
        return 1.0;
    }
    if k == 0.0 {
        return 0.0;
    }
    let ln = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * t.ln() + k.ln();
    ln.exp().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Classical,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagBin {
    pub lag: f64,
    pub gamma: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub bins: Vec<LagBin>,
    pub kind: EstimatorKind,
    pub max_lag: f64,
    pub bin_width: f64,
}

/// One third of the bounding-box diagonal of the points.
pub fn default_max_lag(points: &[Point]) -> f64 {
    BBox::of_points(points).diagonal() / 3.0
}

/// Binned semivariance over all pairs with `0 < d <= max_lag`.
///
/// Lag centers are the mean pair distance in each bin; empty bins are dropped.
pub fn empirical_variogram(
    points: &[Point],
    values: &[f64],
    kind: EstimatorKind,
    max_lag: f64,
    n_bins: usize,
) -> Result<EmpiricalVariogram> {
    if points.len() != values.len() {
        return Err(Error::InvalidInput("points and values differ in length".into()));
    }
    if points.len() < 2 {
        return Err(Error::InvalidInput("empirical variogram needs at least 2 points".into()));
    }
    if !(max_lag > 0.0 && max_lag.is_finite()) || n_bins == 0 {
        return Err(Error::InvalidInput(format!("invalid binning: max_lag {max_lag}, bins {n_bins}")));
    }
    if points.iter().all(|p| *p == points[0]) {
        return Err(Error::InvalidInput("all points coincide".into()));
    }
    let width = max_lag / n_bins as f64;
    let n = points.len();
    // Per-row accumulation keeps the summation order fixed under parallelism.
    let rows: Vec<Vec<(f64, f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![(0.0, 0.0, 0usize); n_bins];
            for j in (i + 1)..n {
                let d = points[i].dist(&points[j]);
                if d <= 0.0 || d > max_lag {
                    continue;
                }
                let b = ((d / width) as usize).min(n_bins - 1);
                let diff = values[i] - values[j];
                let term = match kind {
                    EstimatorKind::Classical => diff * diff,
                    EstimatorKind::Robust => diff.abs().sqrt(),
                };
                acc[b].0 += d;
                acc[b].1 += term;
                acc[b].2 += 1;
            }
            acc
        })
        .collect();
    let mut total = vec![(0.0, 0.0, 0usize); n_bins];
    for row in rows {
        for (t, r) in total.iter_mut().zip(row) {
            t.0 += r.0;
            t.1 += r.1;
            t.2 += r.2;
        }
    }
    let bins = total
        .into_iter()
        .filter(|t| t.2 > 0)
        .map(|(dsum, s, c)| {
            let nc = c as f64;
            let gamma = match kind {
                EstimatorKind::Classical => s / (2.0 * nc),
                EstimatorKind::Robust => (s / nc).powi(4) / (2.0 * (0.457 + 0.494 / nc)),
            };
            LagBin { lag: dsum / nc, gamma, pairs: c }
        })
        .collect::<Vec<_>>();
    if bins.is_empty() {
        return Err(Error::InvalidInput(format!("no point pairs within max_lag {max_lag}")));
    }
    Ok(EmpiricalVariogram { bins, kind, max_lag, bin_width: width })
}

/// Least-squares fit outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub model: VariogramModel,
    /// Residual sum of squares over bins.
    pub sse: f64,
}

/// Best non-negative (nugget, psill) for fixed structure values `f`.
fn nnls_two(gamma: &[f64], f: &[f64]) -> (f64, f64, f64) {
    let sse = |n: f64, p: f64| -> f64 {
        gamma.iter().zip(f).map(|(g, fk)| (g - n - p * fk).powi(2)).sum()
    };
    let m = gamma.len() as f64;
    let sf: f64 = f.iter().sum();
    let sff: f64 = f.iter().map(|v| v * v).sum();
    let sg: f64 = gamma.iter().sum();
    let sgf: f64 = gamma.iter().zip(f).map(|(g, v)| g * v).sum();

    // Nugget-only is listed first so it wins exact ties.
    let nug = (sg / m).max(0.0);
    let mut best = (nug, 0.0, sse(nug, 0.0));
    let mut consider = |n: f64, p: f64| {
        let s = sse(n, p);
        if s < best.2 {
            best = (n, p, s);
        }
    };
    let det = m * sff - sf * sf;
    if det > 1e-10 * m * sff {
        let n = (sff * sg - sf * sgf) / det;
        let p = (m * sgf - sf * sg) / det;
        if n >= 0.0 && p >= 0.0 {
            consider(n, p);
        }
    }
    if sff > 0.0 {
        consider(0.0, (sgf / sff).max(0.0));
    }
    best
}

/// OLS fit of `family` to the bins via variable projection: nugget and
/// partial sill are solved exactly for each candidate range (and smoothness),
/// the range by a log-grid scan followed by Brent refinement.
pub fn fit_ols(emp: &EmpiricalVariogram, family: Family, fix_smoothness: Option<f64>) -> Result<OlsFit> {
    if emp.bins.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "variogram fit needs at least 4 bins, got {}",
            emp.bins.len()
        )));
    }
    let lags: Vec<f64> = emp.bins.iter().map(|b| b.lag).collect();
    let gam: Vec<f64> = emp.bins.iter().map(|b| b.gamma).collect();
    let nus: Vec<f64> = match (family, fix_smoothness) {
        (Family::Matern, Some(nu)) => {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::InvalidInput(format!("invalid smoothness {nu}")));
            }
            vec![nu]
        }
        (Family::Matern, None) => NU_GRID.to_vec(),
        _ => vec![0.5],
    };
    let h_min = lags.iter().cloned().fold(f64::INFINITY, f64::min);
    let h_max = lags.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = ((h_min / 10.0).ln(), (10.0 * h_max).ln());
    const GRID: usize = 60;

    let mut best: Option<OlsFit> = None;
    for &nu in &nus {
        let eval = |log_range: f64| -> (f64, VariogramModel) {
            let shape = VariogramModel { family, nugget: 0.0, partial_sill: 1.0, range: log_range.exp(), smoothness: nu };
            let f: Vec<f64> = lags.iter().map(|&h| shape.unit_structure(h)).collect();
            let (n, p, s) = nnls_two(&gam, &f);
            (s, VariogramModel { nugget: n, partial_sill: p, ..shape })
        };
        let grid: Vec<f64> = (0..GRID).map(|k| lo + (hi - lo) * k as f64 / (GRID - 1) as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&g| eval(g).0).collect();
        let mut minima: Vec<usize> = (0..GRID)
            .filter(|&k| {
                vals[k].is_finite()
                    && (k == 0 || vals[k] <= vals[k - 1])
                    && (k + 1 == GRID || vals[k] <= vals[k + 1])
            })
            .collect();
        minima.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        minima.truncate(3);
        for k in minima {
            let a = grid[k.saturating_sub(1)];
            let b = grid[(k + 1).min(GRID - 1)];
            let (x, _) = brent_min(|x| eval(x).0, a, b, 1e-12, 200);
            let cand = [eval(x), eval(grid[k])];
            for (s, model) in cand {
                if s.is_finite() && best.is_none_or(|b| s < b.sse) {
                    best = Some(OlsFit { model, sse: s });
                }
            }
        }
    }
    best.ok_or_else(|| Error::Optimization {
        message: "variogram least squares failed at every start".into(),
        best_objective: f64::NAN,
        gradient_norm: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub q: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub entries: Vec<CvEntry>,
    /// Candidates that could not be evaluated, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub selected: usize,
}

/// K-fold cross-validation of the local kriging neighborhood size.
pub fn cv_neighborhood(
    points: &[Point],
    values: &[f64],
    model: &VariogramModel,
    candidates: &[usize],
    folds: usize,
    stream: Stream,
) -> Result<CvCurve> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no neighborhood candidates".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidInput(format!("folds must be >= 2, got {folds}")));
    }
    let n = points.len();
    if n < folds || values.len() != n {
        return Err(Error::InvalidInput(format!("{n} points cannot be split into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    let mut fold_of = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % folds;
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == f);
            (train, test)
        })
        .collect();
    let min_train = splits.iter().map(|s| s.0.len()).min().unwrap_or(0);

    let mut qs = candidates.to_vec();
    qs.sort_unstable();
    qs.dedup();
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for q in qs {
        if q == 0 {
            skipped.push((q, "neighborhood size must be >= 1".to_owned()));
        } else if q > min_train {
            skipped.push((q, format!("exceeds smallest training fold ({min_train} points)")));
        } else if q > kriging::MAX_NEIGHBORS {
            skipped.push((q, format!("exceeds the {} neighbor limit", kriging::MAX_NEIGHBORS)));
        } else {
            usable.push(q);
        }
    }
    for (q, why) in &skipped {
        log::info!("cv: candidate q={q} skipped: {why}");
    }
    let rmses: Vec<Result<f64>> = usable
        .par_iter()
        .map(|&q| {
            let mut total = 0.0;
            for (train, test) in &splits {
                let tp: Vec<Point> = train.iter().map(|&i| points[i]).collect();
                let tv: Vec<f64> = train.iter().map(|&i| values[i]).collect();
                let mut sse = 0.0;
                for &i in test {
                    let pred = kriging::point_krige(points[i], &tp, &tv, model, q)?;
                    sse += (pred.prediction - values[i]).powi(2);
                }
                total += (sse / test.len() as f64).sqrt();
            }
            Ok(total / splits.len() as f64)
        })
        .collect();
    let mut entries = Vec::with_capacity(usable.len());
    for (q, r) in usable.into_iter().zip(rmses) {
        entries.push(CvEntry { q, rmse: r? });
    }
    let selected = select_min(&entries).ok_or_else(|| {
        Error::InvalidInput("no neighborhood candidate could be cross-validated".into())
    })?;
    Ok(CvCurve { entries, skipped, selected })
}

/// Smallest `q` whose RMSE is within 1e-12 of the minimum.
fn select_min(entries: &[CvEntry]) -> Option<usize> {
    let min = entries.iter().map(|e| e.rmse).fold(f64::INFINITY, f64::min);
    entries
        .iter()
        .filter(|e| e.rmse <= min + 1e-12)
        .map(|e| e.q)
        .min()
}
