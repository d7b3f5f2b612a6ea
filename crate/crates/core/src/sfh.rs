//! Area-level Fay–Herriot model on the log scale with independent or SAR
//! random effects, fitted by REML.
//!
//! With `A = I - rho W` the marginal covariance is
//! `V = sigma2 (A'A)^-1 + V_eps = A^-1 M A^-T` where `M = sigma2 I + A V_eps A'`.
//! All likelihood work happens on the transformed system `(A y, A X, M)`:
//! `log|V| = log|M| - 2 log|det A|` and `V^-1 = A' M^-1 A`.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{nelder_mead, projected_bfgs, Bounds, Minimum, Tolerances};
use crate::survey::DirectEstimate;

/// Shrinkage applied to the admissible autoregression interval.
pub const RHO_MARGIN: f64 = 1e-6;
const N_STARTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomEffect {
    Independent,
    #[default]
    Sar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub covariates: Vec<String>,
    /// Standardize covariates to mean 0, SD 1 over the modeled areas.
    pub standardize: bool,
    pub intercept: bool,
    pub random_effect: RandomEffect,
}

/// Area-level covariates keyed by region id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateTable {
    pub region_ids: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major values; NaN marks missing.
    pub values: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self { region_ids: Vec::new(), columns, values: Vec::new() }
    }

    pub fn push(&mut self, region_id: impl Into<String>, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.region_ids.push(region_id.into());
        self.values.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn row_index(&self, region_id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == region_id)
    }

    pub fn get(&self, region_id: &str, column: &str) -> Option<f64> {
        Some(self.values[self.row_index(region_id)?][self.column_index(column)?])
    }

    /// Adds or replaces a column, taking values from `(region_id, value)` pairs;
    /// regions without a value get NaN.
    pub fn set_column(&mut self, name: &str, values: &[(String, f64)]) {
        let j = match self.column_index(name) {
            Some(j) => j,
            None => {
                self.columns.push(name.to_owned());
                for row in &mut self.values {
                    row.push(f64::NAN);
                }
                self.columns.len() - 1
            }
        };
        for (id, v) in values {
            let i = match self.row_index(id) {
                Some(i) => i,
                None => {
                    self.region_ids.push(id.clone());
                    self.values.push(vec![f64::NAN; self.columns.len()]);
                    self.region_ids.len() - 1
                }
            };
            self.values[i][j] = *v;
        }
    }

    /// Reads `region_id, <numeric columns...>`; `NA` or empty cells are missing.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
        let id_col = headers
            .iter()
            .position(|h| h == "region_id")
            .ok_or_else(|| Error::parse(path, "missing `region_id` column"))?;
        let columns: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col)
            .map(|(_, h)| h.to_owned())
            .collect();
        let mut table = Self::new(columns);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let mut row = Vec::with_capacity(table.columns.len());
            for (i, cell) in rec.iter().enumerate() {
                if i == id_col {
                    continue;
                }
                let v = if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                    f64::NAN
                } else {
                    cell.parse::<f64>()
                        .map_err(|_| Error::parse(path, format!("line {line}: `{cell}` is not a number")))?
                };
                row.push(v);
            }
            let id = rec.get(id_col).unwrap_or_default().to_owned();
            if table.row_index(&id).is_some() {
                return Err(Error::parse(path, format!("line {line}: duplicate region `{id}`")));
            }
            table.push(id, row);
        }
        Ok(table)
    }
}

/// Centering/scaling applied to one design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub standardized: bool,
}

impl ColumnScaling {
    pub fn apply(&self, raw: f64) -> f64 {
        if self.standardized {
            (raw - self.mean) / self.sd
        } else {
            raw
        }
    }
}

/// Response, design and sampling variances over the modeled (usable) areas.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub region_ids: Vec<String>,
    /// Position of each modeled area in the direct-estimate list.
    pub rows: Vec<usize>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub v_eps: DVector<f64>,
    pub names: Vec<String>,
    /// One entry per covariate (the intercept has none).
    pub scalings: Vec<ColumnScaling>,
}

impl Design {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Column index of a named covariate in `x`.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Copy of `x` with one covariate replaced by new raw values, scaled with
    /// the stored mean and SD.
    pub fn with_raw_column(&self, name: &str, raw: &[f64]) -> Result<DMatrix<f64>> {
        let j = self
            .column(name)
            .ok_or_else(|| Error::InvalidInput(format!("design has no column `{name}`")))?;
        let sc = self
            .scalings
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("no scaling stored for `{name}`")))?;
        if raw.len() != self.len() {
            return Err(Error::InvalidInput("replacement column has wrong length".into()));
        }
        let mut x = self.x.clone();
        for (i, v) in raw.iter().enumerate() {
            x[(i, j)] = sc.apply(*v);
        }
        Ok(x)
    }

    /// Design restricted to a subset of columns (by name, order kept).
    pub fn select_columns(&self, keep: &[&str]) -> Result<Design> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|k| self.column(k).ok_or_else(|| Error::InvalidInput(format!("design has no column `{k}`"))))
            .collect::<Result<_>>()?;
        Ok(Design {
            x: self.x.select_columns(&idx),
            names: idx.iter().map(|&j| self.names[j].clone()).collect(),
            scalings: self.scalings.iter().filter(|s| keep.contains(&s.name.as_str())).cloned().collect(),
            ..self.clone()
        })
    }
}

pub const INTERCEPT: &str = "(intercept)";

/// Builds `(y, X, V_eps)` over usable areas in direct-estimate order.
pub fn build_design(direct: &[DirectEstimate], covariates: &CovariateTable, spec: &ModelSpec) -> Result<Design> {
    let rows: Vec<usize> = (0..direct.len()).filter(|&i| direct[i].usable).collect();
    let m = rows.len();
    let k = spec.covariates.len() + usize::from(spec.intercept);
    if k == 0 {
        return Err(Error::InvalidInput("model has no fixed effects".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("no usable areas to model".into()));
    }
    let mut x = DMatrix::<f64>::zeros(m, k);
    let mut names = Vec::with_capacity(k);
    let mut scalings = Vec::new();
    let mut col = 0;
    if spec.intercept {
        x.column_mut(0).fill(1.0);
        names.push(INTERCEPT.to_owned());
        col = 1;
    }
    for name in &spec.covariates {
        let j = covariates
            .column_index(name)
            .ok_or_else(|| Error::InvalidInput(format!("covariate `{name}` not found in covariate table")))?;
        let mut raw = Vec::with_capacity(m);
        for &r in &rows {
            let id = &direct[r].region_id;
            let i = covariates
                .row_index(id)
                .ok_or_else(|| Error::InvalidInput(format!("no covariates for region `{id}`")))?;
            let v = covariates.values[i][j];
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("covariate `{name}` missing for region `{id}`")));
            }
            raw.push(v);
        }
        let mean = raw.iter().sum::<f64>() / m as f64;
        let sd = if m > 1 {
            (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
        } else {
            0.0
        };
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ConstantCovariate(name.clone()));
        }
        let sc = ColumnScaling { name: name.clone(), mean, sd, standardized: spec.standardize };
        for (i, v) in raw.iter().enumerate() {
            x[(i, col)] = sc.apply(*v);
        }
        scalings.push(sc);
        names.push(name.clone());
        col += 1;
    }
    check_rank(&x, &names)?;
    Ok(Design {
        region_ids: rows.iter().map(|&r| direct[r].region_id.clone()).collect(),
        y: DVector::from_iterator(m, rows.iter().map(|&r| direct[r].log_mu_tilde)),
        v_eps: DVector::from_iterator(m, rows.iter().map(|&r| direct[r].var_log)),
        rows,
        x,
        names,
        scalings,
    })
}

/// Full column rank check via column-pivoted QR; names the dependent columns.
pub fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let (m, k) = x.shape();
    if m < k {
        return Err(Error::Collinear(format!("{k} columns but only {m} rows")));
    }
    // Scale columns so the rank decision is unit-free.
    let mut xs = x.clone();
    for mut c in xs.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let qr = xs.col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let tol = 1e-10 * diag.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let rank = diag.iter().take_while(|d| **d > tol).count();
    if rank == k {
        return Ok(());
    }
    let mut perm = nalgebra::DVector::from_iterator(k, (0..k).map(|i| i as f64));
    qr.p().permute_rows(&mut perm);
    let bad: Vec<String> = (rank..k)
        .map(|i| {
            let j = perm[i] as usize;
            names.get(j).cloned().unwrap_or_else(|| format!("column {j}"))
        })
        .collect();
    Err(Error::Collinear(format!("design is rank deficient; dependent column(s): {}", bad.join(", "))))
}

/// GLS coefficients `(X'V^-1X)^-1 X'V^-1 y`.
pub fn gls_beta(y: &DVector<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    let names: Vec<String> = (0..x.ncols()).map(|j| format!("column {j}")).collect();
    check_rank(x, &names)?;
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance matrix".into()))?;
    let vx = chol.solve(x);
    let h = x.transpose() * &vx;
    let rhs = vx.transpose() * y;
    h.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Collinear("X'V^-1X is singular".into()))
}

#[derive(Debug, Clone)]
enum Spectrum {
    /// `W = U diag(lambda) U^-1` with real eigenvalues.
    Real { lambda: Vec<f64>, u: DMatrix<f64>, u_inv: DMatrix<f64> },
    /// Fallback: LU per evaluation; eigenvalues only used for bounds.
    General { real_eigs: Vec<f64> },
}

/// Spatial weights with precomputed quantities.
#[derive(Debug, Clone)]
struct SarParts {
    w: DMatrix<f64>,
    /// `W V_eps + V_eps W'`
    s: DMatrix<f64>,
    /// `W V_eps W'`
    p: DMatrix<f64>,
    spectrum: Spectrum,
    bounds: (f64, f64),
}

/// Try to write `W = G^-1 S G` with `S` symmetric and `G` diagonal (true for
/// row-standardized symmetric contiguity). Returns `(S, g)`.
fn symmetrize(w: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let m = w.nrows();
    let scale = w.amax().max(f64::MIN_POSITIVE);
    let mut s = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        s[(i, i)] = w[(i, i)];
        for j in (i + 1)..m {
            let (a, b) = (w[(i, j)], w[(j, i)]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            if a * b <= 0.0 {
                return None;
            }
            let v = (a * b).sqrt().copysign(a);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let mut g = vec![f64::NAN; m];
    for root in 0..m {
        if !g[root].is_nan() {
            continue;
        }
        g[root] = 1.0;
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for j in 0..m {
                if j != i && w[(i, j)] != 0.0 && g[j].is_nan() {
                    g[j] = g[i] * w[(i, j)] / s[(i, j)];
                    queue.push_back(j);
                }
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if (g[i] * w[(i, j)] / g[j] - s[(i, j)]).abs() > 1e-12 * scale {
                return None;
            }
        }
    }
    Some((s, g))
}

fn rho_interval(real_eigs: &[f64]) -> (f64, f64) {
    let lmin = real_eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = real_eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = if lmin < -1e-12 { 1.0 / lmin + RHO_MARGIN } else { -1.0 + RHO_MARGIN };
    let hi = if lmax > 1e-12 { 1.0 / lmax - RHO_MARGIN } else { 1.0 - RHO_MARGIN };
    (lo, hi)
}

impl SarParts {
    fn new(w: &DMatrix<f64>, v_eps: &DVector<f64>) -> Result<Self> {
        let m = w.nrows();
        if w.ncols() != m || v_eps.len() != m {
            return Err(Error::InvalidInput(format!(
                "spatial weights are {}x{} but there are {} areas",
                w.nrows(),
                w.ncols(),
                v_eps.len()
            )));
        }
        let wv = DMatrix::from_fn(m, m, |i, j| w[(i, j)] * v_eps[j]);
        let s = &wv + wv.transpose();
        let p = &wv * w.transpose();
        let spectrum = match symmetrize(w) {
            Some((sym, g)) => {
                let eig = SymmetricEigen::new(sym);
                let e = eig.eigenvectors;
                let u = DMatrix::from_fn(m, m, |i, k| e[(i, k)] / g[i]);
                let u_inv = DMatrix::from_fn(m, m, |k, j| e[(j, k)] * g[j]);
                Spectrum::Real { lambda: eig.eigenvalues.iter().cloned().collect(), u, u_inv }
            }
            None => {
                let eigs = w.clone().complex_eigenvalues();
                let real_eigs = eigs.iter().filter(|c| c.im.abs() < 1e-9).map(|c| c.re).collect();
                Spectrum::General { real_eigs }
            }
        };
        let bounds = match &spectrum {
            Spectrum::Real { lambda, .. } => rho_interval(lambda),
            Spectrum::General { real_eigs } => rho_interval(real_eigs),
        };
        Ok(Self { w: w.clone(), s, p, spectrum, bounds })
    }

    /// `(A^-1, log|det A|)`, or None when A is singular.
    fn a_inverse(&self, rho: f64) -> Option<(DMatrix<f64>, f64)> {
        match &self.spectrum {
            Spectrum::Real { lambda, u, u_inv } => {
                let mut ud = u.clone();
                let mut logdet = 0.0;
                for (k, l) in lambda.iter().enumerate() {
                    let f = 1.0 - rho * l;
                    if f.abs() < 1e-300 {
                        return None;
                    }
                    logdet += f.abs().ln();
                    ud.column_mut(k).scale_mut(1.0 / f);
                }
                Some((ud * u_inv, logdet))
            }
            Spectrum::General { .. } => {
                let m = self.w.nrows();
                let a = DMatrix::<f64>::identity(m, m) - &self.w * rho;
                let lu = a.lu();
                let det = lu.determinant();
                if det == 0.0 || !det.is_finite() {
                    // Fall back on summing log pivots when the product under/overflows.
                    let u = lu.u();
                    let ld: f64 = (0..m).map(|i| u[(i, i)].abs().ln()).sum();
                    if !ld.is_finite() {
                        return None;
                    }
                    return lu.try_inverse().map(|inv| (inv, ld));
                }
                let inv = lu.try_inverse()?;
                Some((inv, det.abs().ln()))
            }
        }
    }

    fn log_det_a(&self, rho: f64) -> Option<f64> {
        match &self.spectrum {
            Spectrum::Real { lambda, .. } => {
                let mut ld = 0.0;
                for l in lambda {
                    let f = (1.0 - rho * l).abs();
                    if f < 1e-300 {
                        return None;
                    }
                    ld += f.ln();
                }
                Some(ld)
            }
            Spectrum::General { .. } => self.a_inverse(rho).map(|(_, ld)| ld),
        }
    }
}

/// Likelihood maximized by [`Structure::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// REML: beta profiled out of the residual-contrast likelihood.
    #[default]
    Restricted,
    /// Profile likelihood with beta at its GLS value. Comparable across
    /// different fixed-effect designs.
    Full,
}

/// Variance structure shared by every fit on the same areas: sampling
/// variances and (optionally) the spatial weights.
#[derive(Debug, Clone)]
pub struct Structure {
    v_eps: DVector<f64>,
    sar: Option<Arc<SarParts>>,
    likelihood: Likelihood,
}

/// Quantities at one parameter value.
struct Evaluation {
    loglik: f64,
    /// d loglik / d(sigma2, rho)
    grad: Option<[f64; 2]>,
    beta: DVector<f64>,
    /// `M^-1 (A y - A X beta)`
    s: DVector<f64>,
    h_inv: DMatrix<f64>,
}

impl Structure {
    pub fn new(v_eps: DVector<f64>, w: Option<&DMatrix<f64>>) -> Result<Self> {
        if v_eps.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("sampling variances must be finite and >= 0".into()));
        }
        let sar = w.map(|w| SarParts::new(w, &v_eps).map(Arc::new)).transpose()?;
        Ok(Self { v_eps, sar, likelihood: Likelihood::Restricted })
    }

    pub fn with_likelihood(mut self, likelihood: Likelihood) -> Self {
        self.likelihood = likelihood;
        self
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn len(&self) -> usize {
        self.v_eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_eps.is_empty()
    }

    pub fn v_eps(&self) -> &DVector<f64> {
        &self.v_eps
    }

    pub fn weights(&self) -> Option<&DMatrix<f64>> {
        self.sar.as_ref().map(|s| &s.w)
    }

    /// Admissible autoregression interval (None without spatial weights).
    pub fn rho_bounds(&self) -> Option<(f64, f64)> {
        self.sar.as_ref().map(|s| s.bounds)
    }

    fn check_theta(&self, sigma2: f64, rho: f64) -> Result<()> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma2_v must be >= 0, got {sigma2}")));
        }
        match &self.sar {
            None if rho != 0.0 => Err(Error::InvalidInput("rho must be 0 without spatial weights".into())),
            Some(s) if !(rho >= s.bounds.0 && rho <= s.bounds.1) => Err(Error::InvalidInput(format!(
                "rho {rho} outside admissible interval ({}, {})",
                s.bounds.0, s.bounds.1
            ))),
            _ => Ok(()),
        }
    }

    fn evaluate(
        &self,
        sigma2: f64,
        rho: f64,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        want_grad: bool,
        lik: Likelihood,
    ) -> Option<Evaluation> {
        match &self.sar {
            Some(sar) if rho != 0.0 || want_grad => self.evaluate_sar(sar, sigma2, rho, y, x, want_grad, lik),
            _ => self.evaluate_diag(sigma2, y, x, want_grad, lik),
        }
    }

    fn evaluate_diag(
        &self,
        sigma2: f64,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        want_grad: bool,
        lik: Likelihood,
    ) -> Option<Evaluation> {
        let restricted = lik == Likelihood::Restricted;
        let m = y.len();
        let d: Vec<f64> = self.v_eps.iter().map(|v| sigma2 + v).collect();
        if d.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let mx = DMatrix::from_fn(m, x.ncols(), |i, j| x[(i, j)] / d[i]);
        let h = x.transpose() * &mx;
        let hc = h.cholesky()?;
        let beta = hc.solve(&(mx.transpose() * y));
        let r = y - x * &beta;
        let s = DVector::from_fn(m, |i, _| r[i] / d[i]);
        let logdet_m: f64 = d.iter().map(|v| v.ln()).sum();
        let logdet_h = if restricted { chol_logdet(&hc) } else { 0.0 };
        let loglik = -0.5 * (logdet_m + logdet_h + r.dot(&s));
        let h_inv = hc.inverse();
        let grad = want_grad.then(|| {
            // tr(Q) with Q = M^-1 - M^-1 X H^-1 X' M^-1 (REML) or M^-1 (full), M diagonal.
            let mut tr_q = 0.0;
            for i in 0..m {
                tr_q += 1.0 / d[i];
                if restricted {
                    let row = mx.row(i);
                    tr_q -= (row * &h_inv * row.transpose())[(0, 0)];
                }
            }
            [-0.5 * tr_q + 0.5 * s.dot(&s), 0.0]
        });
        Some(Evaluation { loglik, grad, beta, s, h_inv })
    }

    fn evaluate_sar(
        &self,
        sar: &SarParts,
        sigma2: f64,
        rho: f64,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        want_grad: bool,
        lik: Likelihood,
    ) -> Option<Evaluation> {
        let restricted = lik == Likelihood::Restricted;
        let m = y.len();
        let mut mm = &sar.p * (rho * rho) - &sar.s * rho;
        for i in 0..m {
            mm[(i, i)] += sigma2 + self.v_eps[i];
        }
        let chol = mm.cholesky()?;
        let yt = y - (&sar.w * y) * rho;
        let xt = x - (&sar.w * x) * rho;
        let mx = chol.solve(&xt);
        let h = xt.transpose() * &mx;
        let hc = h.cholesky()?;
        let my = chol.solve(&yt);
        let beta = hc.solve(&(xt.transpose() * &my));
        let r = &yt - &xt * &beta;
        let s = &my - &mx * &beta;
        let (a_inv, logdet_a) = if want_grad {
            let (inv, ld) = sar.a_inverse(rho)?;
            (Some(inv), ld)
        } else {
            (None, sar.log_det_a(rho)?)
        };
        let logdet_h = if restricted { chol_logdet(&hc) } else { 0.0 };
        let loglik = -0.5 * (chol_logdet(&chol) - 2.0 * logdet_a + logdet_h + r.dot(&s));
        if !loglik.is_finite() {
            return None;
        }
        let h_inv = hc.inverse();
        let grad = match a_inv {
            Some(a_inv) => {
                let mut q = chol.inverse();
                if restricted {
                    q -= &mx * &h_inv * mx.transpose();
                }
                let z = a_inv * &sar.w;
                let tr_q = q.trace();
                let tr_qz = q.component_mul(&z.transpose()).sum();
                let szs = s.dot(&(&z * &s));
                Some([-0.5 * tr_q + 0.5 * s.dot(&s), sigma2 * (szs - tr_qz)])
            }
            None => None,
        };
        Some(Evaluation { loglik, grad, beta, s, h_inv })
    }

    /// Restricted log-likelihood (without the constant) with beta profiled out.
    pub fn restricted_loglik(&self, sigma2: f64, rho: f64, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<f64> {
        self.check_dims(y, x)?;
        self.check_theta(sigma2, rho)?;
        self.evaluate(sigma2, rho, y, x, false, Likelihood::Restricted)
            .map(|e| e.loglik)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("V(theta) at sigma2_v={sigma2}, rho={rho}")))
    }

    /// Gradient of the restricted log-likelihood in `(sigma2_v, rho)`.
    pub fn restricted_loglik_gradient(&self, sigma2: f64, rho: f64, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<[f64; 2]> {
        self.check_dims(y, x)?;
        self.check_theta(sigma2, rho)?;
        self.evaluate(sigma2, rho, y, x, true, Likelihood::Restricted)
            .and_then(|e| e.grad)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("V(theta) at sigma2_v={sigma2}, rho={rho}")))
    }

    fn check_dims(&self, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<()> {
        if y.len() != self.len() || x.nrows() != self.len() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {} areas, y has {}, X has {} rows",
                self.len(),
                y.len(),
                x.nrows()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite values in y or X".into()));
        }
        Ok(())
    }

    /// Maximum-likelihood fit of the configured [`Likelihood`]. `names` labels the columns of `x`.
    pub fn fit(&self, y: &DVector<f64>, x: &DMatrix<f64>, names: &[String], effect: RandomEffect) -> Result<SfhFit> {
        self.check_dims(y, x)?;
        check_rank(x, names)?;
        let (m, k) = x.shape();
        if m < k + 2 {
            return Err(Error::InvalidInput(format!("REML needs at least {} usable areas, got {m}", k + 2)));
        }
        let sar = match effect {
            RandomEffect::Sar => Some(self.sar.as_ref().ok_or_else(|| {
                Error::InvalidInput("SAR random effects need spatial weights".into())
            })?),
            RandomEffect::Independent => None,
        };
        let starts = self.starting_points(y, x, sar.map(|s| s.bounds));
        let dim = if sar.is_some() { 2 } else { 1 };
        let bounds = match sar {
            Some(s) => Bounds::new(vec![0.0, s.bounds.0], vec![f64::INFINITY, s.bounds.1]),
            None => Bounds::new(vec![0.0], vec![f64::INFINITY]),
        };
        let theta_of = |t: &[f64]| (t[0], if dim == 2 { t[1] } else { 0.0 });
        let objective = |t: &[f64]| -> Option<(f64, Vec<f64>)> {
            let (s2, rho) = theta_of(t);
            let e = self.evaluate(s2, rho, y, x, true, self.likelihood)?;
            let g = e.grad?;
            Some((-e.loglik, g[..dim].iter().map(|v| -v).collect()))
        };
        let tol = Tolerances::default();
        let mut runs: Vec<Minimum> = Vec::new();
        let mut evaluations = 0;
        for st in &starts {
            if let Some(r) = projected_bfgs(objective, &st[..dim], &bounds, tol) {
                evaluations += r.evaluations;
                runs.push(r);
            }
        }
        let best_any = runs.iter().min_by(|a, b| a.f.total_cmp(&b.f)).cloned();
        let best_conv = runs.iter().filter(|r| r.converged).min_by(|a, b| a.f.total_cmp(&b.f)).cloned();
        let (best, method) = match best_conv {
            Some(b) => (b, "projected-bfgs"),
            None => {
                let x0 = best_any.as_ref().map(|b| b.x.clone()).unwrap_or_else(|| starts[0][..dim].to_vec());
                let step: Vec<f64> = x0.iter().enumerate().map(|(i, v)| if i == 0 { 0.2 * v.abs().max(1e-3) } else { 0.1 }).collect();
                let nm = nelder_mead(|t| objective(t).map(|v| v.0), &x0, &step, &bounds, Tolerances { max_iter: 2000, ..tol });
                match nm {
                    Some(r) if r.converged => {
                        evaluations += r.evaluations;
                        (r, "nelder-mead")
                    }
                    other => {
                        let (bo, gn) = best_any
                            .map(|b| (b.f, b.grad_norm))
                            .or(other.map(|o| (o.f, f64::NAN)))
                            .unwrap_or((f64::NAN, f64::NAN));
                        return Err(Error::Optimization {
                            message: format!("REML did not converge from any of {} starts", starts.len()),
                            best_objective: -bo,
                            gradient_norm: gn,
                        });
                    }
                }
            }
        };
        let (sigma2_v, rho) = theta_of(&best.x);
        let eval = self
            .evaluate(sigma2_v, rho, y, x, false, self.likelihood)
            .ok_or_else(|| Error::NotPositiveDefinite("V(theta) at the optimum".into()))?;
        let scale = self.v_eps.mean().max(y.variance()).max(f64::MIN_POSITIVE);
        let boundary = sigma2_v <= 1e-8 * scale;
        let rho_at_bound = sar.is_some_and(|s| rho <= s.bounds.0 + 1e-9 || rho >= s.bounds.1 - 1e-9);
        let state = FitState::new(self, sigma2_v, rho, y, x, &eval)?;
        Ok(SfhFit {
            names: names.to_vec(),
            beta: eval.beta.iter().cloned().collect(),
            beta_se: eval.h_inv.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
            sigma2_v,
            rho,
            loglik: eval.loglik,
            likelihood: self.likelihood,
            random_effect: effect,
            boundary,
            convergence: Convergence {
                converged: true,
                method: method.to_owned(),
                starts: starts.len(),
                evaluations,
                iterations: best.iterations,
                gradient_norm: best.grad_norm,
                rho_at_bound,
            },
            rho_bounds: sar.map(|s| s.bounds),
            state,
        })
    }

    fn starting_points(&self, y: &DVector<f64>, x: &DMatrix<f64>, rho_bounds: Option<(f64, f64)>) -> Vec<[f64; 2]> {
        let m = y.len();
        let k = x.ncols();
        // Moment guess from OLS residuals.
        let xtx = x.transpose() * x;
        let b = xtx
            .cholesky()
            .map(|c| c.solve(&(x.transpose() * y)))
            .unwrap_or_else(|| DVector::zeros(k));
        let r = y - x * b;
        let rv = r.norm_squared() / (m - k).max(1) as f64;
        let s0 = (rv - self.v_eps.mean()).max(0.05 * rv).max(1e-6);
        let sig_grid = [0.1, 0.3, 1.0, 3.0, 10.0];
        match rho_bounds {
            None => sig_grid.iter().map(|f| [f * s0, 0.0]).collect(),
            Some((lo, hi)) => {
                let rho_grid = [0.8 * lo, 0.4 * lo, 0.0, 0.4 * hi, 0.8 * hi];
                let mut cands: Vec<(f64, [f64; 2])> = Vec::new();
                for f in sig_grid {
                    for rho in rho_grid {
                        let t = [f * s0, rho];
                        if let Some(e) = self.evaluate(t[0], t[1], y, x, false, self.likelihood) {
                            cands.push((-e.loglik, t));
                        }
                    }
                }
                cands.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut out: Vec<[f64; 2]> = cands.into_iter().take(N_STARTS).map(|c| c.1).collect();
                if out.is_empty() {
                    out.push([s0, 0.0]);
                }
                out
            }
        }
    }
}

fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub method: String,
    pub starts: usize,
    pub evaluations: usize,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub rho_at_bound: bool,
}

/// Derived quantities kept with a fit.
#[derive(Debug, Clone, PartialEq)]
struct FitState {
    synthetic: DVector<f64>,
    random_effects: DVector<f64>,
    g1: DVector<f64>,
    /// `(I - rho W)^-1`, identity for independent effects.
    a_inv: Option<DMatrix<f64>>,
}

impl FitState {
    fn new(st: &Structure, sigma2: f64, rho: f64, y: &DVector<f64>, x: &DMatrix<f64>, e: &Evaluation) -> Result<Self> {
        let m = y.len();
        let synthetic = x * &e.beta;
        if rho == 0.0 {
            // u = sigma2 M^-1 r, g1 = sigma2 v / (sigma2 + v).
            let u = &e.s * sigma2;
            let g1 = DVector::from_fn(m, |i, _| {
                let d = sigma2 + st.v_eps[i];
                if d > 0.0 {
                    sigma2 * st.v_eps[i] / d
                } else {
                    0.0
                }
            });
            return Ok(Self { synthetic, random_effects: u, g1, a_inv: None });
        }
        let sar = st.sar.as_ref().expect("rho != 0 implies spatial weights");
        let (a_inv, _) = sar
            .a_inverse(rho)
            .ok_or_else(|| Error::Singular("I - rho W is singular".into()))?;
        let u = &a_inv * &e.s * sigma2;
        let mut mm = &sar.p * (rho * rho) - &sar.s * rho;
        for i in 0..m {
            mm[(i, i)] += sigma2 + st.v_eps[i];
        }
        let minv = mm
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("M(theta)".into()))?
            .inverse();
        let inner = DMatrix::<f64>::identity(m, m) - minv * sigma2;
        let g = &a_inv * inner * a_inv.transpose();
        let g1 = DVector::from_fn(m, |i, _| (sigma2 * g[(i, i)]).max(0.0));
        Ok(Self { synthetic, random_effects: u, g1, a_inv: Some(a_inv) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfhFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Plug-in GLS standard errors `sqrt(diag (X'V^-1X)^-1)`.
    pub beta_se: Vec<f64>,
    pub sigma2_v: f64,
    pub rho: f64,
    /// Log-likelihood at the optimum, of kind `likelihood`.
    pub loglik: f64,
    pub likelihood: Likelihood,
    pub random_effect: RandomEffect,
    /// Variance component estimated at its lower bound 0.
    pub boundary: bool,
    pub convergence: Convergence,
    pub rho_bounds: Option<(f64, f64)>,
    state: FitState,
}

impl SfhFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.beta[j])
    }

    /// Spatial EBLUP of area `i` on the log scale.
    pub fn eblup(&self, i: usize) -> f64 {
        self.state.synthetic[i] + self.state.random_effects[i]
    }

    pub fn eblups(&self) -> Vec<f64> {
        (0..self.state.synthetic.len()).map(|i| self.eblup(i)).collect()
    }

    /// Synthetic part `x_i' beta`.
    pub fn synthetic(&self) -> &DVector<f64> {
        &self.state.synthetic
    }

    pub fn random_effects(&self) -> &DVector<f64> {
        &self.state.random_effects
    }

    /// Innovations `v = (I - rho W) u`.
    pub fn innovations(&self, w: Option<&DMatrix<f64>>) -> DVector<f64> {
        let u = &self.state.random_effects;
        match w {
            Some(w) if self.rho != 0.0 => u - (w * u) * self.rho,
            _ => u.clone(),
        }
    }

    /// Plug-in leading MSE term `diag(G - G V^-1 G)` (ignores estimation of
    /// beta and theta; diagnostics only).
    pub fn naive_mse(&self) -> &DVector<f64> {
        &self.state.g1
    }

    /// `(I - rho W)^-1` when rho is nonzero.
    pub fn a_inverse(&self) -> Option<&DMatrix<f64>> {
        self.state.a_inv.as_ref()
    }
}

/// Convenience wrapper building the structure for one fit.
pub fn reml_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    v_eps: &DVector<f64>,
    w: Option<&DMatrix<f64>>,
    names: &[String],
    effect: RandomEffect,
) -> Result<SfhFit> {
    let w = if effect == RandomEffect::Sar { w } else { None };
    Structure::new(v_eps.clone(), w)?.fit(y, x, names, effect)
}

/// Restricted log-likelihood for one parameter value.
pub fn restricted_loglik(
    sigma2: f64,
    rho: f64,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    v_eps: &DVector<f64>,
    w: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let w = if rho != 0.0 { w } else { None };
    Structure::new(v_eps.clone(), w)?.restricted_loglik(sigma2, rho, y, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MseSource {
    None,
    AnalyticalNaive,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaPrediction {
    pub region_id: String,
    pub eblup_log: f64,
    #[serde(with = "crate::io::na_float")]
    pub mse_log: f64,
    pub mse_source: MseSource,
    pub mu_hat: f64,
    pub tau_hat: f64,
    #[serde(with = "crate::io::na_float")]
    pub rmse_total: f64,
}

/// Back-transformation `mu = exp(eta + mse/2)`, `tau = N mu`.
///
/// `rmse_total` is the lognormal RMSE of the total, `tau sqrt(exp(mse) - 1)`,
/// NaN when no MSE is available.
pub fn back_transform(
    region_id: impl Into<String>,
    eblup_log: f64,
    mse_log: Option<f64>,
    source: MseSource,
    population: u64,
) -> Result<AreaPrediction> {
    let mse = mse_log.unwrap_or(0.0);
    if !(mse >= 0.0) {
        return Err(Error::InvalidInput(format!("mse_log must be >= 0, got {mse}")));
    }
    let mu_hat = (eblup_log + mse / 2.0).exp();
    let tau_hat = population as f64 * mu_hat;
    Ok(AreaPrediction {
        region_id: region_id.into(),
        eblup_log,
        mse_log: mse_log.unwrap_or(f64::NAN),
        mse_source: if mse_log.is_some() { source } else { MseSource::None },
        mu_hat,
        tau_hat,
        rmse_total: mse_log.map(|v| tau_hat * v.exp_m1().sqrt()).unwrap_or(f64::NAN),
    })
}
