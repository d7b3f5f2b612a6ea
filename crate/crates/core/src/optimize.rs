//! Small bounded optimizers: 1-D Brent, projected BFGS with Armijo
//! backtracking, and a clamped Nelder–Mead used as a gradient-free fallback.

/// Result of a multivariate minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    /// Norm of the projected gradient at `x` (NaN for gradient-free runs).
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative change in the objective that counts as stalled.
    pub ftol: f64,
    /// Projected-gradient norm regarded as stationary.
    pub gtol: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            ftol: 1e-8,
            gtol: 1e-6,
            max_iter: 200,
        }
    }
}

/// Box constraints; use +-inf for free coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self { lower, upper }
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| {
                if (xi <= self.lower[i] && gi > 0.0) || (xi >= self.upper[i] && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` on `[a, b]` by Brent's method. Returns `(x, f(x))`.
pub fn brent_min<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Projected quasi-Newton minimization on a box.
///
/// `fg` returns `None` when the point is inadmissible; such trial points are
/// rejected by the line search.
pub fn projected_bfgs<F>(mut fg: F, x0: &[f64], bounds: &Bounds, tol: Tolerances) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut evals = 1;
    let (mut f, mut g) = fg(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut h = identity(n);
    let mut stalled = 0;
    let mut converged = false;
    let mut iter = 0;
    while iter < tol.max_iter {
        iter += 1;
        let pg = bounds.projected_gradient(&x, &g);
        if norm(&pg) <= tol.gtol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p != 0.0 || *gi == 0.0).collect();
        let mut d = direction(&h, &g, &free);
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            d = direction(&h, &g, &free);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            bounds.project(&mut xt);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if norm(&step) == 0.0 {
                break;
            }
            evals += 1;
            if let Some((ft, gt)) = fg(&xt) {
                if ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft <= f + 1e-4 * dot(&g, &step)
                {
                    accepted = Some((xt, ft, gt, step));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn, s)) = accepted else {
            // No progress along the quasi-Newton or steepest direction.
            if is_identity(&h) {
                let pg = bounds.projected_gradient(&x, &g);
                converged = norm(&pg) <= 1e3 * tol.gtol * (1.0 + f.abs());
                break;
            }
            h = identity(n);
            continue;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if is_identity(&h) {
                let scale = sy / dot(&y, &y);
                for i in 0..n {
                    h[i][i] = scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        let df = f - fnew;
        x = xn;
        f = fnew;
        g = gn;
        if df.abs() <= tol.ftol * (1.0 + f.abs()) {
            stalled += 1;
            if stalled >= 2 {
                converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }
    let grad_norm = norm(&bounds.projected_gradient(&x, &g));
    Some(Minimum {
        x,
        f,
        grad_norm,
        iterations: iter,
        evaluations: evals,
        converged,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn is_identity(h: &[Vec<f64>]) -> bool {
    h.iter()
        .enumerate()
        .all(|(i, r)| r.iter().enumerate().all(|(j, &v)| v == if i == j { 1.0 } else { 0.0 }))
}

fn direction(h: &[Vec<f64>], g: &[f64], free: &[bool]) -> Vec<f64> {
    let n = g.len();
    (0..n)
        .map(|i| {
            if !free[i] {
                return 0.0;
            }
            -(0..n).filter(|&j| free[j]).map(|j| h[i][j] * g[j]).sum::<f64>()
        })
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// Nelder–Mead on a box (trial points are clamped). `f` returns `None` for
/// inadmissible points, treated as +inf.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: &[f64], bounds: &Bounds, tol: Tolerances) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &mut Vec<f64>, evals: &mut usize| -> f64 {
        bounds.project(x);
        *evals += 1;
        f(x).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut p0 = x0.to_vec();
    let f0 = eval(&mut p0, &mut evals);
    simplex.push((p0, f0));
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step[i];
        if p[i] > bounds.upper[i] {
            p[i] = x0[i] - step[i];
        }
        let fp = eval(&mut p, &mut evals);
        simplex.push((p, fp));
    }
    let max_iter = tol.max_iter.max(200 * n);
    let mut converged = false;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fbest, fworst) = (simplex[0].1, simplex[n].1);
        if fbest.is_finite() && (fworst - fbest).abs() <= tol.ftol * (1.0 + fbest.abs()) {
            let size = simplex[1..]
                .iter()
                .map(|(p, _)| norm(&p.iter().zip(&simplex[0].0).map(|(a, b)| a - b).collect::<Vec<_>>()))
                .fold(0.0, f64::max);
            if size <= 1e-6 * (1.0 + norm(&simplex[0].0)) {
                converged = true;
                break;
            }
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |c: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(ci, wi)| ci + c * (wi - ci))
                .collect()
        };
        let mut xr = along(-1.0);
        let fr = eval(&mut xr, &mut evals);
        if fr < simplex[0].1 {
            let mut xe = along(-2.0);
            let fe = eval(&mut xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let c = if fr < simplex[n].1 { -0.5 } else { 0.5 };
            let mut xc = along(c);
            let fc = eval(&mut xc, &mut evals);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for k in 1..=n {
                    let mut p: Vec<f64> = best
                        .iter()
                        .zip(&simplex[k].0)
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    let fp = eval(&mut p, &mut evals);
                    simplex[k] = (p, fp);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    if !fx.is_finite() {
        return None;
    }
    Some(Minimum {
        x,
        f: fx,
        grad_norm: f64::NAN,
        iterations: iter,
        evaluations: evals,
        converged,
    })
}
