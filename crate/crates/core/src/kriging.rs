//! Local ordinary point and block kriging.
//!
//! Systems are written in semivariance form,
//! `[Gamma 1; 1' 0] [alpha; mu] = [gamma_0; 1]`, and solved by dense LU.
//! Co-located data are merged into one equation whose weight is shared
//! equally, which is the same as kriging with their mean value.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{discretize_block, BlockQuadrature, Point, Region, RegionSet};
use crate::rng::{hash_str, Lane, Stream};
use crate::variogram::VariogramModel;

/// Upper bound on the size of any local system.
pub const MAX_NEIGHBORS: usize = 64;
/// Blocks with more nodes use a sampled within-block average.
pub const EXACT_PAIR_NODES: usize = 128;
const SAMPLED_PAIRS: usize = EXACT_PAIR_NODES * EXACT_PAIR_NODES;

/// Solved local system: per-datum weights (co-located data share a weight).
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingWeights {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub lagrange: f64,
    /// `alpha' gamma_0` over the distinct neighbor locations.
    pub rhs_dot: f64,
    /// Number of distinct locations in the system.
    pub size: usize,
}

impl KrigingWeights {
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.neighbors
            .iter()
            .zip(&self.weights)
            .map(|(&i, w)| w * values[i])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub prediction: f64,
    pub variance: f64,
    pub weights: KrigingWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    /// q data nearest the polygon centroid.
    #[default]
    Centroid,
    /// Union of the q nearest data of every quadrature node.
    Nodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPrediction {
    pub region_id: String,
    pub block_mean: f64,
    pub kriging_variance: f64,
    pub neighborhood: usize,
    pub neighbor_ids: Vec<usize>,
    pub n_nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Groups of co-located data (indices), nearest first, ties by smaller index.
fn nearest_groups(anchor: Point, points: &[Point], q: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.dist2(&anchor), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    // A partial selection is enough unless duplicates shrink the distinct set.
    let mut take = (2 * q + 8).min(order.len());
    loop {
        if take < order.len() {
            order.select_nth_unstable_by(take, by_key);
        }
        let mut head: Vec<(f64, usize)> = order[..take].to_vec();
        head.sort_unstable_by(by_key);
        let mut groups: Vec<Vec<usize>> = Vec::with_capacity(q);
        for &(_, i) in &head {
            if let Some(g) = groups.iter_mut().find(|g| points[g[0]] == points[i]) {
                g.push(i);
            } else if groups.len() < q {
                groups.push(vec![i]);
            } else {
                break;
            }
        }
        // Duplicates of the last group may lie beyond `take`; keep looking
        // until the boundary distance is passed.
        let boundary_open = take < order.len()
            && groups.len() == q
            && head.last().is_some_and(|l| l.0 <= points[groups[q - 1][0]].dist2(&anchor));
        if (groups.len() == q && !boundary_open) || take == order.len() {
            return groups;
        }
        take = (take * 2).min(order.len());
    }
}

fn solve_groups(
    groups: &[Vec<usize>],
    points: &[Point],
    model: &VariogramModel,
    rhs: &[f64],
) -> Result<KrigingWeights> {
    let k = groups.len();
    let mut a = DMatrix::<f64>::zeros(k + 1, k + 1);
    for i in 0..k {
        let pi = points[groups[i][0]];
        for j in (i + 1)..k {
            let g = model.gamma(pi.dist(&points[groups[j][0]]));
            a[(i, j)] = g;
            a[(j, i)] = g;
        }
        a[(i, k)] = 1.0;
        a[(k, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(k + 1);
    for i in 0..k {
        b[i] = rhs[i];
    }
    b[k] = 1.0;
    let lu = a.clone().lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..=k).map(|i| u[(i, i)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(dmin > 1e-13 * dmax) {
        return Err(Error::Singular(format!("kriging system of size {k} is singular")));
    }
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::Singular(format!("kriging system of size {k} is singular")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("kriging solution is not finite".into()));
    }
    let mut neighbors = Vec::new();
    let mut weights = Vec::new();
    let mut rhs_dot = 0.0;
    for (g, grp) in groups.iter().enumerate() {
        rhs_dot += x[g] * rhs[g];
        let share = x[g] / grp.len() as f64;
        for &i in grp {
            neighbors.push(i);
            weights.push(share);
        }
    }
    Ok(KrigingWeights { neighbors, weights, lagrange: x[k], rhs_dot, size: k })
}

fn check_inputs(points: &[Point], values: Option<&[f64]>, model: &VariogramModel, q: usize) -> Result<()> {
    model.validate()?;
    if q == 0 || q > MAX_NEIGHBORS {
        return Err(Error::InvalidInput(format!(
            "neighborhood size must be in 1..={MAX_NEIGHBORS}, got {q}"
        )));
    }
    if points.len() < q {
        return Err(Error::InvalidInput(format!(
            "neighborhood size {q} exceeds the {} available points",
            points.len()
        )));
    }
    if let Some(v) = values {
        if v.len() != points.len() {
            return Err(Error::InvalidInput("points and values differ in length".into()));
        }
    }
    Ok(())
}

/// Point kriging weights for `target` from the q nearest distinct locations.
pub fn point_weights(target: Point, points: &[Point], model: &VariogramModel, q: usize) -> Result<KrigingWeights> {
    check_inputs(points, None, model, q)?;
    let groups = nearest_groups(target, points, q);
    let rhs: Vec<f64> = groups.iter().map(|g| model.gamma(points[g[0]].dist(&target))).collect();
    solve_groups(&groups, points, model, &rhs)
}

/// Ordinary point kriging with the q nearest data.
pub fn point_krige(
    target: Point,
    points: &[Point],
    values: &[f64],
    model: &VariogramModel,
    q: usize,
) -> Result<PointPrediction> {
    check_inputs(points, Some(values), model, q)?;
    let w = point_weights(target, points, model, q)?;
    Ok(PointPrediction {
        prediction: w.apply(values),
        variance: (w.rhs_dot + w.lagrange).max(0.0),
        weights: w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub anchor: Anchor,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self { anchor: Anchor::Centroid }
    }
}

/// Average of gamma over node pairs, exact for small blocks and sampled
/// (seeded by the region id) otherwise.
pub fn within_block_gamma(quad: &BlockQuadrature, model: &VariogramModel) -> f64 {
    let n = quad.nodes.len();
    if n <= EXACT_PAIR_NODES {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += 2.0 * quad.weights[i] * quad.weights[j] * model.gamma(quad.nodes[i].dist(&quad.nodes[j]));
            }
        }
        return total;
    }
    let wsum: f64 = quad.weights.iter().sum();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &quad.weights {
        acc += w / wsum;
        cum.push(acc);
    }
    let pick = |u: f64| cum.partition_point(|&c| c < u).min(n - 1);
    let mut rng = Stream::new(hash_str(&quad.region_id), 0, Lane::Pairs).rng();
    let mut total = 0.0;
    for _ in 0..SAMPLED_PAIRS {
        let i = pick(rng.random::<f64>());
        let j = pick(rng.random::<f64>());
        total += model.gamma(quad.nodes[i].dist(&quad.nodes[j]));
    }
    total / SAMPLED_PAIRS as f64
}

/// Block kriging of the mean over `quad` (the discretized `region`).
pub fn block_krige(
    region: &Region,
    quad: &BlockQuadrature,
    points: &[Point],
    values: &[f64],
    model: &VariogramModel,
    q: usize,
    opts: BlockOptions,
) -> Result<BlockPrediction> {
    check_inputs(points, Some(values), model, q)?;
    if quad.nodes.is_empty() || quad.nodes.len() != quad.weights.len() {
        return Err(Error::InvalidInput(format!("invalid quadrature for region `{}`", region.id)));
    }
    let wsum: f64 = quad.weights.iter().sum();
    if !((wsum - 1.0).abs() < 1e-9) {
        return Err(Error::InvalidInput(format!(
            "quadrature weights for region `{}` sum to {wsum}",
            region.id
        )));
    }
    let groups = match opts.anchor {
        Anchor::Centroid => nearest_groups(region.centroid(), points, q),
        Anchor::Nodes => node_union_groups(quad, points, q),
    };
    let rhs: Vec<f64> = groups
        .iter()
        .map(|g| point_block_gamma(points[g[0]], quad, model))
        .collect();
    let w = solve_groups(&groups, points, model, &rhs)?;
    let raw_var = w.rhs_dot + w.lagrange - within_block_gamma(quad, model);
    let scale = model.sill().max(f64::MIN_POSITIVE);
    let note = (raw_var < 0.0 && raw_var > -1e-8 * scale)
        .then(|| format!("kriging variance {raw_var:e} clamped to 0"));
    if raw_var < -1e-8 * scale {
        log::warn!("region `{}`: negative block kriging variance {raw_var:e}", region.id);
    }
    Ok(BlockPrediction {
        region_id: region.id.clone(),
        block_mean: w.apply(values),
        kriging_variance: raw_var.max(0.0),
        neighborhood: w.size,
        neighbor_ids: w.neighbors.clone(),
        n_nodes: quad.nodes.len(),
        note,
    })
}

fn point_block_gamma(p: Point, quad: &BlockQuadrature, model: &VariogramModel) -> f64 {
    quad.nodes
        .iter()
        .zip(&quad.weights)
        .map(|(n, w)| w * model.gamma(p.dist(n)))
        .sum()
}

fn node_union_groups(quad: &BlockQuadrature, points: &[Point], q: usize) -> Vec<Vec<usize>> {
    let mut union: Vec<Vec<usize>> = Vec::new();
    for node in &quad.nodes {
        for g in nearest_groups(*node, points, q) {
            if !union.iter().any(|u| u[0] == g[0]) {
                union.push(g);
            }
        }
    }
    if union.len() > MAX_NEIGHBORS {
        let mean_dist = |g: &Vec<usize>| -> f64 {
            quad.nodes.iter().map(|n| n.dist(&points[g[0]])).sum::<f64>() / quad.nodes.len() as f64
        };
        let mut keyed: Vec<(f64, Vec<usize>)> = union.into_iter().map(|g| (mean_dist(&g), g)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1[0].cmp(&b.1[0])));
        keyed.truncate(MAX_NEIGHBORS);
        union = keyed.into_iter().map(|(_, g)| g).collect();
    }
    union.sort_by_key(|g| g[0]);
    union
}

/// Block kriging of every region, in region order. Failures are returned
/// per region instead of aborting the batch.
pub fn upscale_all(
    regions: &RegionSet,
    points: &[Point],
    values: &[f64],
    model: &VariogramModel,
    q: usize,
    density: f64,
    opts: BlockOptions,
) -> Vec<Result<BlockPrediction>> {
    let quads: Vec<Result<BlockQuadrature>> = regions
        .regions
        .par_iter()
        .map(|r| discretize_block(r, density))
        .collect();
    upscale_with(regions, &quads, points, values, model, q, opts)
}

/// As [`upscale_all`] with precomputed quadratures.
pub fn upscale_with(
    regions: &RegionSet,
    quads: &[Result<BlockQuadrature>],
    points: &[Point],
    values: &[f64],
    model: &VariogramModel,
    q: usize,
    opts: BlockOptions,
) -> Vec<Result<BlockPrediction>> {
    regions
        .regions
        .par_iter()
        .zip(quads.par_iter())
        .map(|(r, quad)| {
            let quad = quad.as_ref().map_err(|e| Error::Geometry(e.to_string()))?;
            let out = block_krige(r, quad, points, values, model, q, opts);
            if let Err(e) = &out {
                log::warn!("region `{}` could not be upscaled: {e}", r.id);
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Polygon;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    /// Independent solve of the full bordered system with explicit inverse.
    fn dense_oracle(pts: &[Point], vals: &[f64], model: &VariogramModel, rhs: &[f64]) -> (Vec<f64>, f64, f64) {
        let k = pts.len();
        let a = DMatrix::from_fn(k + 1, k + 1, |i, j| match (i < k, j < k) {
            (true, true) => model.gamma(pts[i].dist(&pts[j])),
            (false, false) => 0.0,
            _ => 1.0,
        });
        let mut b = DVector::from_column_slice(rhs).push(1.0);
        b = a.try_inverse().unwrap() * b;
        let w: Vec<f64> = b.iter().take(k).cloned().collect();
        let pred: f64 = w.iter().zip(vals).map(|(a, v)| a * v).sum();
        (w, b[k], pred)
    }

    #[test]
    fn q1_takes_nearest() {
        let pts = [Point::new(0.0, 0.0), Point::new(2.0, 0.0)];
        let m = VariogramModel::exponential(0.1, 1.0, 1.0);
        let p = point_krige(Point::new(1.5, 0.0), &pts, &[5.0, 7.0], &m, 1).unwrap();
        assert_eq!(p.weights.weights, vec![1.0]);
        assert_eq!(p.prediction, 7.0);
    }

    #[test]
    fn equilateral_symmetry() {
        let s3 = 3f64.sqrt();
        let pts = [Point::new(0.0, 0.0), Point::new(2.0, 0.0), Point::new(1.0, s3)];
        let c = Point::new(1.0, s3 / 3.0);
        let m = VariogramModel::matern(0.0, 1.0, 1.3, 1.0);
        let p = point_krige(c, &pts, &[1.0, 2.0, 3.0], &m, 3).unwrap();
        for w in &p.weights.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_point_oracle() {
        let pts = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)];
        let vals = [1.0, 2.0, 3.0];
        let m = VariogramModel::exponential(0.0, 1.0, 1.0);
        let t = Point::new(0.25, 0.25);
        let p = point_krige(t, &pts, &vals, &m, 3).unwrap();
        let rhs: Vec<f64> = pts.iter().map(|s| m.gamma(s.dist(&t))).collect();
        let (w, mu, pred) = dense_oracle(&pts, &vals, &m, &rhs);
        let mut got = vec![0.0; 3];
        for (i, wi) in p.weights.neighbors.iter().zip(&p.weights.weights) {
            got[*i] = *wi;
        }
        for k in 0..3 {
            assert!((got[k] - w[k]).abs() < 1e-8);
        }
        assert!((p.weights.lagrange - mu).abs() < 1e-8);
        assert!((p.prediction - pred).abs() < 1e-8);
    }

    #[test]
    fn duplicates_are_merged() {
        let pts = [Point::new(0.0, 0.0), Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
        let m = VariogramModel::exponential(0.0, 1.0, 1.0);
        let p = point_krige(Point::new(0.0, 0.0), &pts, &[1.0, 3.0, 10.0], &m, 2).unwrap();
        assert!((p.prediction - 2.0).abs() < 1e-12);
        let s: f64 = p.weights.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_model_is_singular() {
        let pts = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)];
        let m = VariogramModel::exponential(0.0, 0.0, 1.0);
        assert!(matches!(
            point_krige(Point::new(0.2, 0.2), &pts, &[1.0, 2.0, 3.0], &m, 3),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn too_large_neighborhood() {
        let pts = [Point::new(0.0, 0.0)];
        let m = VariogramModel::exponential(0.0, 1.0, 1.0);
        assert!(point_krige(Point::new(0.0, 0.0), &pts, &[1.0], &m, 2).is_err());
    }

    fn square(id: &str, x0: f64, y0: f64, s: f64) -> Region {
        Region::new(id, vec![Polygon::rect(x0, y0, x0 + s, y0 + s)], 10).unwrap()
    }

    fn lattice(n: usize) -> Vec<Point> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                // Slight jitter avoids exact distance ties.
                v.push(Point::new(i as f64 + 0.01 * ((i * 7 + j * 3) % 5) as f64, j as f64 + 0.013 * ((i + j * 5) % 7) as f64));
            }
        }
        v
    }

    #[test]
    fn block_single_node_matches_point() {
        let pts = lattice(6);
        let vals: Vec<f64> = pts.iter().map(|p| (p.x * 0.5).sin() + p.y).collect();
        let m = VariogramModel::matern(0.05, 1.0, 2.0, 1.5);
        let r = square("a", 1.0, 1.0, 2.0);
        let c = r.centroid();
        let quad = BlockQuadrature::single("a", c);
        let bp = block_krige(&r, &quad, &pts, &vals, &m, 8, BlockOptions::default()).unwrap();
        let pp = point_krige(c, &pts, &vals, &m, 8).unwrap();
        assert!((bp.block_mean - pp.prediction).abs() < 1e-8);
        assert!((bp.kriging_variance - pp.variance).abs() < 1e-8);
    }

    #[test]
    fn block_constant_field_and_pure_nugget() {
        let pts = lattice(5);
        let r = square("a", 0.5, 0.5, 3.0);
        let quad = discretize_block(&r, 4.0).unwrap();
        let m = VariogramModel::spherical(0.2, 1.0, 3.0);
        for anchor in [Anchor::Centroid, Anchor::Nodes] {
            let bp = block_krige(&r, &quad, &pts, &[4.2; 25], &m, 6, BlockOptions { anchor }).unwrap();
            assert!((bp.block_mean - 4.2).abs() < 1e-10);
        }
        let nug = VariogramModel::exponential(1.0, 0.0, 1.0);
        let g = nearest_groups(r.centroid(), &pts, 6);
        let rhs: Vec<f64> = g.iter().map(|g| point_block_gamma(pts[g[0]], &quad, &nug)).collect();
        let w = solve_groups(&g, &pts, &nug, &rhs).unwrap();
        for wi in &w.weights {
            assert!((wi - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_drift_block_mean() {
        let mut pts = Vec::new();
        for i in 0..41 {
            for j in 0..41 {
                pts.push(Point::new(i as f64 * 0.25, j as f64 * 0.25));
            }
        }
        let vals: Vec<f64> = pts.iter().map(|p| p.x).collect();
        let m = VariogramModel::exponential(0.0, 1.0, 3.0);
        let tri = Region::new(
            "t",
            vec![Polygon::new(vec![vec![Point::new(2.0, 2.0), Point::new(8.0, 3.0), Point::new(3.0, 7.0)]])],
            1,
        )
        .unwrap();
        let sq = square("s", 5.0, 5.0, 3.0);
        let rs = RegionSet::new(vec![tri, sq], "planar").unwrap();
        let out = upscale_all(&rs, &pts, &vals, &m, 15, 20.0, BlockOptions::default());
        for (res, truth) in out.iter().zip([13.0 / 3.0, 6.5]) {
            let bm = res.as_ref().unwrap().block_mean;
            assert!((bm - truth).abs() / truth < 0.02, "{bm} vs {truth}");
        }
    }

    #[test]
    fn upscale_matches_individual_calls() {
        let pts = lattice(6);
        let vals: Vec<f64> = pts.iter().map(|p| p.x * p.y).collect();
        let m = VariogramModel::matern(0.0, 2.0, 2.0, 1.0);
        let rs = RegionSet::new(vec![square("a", 0.0, 0.0, 2.5), square("b", 2.5, 0.0, 2.5)], "").unwrap();
        let all = upscale_all(&rs, &pts, &vals, &m, 10, 10.0, BlockOptions::default());
        for (r, res) in rs.regions.iter().zip(all) {
            let quad = discretize_block(r, 10.0).unwrap();
            let one = block_krige(r, &quad, &pts, &vals, &m, 10, BlockOptions::default()).unwrap();
            assert_eq!(res.unwrap(), one);
        }
    }

    #[test]
    fn sampled_within_block_average_is_close() {
        let r = square("big", 0.0, 0.0, 4.0);
        let quad = discretize_block(&r, 40.0).unwrap();
        assert!(quad.len() > EXACT_PAIR_NODES);
        let m = VariogramModel::exponential(0.0, 1.0, 1.0);
        let sampled = within_block_gamma(&quad, &m);
        let mut exact = 0.0;
        for (a, wa) in quad.nodes.iter().zip(&quad.weights) {
            for (b, wb) in quad.nodes.iter().zip(&quad.weights) {
                exact += wa * wb * m.gamma(a.dist(b));
            }
        }
        assert!((sampled - exact).abs() / exact < 0.02, "{sampled} vs {exact}");
        assert_eq!(sampled, within_block_gamma(&quad, &m));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn exact_and_sum_to_one(seed in 0u64..10_000, nug in prop::bool::ANY) {
            let mut rng = Stream::new(seed, 0, Lane::Auxiliary).rng();
            let n = 10;
            let pts: Vec<Point> = (0..n).map(|_| Point::new(rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0)).collect();
            let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let m = VariogramModel::matern(if nug { 0.3 } else { 0.0 }, 1.0, 1.5, 1.5);
            for (k, p) in pts.iter().enumerate() {
                let pr = point_krige(*p, &pts, &vals, &m, 6).unwrap();
                let s: f64 = pr.weights.weights.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
                prop_assert!((pr.prediction - vals[k]).abs() < 1e-8);
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let pp: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
            let pv: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let t = Point::new(2.5, 2.5);
            let a = point_krige(t, &pts, &vals, &m, 5).unwrap().prediction;
            let b = point_krige(t, &pp, &pv, &m, 5).unwrap().prediction;
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
