//! Area system: polygons, contiguity, block discretization and uniform
//! location sampling.
//!
//! Coordinates are planar and metric. Nothing here does geodesic math.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    #[inline]
    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: Point,
    pub max: Point,
}

impl BBox {
    fn empty() -> Self {
        Self {
            min: Point::new(f64::INFINITY, f64::INFINITY),
            max: Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn extend(&mut self, p: &Point) {
        self.min.x = self.min.x.min(p.x);
        self.min.y = self.min.y.min(p.y);
        self.max.x = self.max.x.max(p.x);
        self.max.y = self.max.y.max(p.y);
    }

    /// Bounding box of a point set (inverted/empty box for no points).
    pub fn of_points(points: &[Point]) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.extend(p);
        }
        b
    }

    fn merge(&mut self, other: &BBox) {
        self.extend(&other.min);
        self.extend(&other.max);
    }

    pub fn expanded(&self, by: f64) -> BBox {
        BBox {
            min: Point::new(self.min.x - by, self.min.y - by),
            max: Point::new(self.max.x + by, self.max.y + by),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

/// One polygon: the first ring is the exterior, the rest are holes. Rings are
/// stored open (the closing vertex is not repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Vec<Point>>,
}

impl Polygon {
    pub fn new(rings: Vec<Vec<Point>>) -> Self {
        Self { rings }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ]])
    }

    fn exterior(&self) -> &[Point] {
        &self.rings[0]
    }

    pub fn area(&self) -> f64 {
        let mut a = signed_area(self.exterior()).abs();
        for hole in &self.rings[1..] {
            a -= signed_area(hole).abs();
        }
        a
    }
}

fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = &ring[i];
        let b = &ring[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

fn ring_centroid_moment(ring: &[Point]) -> (f64, f64, f64) {
    let n = ring.len();
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p = &ring[i];
        let q = &ring[(i + 1) % n];
        let cross = p.x * q.y - q.x * p.y;
        a += cross;
        cx += (p.x + q.x) * cross;
        cy += (p.y + q.y) * cross;
    }
    (0.5 * a, cx / 6.0, cy / 6.0)
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: Point,
    b: Point,
}

impl Segment {
    fn bbox(&self) -> BBox {
        let mut bb = BBox::empty();
        bb.extend(&self.a);
        bb.extend(&self.b);
        bb
    }

    fn len(&self) -> f64 {
        self.a.dist(&self.b)
    }

    fn distance_to_point(&self, p: &Point) -> f64 {
        let dx = self.b.x - self.a.x;
        let dy = self.b.y - self.a.y;
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            return self.a.dist(p);
        }
        let t = (((p.x - self.a.x) * dx + (p.y - self.a.y) * dy) / len2).clamp(0.0, 1.0);
        Point::new(self.a.x + t * dx, self.a.y + t * dy).dist(p)
    }

    fn line_distance(&self, p: &Point) -> f64 {
        let dx = self.b.x - self.a.x;
        let dy = self.b.y - self.a.y;
        let len = dx.hypot(dy);
        if len == 0.0 {
            return self.a.dist(p);
        }
        ((p.x - self.a.x) * dy - (p.y - self.a.y) * dx).abs() / len
    }

    fn intersects(&self, other: &Segment) -> bool {
        fn orient(a: &Point, b: &Point, c: &Point) -> f64 {
            (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
        }
        let d1 = orient(&self.a, &self.b, &other.a);
        let d2 = orient(&self.a, &self.b, &other.b);
        let d3 = orient(&other.a, &other.b, &self.a);
        let d4 = orient(&other.a, &other.b, &self.b);
        if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
            && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
        {
            return true;
        }
        self.distance_to_point(&other.a) == 0.0
            || self.distance_to_point(&other.b) == 0.0
            || other.distance_to_point(&self.a) == 0.0
            || other.distance_to_point(&self.b) == 0.0
    }

    fn distance_to_segment(&self, other: &Segment) -> f64 {
        if self.intersects(other) {
            return 0.0;
        }
        self.distance_to_point(&other.a)
            .min(self.distance_to_point(&other.b))
            .min(other.distance_to_point(&self.a))
            .min(other.distance_to_point(&self.b))
    }

    /// Length of the collinear overlap with `other`, or 0 if the segments are
    /// not collinear within `tol`.
    fn collinear_overlap(&self, other: &Segment, tol: f64) -> f64 {
        let len = self.len();
        if len <= tol {
            return 0.0;
        }
        if self.line_distance(&other.a) > tol || self.line_distance(&other.b) > tol {
            return 0.0;
        }
        let ux = (self.b.x - self.a.x) / len;
        let uy = (self.b.y - self.a.y) / len;
        let proj = |p: &Point| (p.x - self.a.x) * ux + (p.y - self.a.y) * uy;
        let (t0, t1) = {
            let (s, e) = (proj(&other.a), proj(&other.b));
            (s.min(e), s.max(e))
        };
        (t1.min(len) - t0.max(0.0)).max(0.0)
    }
}

/// A small area: an id, its polygon parts and population size `N_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    pub parts: Vec<Polygon>,
    pub population_count: u64,
    /// Optional higher-level grouping (e.g. the NUTS-2 unit a subregion sits in).
    pub group: Option<String>,
    bbox: BBox,
}

impl Region {
    pub fn new(id: impl Into<String>, parts: Vec<Polygon>, population_count: u64) -> Result<Self> {
        let id = id.into();
        if parts.is_empty() {
            return Err(Error::Geometry(format!("region `{id}` has no polygon")));
        }
        let mut bbox = BBox::empty();
        for part in &parts {
            if part.rings.is_empty() || part.rings[0].len() < 3 {
                return Err(Error::Geometry(format!(
                    "region `{id}` has an exterior ring with fewer than 3 vertices"
                )));
            }
            if signed_area(part.exterior()).abs() <= 0.0 {
                return Err(Error::Geometry(format!(
                    "region `{id}` has a zero-area exterior ring"
                )));
            }
            if ring_self_intersects(part.exterior()) {
                return Err(Error::Geometry(format!(
                    "region `{id}` has a self-intersecting exterior ring"
                )));
            }
            for ring in &part.rings {
                for p in ring {
                    if !p.x.is_finite() || !p.y.is_finite() {
                        return Err(Error::Geometry(format!(
                            "region `{id}` has a non-finite coordinate"
                        )));
                    }
                    bbox.extend(p);
                }
            }
        }
        Ok(Self {
            id,
            parts,
            population_count,
            group: None,
            bbox,
        })
    }

    pub fn with_group(mut self, group: Option<String>) -> Self {
        self.group = group;
        self
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn area(&self) -> f64 {
        self.parts.iter().map(Polygon::area).sum()
    }

    /// Area-weighted centroid over all parts (holes subtract).
    pub fn centroid(&self) -> Point {
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for part in &self.parts {
            for (k, ring) in part.rings.iter().enumerate() {
                let (ra, rx, ry) = ring_centroid_moment(ring);
                // orient exterior positive, holes negative
                let sign = if (k == 0) == (ra > 0.0) { 1.0 } else { -1.0 };
                a += sign * ra;
                cx += sign * rx;
                cy += sign * ry;
            }
        }
        if a.abs() <= f64::MIN_POSITIVE {
            return Point::new(
                0.5 * (self.bbox.min.x + self.bbox.max.x),
                0.5 * (self.bbox.min.y + self.bbox.max.y),
            );
        }
        Point::new(cx / a, cy / a)
    }

    fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        self.parts.iter().flat_map(|part| {
            part.rings.iter().flat_map(|ring| {
                let n = ring.len();
                (0..n).map(move |i| Segment {
                    a: ring[i],
                    b: ring[(i + 1) % n],
                })
            })
        })
    }

    /// Distance from `p` to the region boundary.
    pub fn boundary_distance(&self, p: &Point) -> f64 {
        self.segments()
            .map(|s| s.distance_to_point(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance from `p` to the region (0 inside).
    pub fn distance(&self, p: &Point) -> f64 {
        if point_in_region(p, self) {
            0.0
        } else {
            self.boundary_distance(p)
        }
    }
}

fn ring_self_intersects(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    let segs: Vec<Segment> = (0..n)
        .map(|i| Segment {
            a: ring[i],
            b: ring[(i + 1) % n],
        })
        .collect();
    let boxes: Vec<BBox> = segs.iter().map(Segment::bbox).collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue; // adjacent through the closing edge
            }
            if !boxes[i].intersects(&boxes[j]) {
                continue;
            }
            if segs[i].intersects(&segs[j]) {
                return true;
            }
        }
    }
    false
}

/// Even-odd membership; points on the boundary count as inside.
pub fn point_in_region(p: &Point, region: &Region) -> bool {
    if !region.bbox.contains(p) {
        return false;
    }
    let scale = region.bbox.diagonal().max(1.0);
    let mut inside = false;
    for part in &region.parts {
        for ring in &part.rings {
            let n = ring.len();
            let mut j = n - 1;
            for i in 0..n {
                let a = &ring[i];
                let b = &ring[j];
                let seg = Segment { a: *a, b: *b };
                if seg.distance_to_point(p) <= 1e-12 * scale {
                    return true;
                }
                if (a.y > p.y) != (b.y > p.y) {
                    let x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
                    if p.x < x_cross {
                        inside = !inside;
                    }
                }
                j = i;
            }
        }
    }
    inside
}

/// Ordered collection of regions. The order fixed here indexes every vector
/// and matrix downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub regions: Vec<Region>,
    pub crs_note: String,
    index: HashMap<String, usize>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>, crs_note: impl Into<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(regions.len());
        for (i, r) in regions.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Geometry(format!("duplicate region id `{}`", r.id)));
            }
        }
        Ok(Self {
            regions,
            crs_note: crs_note.into(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Region> {
        self.index_of(id).map(|i| &self.regions[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.id.as_str())
    }

    pub fn bbox(&self) -> BBox {
        let mut bb = BBox::empty();
        for r in &self.regions {
            bb.merge(&r.bbox);
        }
        bb
    }

    pub fn total_area(&self) -> f64 {
        self.regions.iter().map(Region::area).sum()
    }

    /// Index of the first region containing `p`.
    pub fn locate(&self, p: &Point) -> Option<usize> {
        self.regions.iter().position(|r| point_in_region(p, r))
    }

    /// Distance from `p` to the union of all regions (0 inside).
    pub fn distance_to_union(&self, p: &Point) -> f64 {
        let mut best = f64::INFINITY;
        for r in &self.regions {
            if point_in_region(p, r) {
                return 0.0;
            }
            best = best.min(r.boundary_distance(p));
        }
        best
    }

    pub fn subset(&self, keep: &[usize]) -> Result<RegionSet> {
        RegionSet::new(
            keep.iter().map(|&i| self.regions[i].clone()).collect(),
            self.crs_note.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyRule {
    /// Neighbors share a boundary segment of positive length.
    #[default]
    SharedEdge,
    /// Neighbors touch in at least one point.
    SharedPoint,
}

/// Which regions count when row-standardizing the weights of the modeled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyUniverse {
    /// Contiguity among modeled areas only; rows re-standardized.
    #[default]
    ModeledOnly,
    /// Weights keep the denominators `#∂(i)` of the full region set, so rows of
    /// areas next to unmodeled regions sum to less than 1.
    AllRegions,
}

/// Row-standardized contiguity matrix `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContiguityMatrix {
    pub w: DMatrix<f64>,
    pub neighbor_sets: Vec<Vec<usize>>,
    /// Ids of regions with no neighbor; their rows are all zero.
    pub islands: Vec<String>,
    ids: Vec<String>,
}

impl ContiguityMatrix {
    pub fn from_neighbors(ids: Vec<String>, neighbor_sets: Vec<Vec<usize>>) -> Self {
        let m = ids.len();
        let mut w = DMatrix::zeros(m, m);
        let mut islands = Vec::new();
        for (i, nb) in neighbor_sets.iter().enumerate() {
            if nb.is_empty() {
                islands.push(ids[i].clone());
                continue;
            }
            let share = 1.0 / nb.len() as f64;
            for &j in nb {
                w[(i, j)] = share;
            }
        }
        Self {
            w,
            neighbor_sets,
            islands,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Weights among the areas in `keep` (indices into this matrix).
    pub fn restrict(&self, keep: &[usize], universe: AdjacencyUniverse) -> ContiguityMatrix {
        match universe {
            AdjacencyUniverse::ModeledOnly => {
                let pos: HashMap<usize, usize> =
                    keep.iter().enumerate().map(|(k, &i)| (i, k)).collect();
                let sets = keep
                    .iter()
                    .map(|&i| {
                        self.neighbor_sets[i]
                            .iter()
                            .filter_map(|j| pos.get(j).copied())
                            .collect()
                    })
                    .collect();
                ContiguityMatrix::from_neighbors(
                    keep.iter().map(|&i| self.ids[i].clone()).collect(),
                    sets,
                )
            }
            AdjacencyUniverse::AllRegions => {
                let m = keep.len();
                let pos: HashMap<usize, usize> =
                    keep.iter().enumerate().map(|(k, &i)| (i, k)).collect();
                let mut w = DMatrix::zeros(m, m);
                let mut sets = vec![Vec::new(); m];
                let mut islands = Vec::new();
                for (a, &i) in keep.iter().enumerate() {
                    for &j in &self.neighbor_sets[i] {
                        if let Some(&b) = pos.get(&j) {
                            w[(a, b)] = self.w[(i, j)];
                            sets[a].push(b);
                        }
                    }
                    if sets[a].is_empty() {
                        islands.push(self.ids[i].clone());
                    }
                }
                ContiguityMatrix {
                    w,
                    neighbor_sets: sets,
                    islands,
                    ids: keep.iter().map(|&i| self.ids[i].clone()).collect(),
                }
            }
        }
    }
}

/// Builds the row-standardized contiguity matrix `w_ij = 1(i~j) / #∂(i)`.
///
/// `tolerance` is the snap distance (map units) under which coordinates are
/// treated as coincident.
pub fn build_contiguity(
    regions: &RegionSet,
    rule: AdjacencyRule,
    tolerance: f64,
) -> Result<ContiguityMatrix> {
    if regions.is_empty() {
        return Err(Error::Geometry("empty region set".into()));
    }
    let m = regions.len();
    let segs: Vec<Vec<Segment>> = regions.regions.iter().map(|r| r.segments().collect()).collect();
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in 0..m {
        let bi = regions.regions[i].bbox.expanded(tolerance);
        for j in (i + 1)..m {
            let bj = regions.regions[j].bbox.expanded(tolerance);
            if !bi.intersects(&bj) {
                continue;
            }
            if regions_adjacent(&segs[i], &segs[j], &bi, &bj, rule, tolerance) {
                sets[i].push(j);
                sets[j].push(i);
            }
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    let cm = ContiguityMatrix::from_neighbors(regions.ids().map(str::to_owned).collect(), sets);
    for id in &cm.islands {
        log::warn!("region `{id}` has no neighbors; its row of W is zero");
    }
    Ok(cm)
}

fn regions_adjacent(
    a: &[Segment],
    b: &[Segment],
    ba: &BBox,
    bb: &BBox,
    rule: AdjacencyRule,
    tol: f64,
) -> bool {
    let sa: Vec<&Segment> = a.iter().filter(|s| s.bbox().expanded(tol).intersects(bb)).collect();
    let sb: Vec<&Segment> = b.iter().filter(|s| s.bbox().expanded(tol).intersects(ba)).collect();
    for s in &sa {
        let bs = s.bbox().expanded(tol);
        for t in &sb {
            if !bs.intersects(&t.bbox()) {
                continue;
            }
            let hit = match rule {
                AdjacencyRule::SharedEdge => {
                    s.collinear_overlap(t, tol) > tol || t.collinear_overlap(s, tol) > tol
                }
                AdjacencyRule::SharedPoint => s.distance_to_segment(t) <= tol,
            };
            if hit {
                return true;
            }
        }
    }
    false
}

/// Discretization of a region for block averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuadrature {
    pub region_id: String,
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
}

impl BlockQuadrature {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Single node with weight 1.
    pub fn single(region_id: impl Into<String>, node: Point) -> Self {
        Self {
            region_id: region_id.into(),
            nodes: vec![node],
            weights: vec![1.0],
        }
    }
}

pub const MIN_QUADRATURE_NODES: usize = 4;

/// Regular grid clipped to the polygon with uniform weights. The density is
/// refined (x4 per step) until at least [`MIN_QUADRATURE_NODES`] nodes fall
/// inside.
pub fn discretize_block(region: &Region, target_density: f64) -> Result<BlockQuadrature> {
    if !(target_density > 0.0 && target_density.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "quadrature density must be positive, got {target_density}"
        )));
    }
    if region.area() <= 0.0 {
        return Err(Error::Geometry(format!("region `{}` has zero area", region.id)));
    }
    let bb = region.bbox;
    let mut density = target_density;
    for _ in 0..40 {
        let step = 1.0 / density.sqrt();
        let nx = ((bb.width() / step).ceil() as usize).max(1);
        let ny = ((bb.height() / step).ceil() as usize).max(1);
        if nx.saturating_mul(ny) > 50_000_000 {
            break;
        }
        let mut nodes = Vec::new();
        for iy in 0..ny {
            let y = bb.min.y + (iy as f64 + 0.5) * step;
            for ix in 0..nx {
                let p = Point::new(bb.min.x + (ix as f64 + 0.5) * step, y);
                if point_in_region(&p, region) {
                    nodes.push(p);
                }
            }
        }
        if nodes.len() >= MIN_QUADRATURE_NODES {
            let w = 1.0 / nodes.len() as f64;
            return Ok(BlockQuadrature {
                region_id: region.id.clone(),
                weights: vec![w; nodes.len()],
                nodes,
            });
        }
        density *= 4.0;
    }
    Err(Error::Geometry(format!(
        "could not place {MIN_QUADRATURE_NODES} quadrature nodes in region `{}`",
        region.id
    )))
}

/// Quadrature density giving roughly `nodes_per_region` nodes to a region of
/// average size.
pub fn density_for_nodes(regions: &RegionSet, nodes_per_region: usize) -> f64 {
    let mean_area = regions.total_area() / regions.len().max(1) as f64;
    nodes_per_region as f64 / mean_area
}

/// Area over which uniform locations are drawn: the union of a region set,
/// optionally grown by a buffer distance.
#[derive(Debug, Clone, Copy)]
pub struct SamplingDomain<'a> {
    pub regions: &'a RegionSet,
    pub buffer: f64,
}

impl<'a> SamplingDomain<'a> {
    pub fn union(regions: &'a RegionSet) -> Self {
        Self {
            regions,
            buffer: 0.0,
        }
    }

    pub fn buffered(regions: &'a RegionSet, buffer: f64) -> Self {
        Self { regions, buffer }
    }

    pub fn contains(&self, p: &Point) -> bool {
        if self.buffer <= 0.0 {
            self.regions
                .regions
                .iter()
                .any(|r| r.bbox.contains(p) && point_in_region(p, r))
        } else {
            self.regions.regions.iter().any(|r| {
                r.bbox.expanded(self.buffer).contains(p) && r.distance(p) <= self.buffer
            })
        }
    }
}

const MIN_ACCEPTANCE: f64 = 1e-4;

/// `count` points uniform over the union of `regions`.
pub fn sample_uniform_locations(
    regions: &RegionSet,
    count: usize,
    stream: Stream,
) -> Result<Vec<Point>> {
    sample_uniform_in(&SamplingDomain::union(regions), count, stream)
}

/// Rejection sampling from the domain's bounding box.
pub fn sample_uniform_in(domain: &SamplingDomain<'_>, count: usize, stream: Stream) -> Result<Vec<Point>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if domain.regions.is_empty() || domain.regions.total_area() <= 0.0 {
        return Err(Error::Geometry("sampling domain has zero area".into()));
    }
    let bb = domain.regions.bbox().expanded(domain.buffer.max(0.0));
    let mut rng = stream.rng();
    let mut out = Vec::with_capacity(count);
    let mut attempts: u64 = 0;
    while out.len() < count {
        attempts += 1;
        let p = Point::new(
            bb.min.x + rng.random::<f64>() * bb.width(),
            bb.min.y + rng.random::<f64>() * bb.height(),
        );
        if domain.contains(&p) {
            out.push(p);
        }
        if attempts >= 100_000 && (out.len() as f64) < MIN_ACCEPTANCE * attempts as f64 {
            return Err(Error::Geometry(format!(
                "rejection sampling acceptance rate below {MIN_ACCEPTANCE} (degenerate geometry)"
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// GeoJSON

fn parse_ring(v: &Value) -> Option<Vec<Point>> {
    let mut ring: Vec<Point> = v
        .as_array()?
        .iter()
        .map(|c| {
            let c = c.as_array()?;
            Some(Point::new(c.first()?.as_f64()?, c.get(1)?.as_f64()?))
        })
        .collect::<Option<_>>()?;
    if ring.len() >= 2 && ring.first() == ring.last() {
        ring.pop();
    }
    Some(ring)
}

fn parse_polygon(v: &Value) -> Option<Polygon> {
    let rings = v.as_array()?.iter().map(parse_ring).collect::<Option<Vec<_>>>()?;
    if rings.is_empty() {
        return None;
    }
    Some(Polygon::new(rings))
}

/// Reads a FeatureCollection whose features carry `region_id` and
/// `population_count` properties. `group_property`, when given, names an
/// optional grouping property.
pub fn read_regions_geojson(
    path: &Path,
    crs_note: &str,
    group_property: Option<&str>,
) -> Result<RegionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_regions_geojson(&text, crs_note, group_property).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        Error::Geometry(message) => Error::parse(path, message),
        other => other,
    })
}

pub fn parse_regions_geojson(
    text: &str,
    crs_note: &str,
    group_property: Option<&str>,
) -> Result<RegionSet> {
    let bad = |m: String| Error::parse("<geojson>", m);
    let doc: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("expected a FeatureCollection with `features`".into()))?;
    let mut regions = Vec::with_capacity(features.len());
    for (k, f) in features.iter().enumerate() {
        let props = f
            .get("properties")
            .ok_or_else(|| bad(format!("feature {k}: missing properties")))?;
        let id = match props.get("region_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(bad(format!("feature {k}: missing string property `region_id`"))),
        };
        let population = props
            .get("population_count")
            .and_then(Value::as_u64)
            .ok_or_else(|| {
                bad(format!(
                    "feature {k} (`{id}`): `population_count` must be a nonnegative integer"
                ))
            })?;
        let group = group_property.and_then(|g| match props.get(g) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        });
        let geom = f
            .get("geometry")
            .ok_or_else(|| bad(format!("feature {k} (`{id}`): missing geometry")))?;
        let coords = geom.get("coordinates");
        let parts = match (geom.get("type").and_then(Value::as_str), coords) {
            (Some("Polygon"), Some(c)) => parse_polygon(c).map(|p| vec![p]),
            (Some("MultiPolygon"), Some(c)) => c
                .as_array()
                .and_then(|ps| ps.iter().map(parse_polygon).collect::<Option<Vec<_>>>()),
            _ => None,
        }
        .ok_or_else(|| bad(format!("feature {k} (`{id}`): expected Polygon or MultiPolygon")))?;
        regions.push(Region::new(id, parts, population)?.with_group(group));
    }
    RegionSet::new(regions, crs_note)
}

pub fn regions_to_geojson(regions: &RegionSet, group_property: &str) -> Value {
    let features: Vec<Value> = regions
        .regions
        .iter()
        .map(|r| {
            let polys: Vec<Value> = r
                .parts
                .iter()
                .map(|p| {
                    Value::Array(
                        p.rings
                            .iter()
                            .map(|ring| {
                                let mut pts: Vec<Value> =
                                    ring.iter().map(|q| json!([q.x, q.y])).collect();
                                pts.push(json!([ring[0].x, ring[0].y]));
                                Value::Array(pts)
                            })
                            .collect(),
                    )
                })
                .collect();
            let geometry = if polys.len() == 1 {
                json!({"type": "Polygon", "coordinates": polys[0]})
            } else {
                json!({"type": "MultiPolygon", "coordinates": polys})
            };
            let mut props = serde_json::Map::new();
            props.insert("region_id".into(), json!(r.id));
            props.insert("population_count".into(), json!(r.population_count));
            if let Some(g) = &r.group {
                props.insert(group_property.into(), json!(g));
            }
            json!({"type": "Feature", "properties": props, "geometry": geometry})
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}
