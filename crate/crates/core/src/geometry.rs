//! Areal hierarchy (tracts nested in PUMAs, tracts within counties), yearly
//! populations and planar polygon geometry with Monte-Carlo quadrature.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Relative tolerance for PUMA totals against the sum of their tracts.
pub const POPULATION_TOLERANCE: f64 = 1e-6;

const MAX_PROPOSALS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Tract,
    Puma,
    County,
    Custom,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Half-open containment used for partition membership; the upper edges
    /// of the outermost rectangle are handled by the caller.
    pub fn contains_half_open(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] < self.x1 && p[1] >= self.y0 && p[1] < self.y1
    }
}

/// One areal unit with planar polygon geometry. Rings are closed; the first
/// ring is the outer boundary and later rings are holes (even-odd rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArealUnit {
    pub area_id: String,
    pub level: Level,
    pub rings: Vec<Vec<Point>>,
    pub centroid: Point,
}

impl ArealUnit {
    /// Axis-aligned square cell, centroid at its center.
    pub fn rectangle(area_id: impl Into<String>, level: Level, r: Rect) -> Self {
        let ring = vec![[r.x0, r.y0], [r.x1, r.y0], [r.x1, r.y1], [r.x0, r.y1], [r.x0, r.y0]];
        Self {
            area_id: area_id.into(),
            level,
            rings: vec![ring],
            centroid: [0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1)],
        }
    }

    /// Signed-area sum over rings with holes subtracted.
    pub fn area(&self) -> f64 {
        let mut iter = self.rings.iter();
        let outer = iter.next().map(|r| ring_area(r).abs()).unwrap_or(0.0);
        outer - iter.map(|r| ring_area(r).abs()).sum::<f64>()
    }

    pub fn bbox(&self) -> Rect {
        let mut b = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.rings.iter().flatten() {
            b.x0 = b.x0.min(p[0]);
            b.y0 = b.y0.min(p[1]);
            b.x1 = b.x1.max(p[0]);
            b.y1 = b.y1.max(p[1]);
        }
        b
    }

    pub fn contains(&self, p: Point) -> bool {
        self.rings.iter().filter(|r| ring_crossings_odd(r, p)).count() % 2 == 1
    }

    /// Geometric problems with this unit; empty when valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rings.is_empty() {
            out.push(format!("{}: no rings", self.area_id));
        }
        for (i, ring) in self.rings.iter().enumerate() {
            if ring.len() < 4 {
                out.push(format!("{}: ring {i} has fewer than 4 points", self.area_id));
                continue;
            }
            if ring.first() != ring.last() {
                out.push(format!("{}: ring {i} is not closed", self.area_id));
            }
            if ring_self_intersects(ring) {
                out.push(format!("{}: ring {i} self-intersects", self.area_id));
            }
        }
        if !(self.area() > 0.0) {
            out.push(format!("{}: non-positive polygon area", self.area_id));
        }
        out
    }
}

fn ring_area(ring: &[Point]) -> f64 {
    0.5 * ring
        .windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
}

/// Even-odd crossing test of a horizontal ray from `p` against one ring.
fn ring_crossings_odd(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let eps = 1e-12;
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps)) && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps))
}

fn ring_self_intersects(ring: &[Point]) -> bool {
    let n = ring.len() - 1;
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Quadrature points for one areal unit; weights are equal and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSet {
    pub area_id: String,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

/// `q` points uniform over the polygon by rejection from its bounding box.
pub fn quadrature_points(unit: &ArealUnit, q: usize, seed: u64) -> Result<QuadratureSet> {
    if q == 0 {
        return Err(Error::InvalidInput("quadrature size must be >= 1".into()));
    }
    let bbox = unit.bbox();
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::RejectionFailure(unit.area_id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(q);
    let mut proposals = 0;
    while points.len() < q {
        if proposals >= MAX_PROPOSALS {
            return Err(Error::RejectionFailure(unit.area_id.clone()));
        }
        proposals += 1;
        let p = [rng.gen_range(bbox.x0..bbox.x1), rng.gen_range(bbox.y0..bbox.y1)];
        if unit.contains(p) {
            points.push(p);
        }
    }
    Ok(QuadratureSet {
        area_id: unit.area_id.clone(),
        points,
        weights: vec![1.0 / q as f64; q],
    })
}

/// Per-unit seed derived from a master seed and the unit's position.
pub fn unit_seed(master: u64, index: usize) -> u64 {
    master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Tracts nested in PUMAs and counties, with yearly populations.
#[derive(Debug, Clone, Default)]
pub struct ArealHierarchy {
    pub tracts: Vec<ArealUnit>,
    pub pumas: Vec<ArealUnit>,
    pub tract_to_puma: BTreeMap<String, String>,
    pub tract_to_county: BTreeMap<String, String>,
    pub populations: HashMap<(String, i32), f64>,
    tract_index: HashMap<String, usize>,
}

impl ArealHierarchy {
    pub fn new(
        tracts: Vec<ArealUnit>,
        pumas: Vec<ArealUnit>,
        tract_to_puma: BTreeMap<String, String>,
        tract_to_county: BTreeMap<String, String>,
        populations: HashMap<(String, i32), f64>,
    ) -> Self {
        let tract_index = tracts.iter().enumerate().map(|(i, t)| (t.area_id.clone(), i)).collect();
        Self {
            tracts,
            pumas,
            tract_to_puma,
            tract_to_county,
            populations,
            tract_index,
        }
    }

    pub fn tract_index(&self, id: &str) -> Option<usize> {
        self.tract_index.get(id).copied()
    }

    pub fn is_puma(&self, id: &str) -> bool {
        self.pumas.iter().any(|p| p.area_id == id) || self.tract_to_puma.values().any(|p| p == id)
    }

    /// Tract ids of one PUMA in hierarchy order.
    pub fn tracts_of_puma(&self, puma: &str) -> Vec<&str> {
        self.tracts
            .iter()
            .filter(|t| self.tract_to_puma.get(&t.area_id).map(String::as_str) == Some(puma))
            .map(|t| t.area_id.as_str())
            .collect()
    }

    pub fn tracts_of_county(&self, county: &str) -> Vec<&str> {
        self.tracts
            .iter()
            .filter(|t| self.tract_to_county.get(&t.area_id).map(String::as_str) == Some(county))
            .map(|t| t.area_id.as_str())
            .collect()
    }

    pub fn puma_ids(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.tract_to_puma.values().collect();
        set.into_iter().cloned().collect()
    }

    pub fn county_ids(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.tract_to_county.values().collect();
        set.into_iter().cloned().collect()
    }

    pub fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.populations.keys().map(|(_, y)| *y).collect();
        set.into_iter().collect()
    }

    pub fn population(&self, area: &str, year: i32) -> Option<f64> {
        self.populations.get(&(area.to_string(), year)).copied()
    }

    /// Population of a tract in `year`, falling back to the nearest year that
    /// has a value.
    pub fn population_nearest(&self, area: &str, year: i32) -> Option<(f64, i32)> {
        if let Some(p) = self.population(area, year) {
            return Some((p, year));
        }
        self.populations
            .iter()
            .filter(|((a, _), _)| a == area)
            .min_by_key(|((_, y), _)| ((y - year).abs(), *y))
            .map(|((_, y), p)| (*p, *y))
    }

    /// Invariant violations; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.tracts {
            if !self.tract_to_puma.contains_key(&t.area_id) {
                out.push(format!("tract {} has no PUMA", t.area_id));
            }
            if !self.tract_to_county.contains_key(&t.area_id) {
                out.push(format!("tract {} has no county", t.area_id));
            }
            out.extend(t.validate());
        }
        for id in self.tract_to_puma.keys().chain(self.tract_to_county.keys()) {
            if !self.tract_index.contains_key(id) {
                out.push(format!("mapped tract {id} has no geometry"));
            }
        }
        for ((area, year), &pop) in &self.populations {
            if !(pop >= 0.0) {
                out.push(format!("negative population for {area} in {year}"));
            }
        }
        let years = self.years();
        for puma in self.puma_ids() {
            let members = self.tracts_of_puma(&puma);
            for &year in &years {
                let Some(total) = self.population(&puma, year) else {
                    continue;
                };
                let sum: f64 = members.iter().filter_map(|t| self.population(t, year)).sum();
                if (total - sum).abs() > POPULATION_TOLERANCE * total.abs().max(1.0) {
                    out.push(format!(
                        "PUMA {puma} population {total} in {year} differs from tract sum {sum}"
                    ));
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Population shares `N_t(A_ih) / N_t(A_i)` of a PUMA's tracts.
pub fn population_weights(h: &ArealHierarchy, puma: &str, year: i32) -> Result<Vec<(String, f64)>> {
    let members = h.tracts_of_puma(puma);
    if members.is_empty() {
        return Err(Error::UnknownArea(puma.to_string()));
    }
    let pops: Vec<f64> = members
        .iter()
        .map(|t| {
            h.population_nearest(t, year)
                .map(|(p, _)| p)
                .ok_or_else(|| Error::InvalidInput(format!("no population for tract {t}")))
        })
        .collect::<Result<_>>()?;
    let total: f64 = pops.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroPopulation {
            area: puma.to_string(),
            year,
        });
    }
    Ok(members.iter().zip(pops).map(|(t, p)| (t.to_string(), p / total)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_hierarchy(pop: impl Fn(usize) -> f64) -> ArealHierarchy {
        let mut tracts = Vec::new();
        let mut t2p = BTreeMap::new();
        let mut t2c = BTreeMap::new();
        let mut pops = HashMap::new();
        for row in 0..10 {
            for col in 0..10 {
                let idx = row * 10 + col;
                let id = format!("t{idx:03}");
                tracts.push(ArealUnit::rectangle(
                    &id,
                    Level::Tract,
                    Rect::new(col as f64, row as f64, col as f64 + 1.0, row as f64 + 1.0),
                ));
                let puma = format!("p{}", (row / 5) * 2 + col / 5);
                t2p.insert(id.clone(), puma.clone());
                t2c.insert(id.clone(), puma);
                pops.insert((id, 2010), pop(idx));
            }
        }
        let mut h = ArealHierarchy::new(tracts, vec![], t2p, t2c, pops);
        for p in h.puma_ids() {
            let total: f64 = h.tracts_of_puma(&p).iter().map(|t| h.population(t, 2010).unwrap()).sum();
            h.populations.insert((p, 2010), total);
        }
        h
    }

    #[test]
    fn consistent_grid_is_valid() {
        assert!(grid_hierarchy(|_| 100.0).validate().is_empty());
    }

    #[test]
    fn missing_county_is_reported() {
        let mut h = grid_hierarchy(|_| 100.0);
        h.tract_to_county.remove("t042");
        let report = h.validate();
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("t042"));
    }

    #[test]
    fn population_mismatch_is_reported() {
        let mut h = grid_hierarchy(|_| 100.0);
        *h.populations.get_mut(&("p0".to_string(), 2010)).unwrap() *= 1.05;
        let report = h.validate();
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("p0"));
    }

    #[test]
    fn equal_population_weights() {
        let h = grid_hierarchy(|_| 250.0);
        let w = population_weights(&h, "p3", 2010).unwrap();
        assert_eq!(w.len(), 25);
        assert!(w.iter().all(|(_, x)| (x - 0.04).abs() < 1e-15));
    }

    #[test]
    fn unequal_population_weights() {
        let mut h = grid_hierarchy(|_| 1.0);
        let members: Vec<String> = h.tracts_of_puma("p0").iter().map(|s| s.to_string()).collect();
        for (i, t) in members.iter().enumerate() {
            h.populations.insert((t.clone(), 2010), if i == 0 { 100.0 } else if i == 1 { 300.0 } else { 0.0 });
        }
        let w = population_weights(&h, "p0", 2010).unwrap();
        assert!((w[0].1 - 0.25).abs() < 1e-15);
        assert!((w[1].1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_population_is_an_error() {
        let h = grid_hierarchy(|_| 0.0);
        assert!(matches!(population_weights(&h, "p1", 2010), Err(Error::ZeroPopulation { .. })));
    }

    #[test]
    fn nearest_year_fallback() {
        let h = grid_hierarchy(|_| 7.0);
        assert_eq!(h.population_nearest("t001", 2013), Some((7.0, 2010)));
    }

    #[test]
    fn unit_square_quadrature() {
        let unit = ArealUnit::rectangle("sq", Level::Tract, Rect::unit());
        let q = quadrature_points(&unit, 4, 9).unwrap();
        assert_eq!(q.points.len(), 4);
        assert!(q.points.iter().all(|p| Rect::unit().contains(*p)));
        assert!(q.weights.iter().all(|&w| w == 0.25));
        let one = quadrature_points(&unit, 1, 9).unwrap();
        assert_eq!(one.weights, vec![1.0]);
        assert_eq!(q, quadrature_points(&unit, 4, 9).unwrap());
        assert!(quadrature_points(&unit, 0, 9).is_err());
    }

    #[test]
    fn quadrature_avoids_holes() {
        let outer = vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [0.0, 0.0]];
        let hole = vec![[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0], [1.0, 1.0]];
        let unit = ArealUnit {
            area_id: "donut".into(),
            level: Level::Custom,
            rings: vec![outer, hole],
            centroid: [2.0, 2.0],
        };
        assert!((unit.area() - 12.0).abs() < 1e-12);
        assert!(unit.validate().is_empty());
        let q = quadrature_points(&unit, 500, 1).unwrap();
        // independent check: the hole is the open square (1,3)^2
        assert!(q.points.iter().all(|p| !(p[0] > 1.0 && p[0] < 3.0 && p[1] > 1.0 && p[1] < 3.0)));
    }

    #[test]
    fn degenerate_polygon_fails() {
        let unit = ArealUnit {
            area_id: "line".into(),
            level: Level::Custom,
            rings: vec![vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]],
            centroid: [1.0, 1.0],
        };
        assert!(!unit.validate().is_empty());
        assert!(matches!(quadrature_points(&unit, 3, 0), Err(Error::RejectionFailure(_))));
    }

    #[test]
    fn bowtie_is_self_intersecting() {
        let unit = ArealUnit {
            area_id: "bowtie".into(),
            level: Level::Custom,
            rings: vec![vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]],
            centroid: [0.5, 0.5],
        };
        assert!(unit.validate().iter().any(|m| m.contains("self-intersects")));
    }

    #[test]
    fn quadrature_mean_converges_for_linear_function() {
        let unit = ArealUnit::rectangle("sq", Level::Tract, Rect::unit());
        // exact mean of f(x, y) = 2x + 3y + 1 over the unit square is 3.5
        let err = |q: usize| -> f64 {
            (0..20u64)
                .map(|s| {
                    let pts = quadrature_points(&unit, q, s).unwrap();
                    let m = pts.points.iter().map(|p| 2.0 * p[0] + 3.0 * p[1] + 1.0).sum::<f64>() / q as f64;
                    (m - 3.5).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        let (e16, e256, e4096) = (err(16), err(256), err(4096));
        assert!(e16 > e256 && e256 > e4096, "{e16} {e256} {e4096}");
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(pops in proptest::collection::vec(0.1f64..1e4, 25)) {
            let h = grid_hierarchy(|i| pops[i % 25]);
            let w = population_weights(&h, "p0", 2010).unwrap();
            let s: f64 = w.iter().map(|(_, x)| x).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
