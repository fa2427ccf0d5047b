//! Discrete domains `D_L = L·D ∩ Z^d`, their bath layer, and boundary
//! temperatures.
//!
//! Sites and bath points are stored as flat coordinate arrays and addressed
//! by dense indices; the neighbor table lists the `2d` lattice neighbors of
//! every site in the fixed direction order `+e_0, -e_0, +e_1, -e_1, ...`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounded open set `D ⊂ R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Interval { lo: f64, hi: f64 },
    Rectangle { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl DomainSpec {
    pub fn unit_interval() -> Self {
        DomainSpec::Interval { lo: 0.0, hi: 1.0 }
    }

    pub fn unit_cube(dim: usize) -> Self {
        DomainSpec::Rectangle {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Interval { .. } => 1,
            DomainSpec::Rectangle { lo, .. } => lo.len(),
            DomainSpec::Ball { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            DomainSpec::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidDomain(format!(
                        "interval needs finite lo < hi, got ({lo}, {hi})"
                    )));
                }
            }
            DomainSpec::Rectangle { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::InvalidDomain(
                        "rectangle lo/hi must be nonempty and of equal length".into(),
                    ));
                }
                if !finite(lo) || !finite(hi) || lo.iter().zip(hi).any(|(a, b)| a >= b) {
                    return Err(Error::InvalidDomain(
                        "rectangle needs finite lo[i] < hi[i] on every axis".into(),
                    ));
                }
            }
            DomainSpec::Ball { center, radius } => {
                if center.len() < 2 {
                    return Err(Error::InvalidDomain("ball domains need d >= 2".into()));
                }
                if !finite(center) || !radius.is_finite() || *radius <= 0.0 {
                    return Err(Error::InvalidDomain(
                        "ball needs a finite center and positive radius".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether `x` lies in the open set.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            DomainSpec::Interval { lo, hi } => *lo < x[0] && x[0] < *hi,
            DomainSpec::Rectangle { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(x, (a, b))| a < x && x < b),
            DomainSpec::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
                r2 < radius * radius
            }
        }
    }

    /// Closed axis-aligned bounding box.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DomainSpec::Interval { lo, hi } => (vec![*lo], vec![*hi]),
            DomainSpec::Rectangle { lo, hi } => (lo.clone(), hi.clone()),
            DomainSpec::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
        }
    }

    /// Euclidean projection of `x` onto the boundary `∂D`.
    pub fn project_to_boundary(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            DomainSpec::Interval { lo, hi } => Ok(project_box(x, &[*lo], &[*hi])),
            DomainSpec::Rectangle { lo, hi } => Ok(project_box(x, lo, hi)),
            DomainSpec::Ball { center, radius } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(x, c)| x - c).collect();
                let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ProjectionAmbiguous { point: x.to_vec() });
                }
                Ok(center
                    .iter()
                    .zip(&diff)
                    .map(|(c, d)| c + radius * d / norm)
                    .collect())
            }
        }
    }
}

fn project_box(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let outside = x.iter().zip(lo.iter().zip(hi)).any(|(x, (a, b))| x < a || x > b);
    if outside {
        return x
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(x, (a, b))| x.clamp(*a, *b))
            .collect();
    }
    // Inside the closed box: move the single coordinate closest to a face.
    let mut best = (f64::INFINITY, 0, 0.0);
    for (i, (x, (a, b))) in x.iter().zip(lo.iter().zip(hi)).enumerate() {
        for face in [*a, *b] {
            let dist = (x - face).abs();
            if dist < best.0 {
                best = (dist, i, face);
            }
        }
    }
    let mut p = x.to_vec();
    p[best.1] = best.2;
    p
}

pub type TemperatureFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Temperature prescribed on `∂D`, extended to a neighborhood by
/// evaluating at the nearest boundary point.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryTemperature {
    Constant {
        value: f64,
    },
    /// 1d only: `left` at the lower endpoint, `right` at the upper one.
    Endpoints {
        left: f64,
        right: f64,
    },
    /// `offset + gradient · x`.
    Affine {
        offset: f64,
        gradient: Vec<f64>,
    },
    #[serde(skip)]
    Function(TemperatureFn),
}

impl fmt::Debug for BoundaryTemperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryTemperature::Constant { value } => {
                f.debug_struct("Constant").field("value", value).finish()
            }
            BoundaryTemperature::Endpoints { left, right } => f
                .debug_struct("Endpoints")
                .field("left", left)
                .field("right", right)
                .finish(),
            BoundaryTemperature::Affine { offset, gradient } => f
                .debug_struct("Affine")
                .field("offset", offset)
                .field("gradient", gradient)
                .finish(),
            BoundaryTemperature::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl BoundaryTemperature {
    pub fn constant(value: f64) -> Self {
        BoundaryTemperature::Constant { value }
    }

    pub fn endpoints(left: f64, right: f64) -> Self {
        BoundaryTemperature::Endpoints { left, right }
    }

    pub fn function(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        BoundaryTemperature::Function(Arc::new(f))
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            BoundaryTemperature::Constant { value } => Some(*value),
            _ => None,
        }
    }

    /// Checks that the preset matches the domain dimension and is
    /// nonnegative on the domain's bounding box.
    ///
    /// Zero temperatures are accepted: they make hitting products into
    /// hitting indicators, which the dual-process checks rely on.
    pub fn validate(&self, spec: &DomainSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTemperature(msg));
        match self {
            BoundaryTemperature::Constant { value } => {
                if !value.is_finite() || *value < 0.0 {
                    return bad(format!("constant temperature {value} must be finite and >= 0"));
                }
            }
            BoundaryTemperature::Endpoints { left, right } => {
                if spec.dim() != 1 {
                    return bad("endpoint temperatures need a 1d domain".into());
                }
                for v in [left, right] {
                    if !v.is_finite() || *v < 0.0 {
                        return bad(format!("endpoint temperature {v} must be finite and >= 0"));
                    }
                }
            }
            BoundaryTemperature::Affine { offset, gradient } => {
                if gradient.len() != spec.dim() {
                    return bad(format!(
                        "affine gradient has {} components, domain has dimension {}",
                        gradient.len(),
                        spec.dim()
                    ));
                }
                if !offset.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
                    return bad("affine coefficients must be finite".into());
                }
                // An affine function is minimized at a corner of the box.
                let (lo, hi) = spec.bounding_box();
                let min: f64 = offset
                    + gradient
                        .iter()
                        .enumerate()
                        .map(|(i, g)| (g * lo[i]).min(g * hi[i]))
                        .sum::<f64>();
                if min < 0.0 {
                    return bad(format!("affine temperature reaches {min} < 0 on the domain"));
                }
            }
            BoundaryTemperature::Function(_) => {}
        }
        Ok(())
    }

    /// Evaluates `T` at a point of (or near) the boundary.
    pub fn evaluate(&self, spec: &DomainSpec, x: &[f64]) -> f64 {
        match self {
            BoundaryTemperature::Constant { value } => *value,
            BoundaryTemperature::Endpoints { left, right } => {
                let (lo, hi) = spec.bounding_box();
                let t = ((x[0] - lo[0]) / (hi[0] - lo[0])).clamp(0.0, 1.0);
                left + (right - left) * t
            }
            BoundaryTemperature::Affine { offset, gradient } => {
                offset + gradient.iter().zip(x).map(|(g, x)| g * x).sum::<f64>()
            }
            BoundaryTemperature::Function(f) => f(x),
        }
    }
}

/// Closest point of `Z^d`, ties rounded upward in every coordinate.
pub fn nearest_lattice_point(x: &[f64]) -> Vec<i64> {
    x.iter().map(|x| (x + 0.5).floor() as i64).collect()
}

/// `T(w/L)` under the nearest-boundary-point extension.
pub fn bath_temperature(
    temp: &BoundaryTemperature,
    spec: &DomainSpec,
    w: &[i64],
    scale: f64,
) -> Result<f64> {
    let x: Vec<f64> = w.iter().map(|&c| c as f64 / scale).collect();
    let p = spec.project_to_boundary(&x)?;
    Ok(temp.evaluate(spec, &p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Neighbor {
    Site(u32),
    Bath(u32),
}

#[derive(Debug, Clone)]
pub struct LatticeDomain {
    spec: DomainSpec,
    dim: usize,
    scale: f64,
    sites: Vec<i64>,
    bath: Vec<i64>,
    neighbors: Vec<Neighbor>,
    site_lookup: HashMap<Vec<i64>, u32>,
    bath_lookup: HashMap<Vec<i64>, u32>,
}

impl LatticeDomain {
    /// Builds `D_L = {v ∈ Z^d : v/L ∈ D}` and `B_L = {v ∉ D_L : v ~ D_L}`.
    pub fn build(spec: &DomainSpec, scale: f64) -> Result<Self> {
        spec.validate()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidDomain(format!("scale must be positive, got {scale}")));
        }
        let dim = spec.dim();
        let (lo, hi) = spec.bounding_box();
        let ranges: Vec<(i64, i64)> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| ((a * scale).floor() as i64, (b * scale).ceil() as i64))
            .collect();

        // Lexicographic enumeration keeps indices deterministic.
        let mut sites = Vec::new();
        let mut point: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        let mut x = vec![0.0; dim];
        'outer: loop {
            for (xi, &p) in x.iter_mut().zip(&point) {
                *xi = p as f64 / scale;
            }
            if spec.contains(&x) {
                sites.extend_from_slice(&point);
            }
            let mut axis = dim;
            loop {
                if axis == 0 {
                    break 'outer;
                }
                axis -= 1;
                if point[axis] < ranges[axis].1 {
                    point[axis] += 1;
                    break;
                }
                point[axis] = ranges[axis].0;
            }
        }
        if sites.is_empty() {
            return Err(Error::EmptyDomain { scale });
        }

        let site_lookup: HashMap<Vec<i64>, u32> = sites
            .chunks(dim)
            .enumerate()
            .map(|(i, p)| (p.to_vec(), i as u32))
            .collect();

        let mut bath_set = BTreeSet::new();
        for p in sites.chunks(dim) {
            for dir in 0..2 * dim {
                let q = step(p, dir);
                if !site_lookup.contains_key(&q) {
                    bath_set.insert(q);
                }
            }
        }
        let bath_lookup: HashMap<Vec<i64>, u32> = bath_set
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let bath: Vec<i64> = bath_set.into_iter().flatten().collect();

        let mut neighbors = Vec::with_capacity(sites.len() * 2);
        for p in sites.chunks(dim) {
            for dir in 0..2 * dim {
                let q = step(p, dir);
                neighbors.push(match site_lookup.get(&q) {
                    Some(&i) => Neighbor::Site(i),
                    None => Neighbor::Bath(bath_lookup[&q]),
                });
            }
        }

        let lattice = LatticeDomain {
            spec: spec.clone(),
            dim,
            scale,
            sites,
            bath,
            neighbors,
            site_lookup,
            bath_lookup,
        };
        let components = lattice.count_components();
        if components != 1 {
            return Err(Error::DisconnectedDomain { components });
        }
        Ok(lattice)
    }

    fn count_components(&self) -> usize {
        let n = self.num_sites();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(v) = queue.pop_front() {
                for nb in self.neighbors(v) {
                    if let Neighbor::Site(w) = *nb {
                        let w = w as usize;
                        if !seen[w] {
                            seen[w] = true;
                            queue.push_back(w);
                        }
                    }
                }
            }
        }
        components
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of lattice neighbors per site, `2d`.
    pub fn degree(&self) -> usize {
        2 * self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len() / self.dim
    }

    pub fn num_bath(&self) -> usize {
        self.bath.len() / self.dim
    }

    pub fn site(&self, index: usize) -> &[i64] {
        &self.sites[index * self.dim..(index + 1) * self.dim]
    }

    pub fn bath_point(&self, index: usize) -> &[i64] {
        &self.bath[index * self.dim..(index + 1) * self.dim]
    }

    pub fn sites(&self) -> impl Iterator<Item = &[i64]> {
        self.sites.chunks(self.dim)
    }

    pub fn bath_points(&self) -> impl Iterator<Item = &[i64]> {
        self.bath.chunks(self.dim)
    }

    pub fn site_index(&self, point: &[i64]) -> Option<usize> {
        self.site_lookup.get(point).map(|&i| i as usize)
    }

    pub fn bath_index(&self, point: &[i64]) -> Option<usize> {
        self.bath_lookup.get(point).map(|&i| i as usize)
    }

    /// Site index of `⟨x L⟩` for a point `x ∈ D`.
    pub fn site_near(&self, x: &[f64]) -> Result<usize> {
        let scaled: Vec<f64> = x.iter().map(|x| x * self.scale).collect();
        let p = nearest_lattice_point(&scaled);
        self.site_index(&p).ok_or(Error::NotASite { point: p })
    }

    #[inline]
    pub fn neighbor(&self, site: usize, dir: usize) -> Neighbor {
        self.neighbors[site * 2 * self.dim + dir]
    }

    #[inline]
    pub fn neighbors(&self, site: usize) -> &[Neighbor] {
        let d2 = 2 * self.dim;
        &self.neighbors[site * d2..(site + 1) * d2]
    }

    /// `T(w/L)` for bath point `index`.
    pub fn bath_temperature(&self, temp: &BoundaryTemperature, index: usize) -> Result<f64> {
        bath_temperature(temp, &self.spec, self.bath_point(index), self.scale)
    }

    /// Temperatures of all bath points in index order.
    pub fn bath_temperatures(&self, temp: &BoundaryTemperature) -> Result<Vec<f64>> {
        temp.validate(&self.spec)?;
        (0..self.num_bath())
            .map(|i| self.bath_temperature(temp, i))
            .collect()
    }
}

fn step(p: &[i64], dir: usize) -> Vec<i64> {
    let mut q = p.to_vec();
    if dir.is_multiple_of(2) {
        q[dir / 2] += 1;
    } else {
        q[dir / 2] -= 1;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_interval_at_four() {
        let lat = LatticeDomain::build(&DomainSpec::unit_interval(), 4.0).unwrap();
        let sites: Vec<i64> = lat.sites().map(|p| p[0]).collect();
        let bath: Vec<i64> = lat.bath_points().map(|p| p[0]).collect();
        assert_eq!(sites, vec![1, 2, 3]);
        assert_eq!(bath, vec![0, 4]);
    }

    #[test]
    fn unit_interval_at_ten() {
        let lat = LatticeDomain::build(&DomainSpec::unit_interval(), 10.0).unwrap();
        assert_eq!(lat.num_sites(), 9);
        let bath: Vec<i64> = lat.bath_points().map(|p| p[0]).collect();
        assert_eq!(bath, vec![0, 10]);
    }

    #[test]
    fn unit_square_bath_count_matches_enumeration() {
        let lat = LatticeDomain::build(&DomainSpec::unit_cube(2), 4.0).unwrap();
        assert_eq!(lat.num_sites(), 9);
        for p in lat.sites() {
            assert!((1..=3).contains(&p[0]) && (1..=3).contains(&p[1]));
        }
        // Brute force: points of Z^2 outside the block with a neighbor inside.
        let inside = |x: i64, y: i64| (1..=3).contains(&x) && (1..=3).contains(&y);
        let mut expected = 0;
        for x in -2..=6 {
            for y in -2..=6 {
                if inside(x, y) {
                    continue;
                }
                let adj = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|(dx, dy)| inside(x + dx, y + dy));
                if adj {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 12);
        assert_eq!(lat.num_bath(), expected);
    }

    #[test]
    fn interval_site_count_formula() {
        for scale in [3.0, 4.5, 7.25, 10.0, 16.0, 33.3] {
            let lat = LatticeDomain::build(&DomainSpec::unit_interval(), scale).unwrap();
            let expected = if scale.fract() == 0.0 {
                scale as usize - 1
            } else {
                scale.ceil() as usize - 1
            };
            assert_eq!(lat.num_sites(), expected, "L = {scale}");
            assert_eq!(lat.num_bath(), 2);
        }
    }

    #[test]
    fn every_neighbor_is_site_or_bath() {
        let spec = DomainSpec::Ball {
            center: vec![0.5, 0.5],
            radius: 0.5,
        };
        let lat = LatticeDomain::build(&spec, 12.0).unwrap();
        for v in 0..lat.num_sites() {
            for dir in 0..lat.degree() {
                let q = step(lat.site(v), dir);
                let in_sites = lat.site_index(&q).is_some();
                let in_bath = lat.bath_index(&q).is_some();
                assert!(in_sites ^ in_bath);
            }
        }
        // Every bath point touches a site.
        for b in 0..lat.num_bath() {
            let p = lat.bath_point(b);
            assert!((0..lat.degree()).any(|dir| lat.site_index(&step(p, dir)).is_some()));
        }
    }

    #[test]
    fn empty_and_disconnected_domains() {
        let err = LatticeDomain::build(&DomainSpec::Interval { lo: 0.1, hi: 0.2 }, 5.0);
        assert!(matches!(err, Err(Error::EmptyDomain { .. })));
        let lat = LatticeDomain::build(&DomainSpec::unit_cube(2), 1.5).unwrap();
        assert_eq!(lat.num_sites(), 1);

        // Convex presets are always connected; cut an edge by hand.
        let mut lat = LatticeDomain::build(&DomainSpec::unit_interval(), 10.0).unwrap();
        assert_eq!(lat.count_components(), 1);
        let (a, b) = (lat.site_index(&[4]).unwrap(), lat.site_index(&[5]).unwrap());
        lat.neighbors[a * 2] = Neighbor::Bath(0);
        lat.neighbors[b * 2 + 1] = Neighbor::Bath(0);
        assert_eq!(lat.count_components(), 2);
    }

    #[test]
    fn rounding_ties_go_up() {
        assert_eq!(nearest_lattice_point(&[0.4, 0.6]), vec![0, 1]);
        assert_eq!(nearest_lattice_point(&[2.0]), vec![2]);
        assert_eq!(nearest_lattice_point(&[1.5]), vec![2]);
        assert_eq!(nearest_lattice_point(&[-0.5]), vec![0]);
    }

    #[test]
    fn bath_temperature_examples() {
        let spec = DomainSpec::unit_interval();
        let t = BoundaryTemperature::endpoints(1.0, 2.0);
        assert_eq!(bath_temperature(&t, &spec, &[0], 10.0).unwrap(), 1.0);
        assert_eq!(bath_temperature(&t, &spec, &[10], 10.0).unwrap(), 2.0);

        let t = BoundaryTemperature::constant(5.0);
        assert_eq!(bath_temperature(&t, &spec, &[0], 10.0).unwrap(), 5.0);

        let spec = DomainSpec::unit_cube(2);
        let t = BoundaryTemperature::Affine {
            offset: 1.0,
            gradient: vec![1.0, 0.0],
        };
        assert_eq!(bath_temperature(&t, &spec, &[2, -1], 4.0).unwrap(), 1.5);
    }

    #[test]
    fn ball_projection_at_center_is_ambiguous() {
        let spec = DomainSpec::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        let err = spec.project_to_boundary(&[0.0, 0.0]);
        assert!(matches!(err, Err(Error::ProjectionAmbiguous { .. })));
        let p = spec.project_to_boundary(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn bath_temperatures_stay_within_boundary_range() {
        let spec = DomainSpec::unit_cube(2);
        let t = BoundaryTemperature::function(|x| 1.0 + x[0] * x[1] + x[1]);
        let lat = LatticeDomain::build(&spec, 9.5).unwrap();
        for temp in lat.bath_temperatures(&t).unwrap() {
            // min T = 1 at (x, 0), max T = 3 at (1, 1)
            assert!((1.0..=3.0).contains(&temp));
        }
    }

    #[test]
    fn negative_temperatures_rejected() {
        let spec = DomainSpec::unit_cube(2);
        let t = BoundaryTemperature::Affine {
            offset: 0.5,
            gradient: vec![-1.0, 0.0],
        };
        assert!(t.validate(&spec).is_err());
        let t = BoundaryTemperature::endpoints(1.0, 2.0);
        assert!(t.validate(&spec).is_err());
    }
}
