//! Reference profiles: the discrete harmonic extension of the bath
//! temperatures, its closed form in one dimension, and an independent
//! random-walk estimate of the same quantity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BoundaryTemperature, LatticeDomain, Neighbor};
use crate::replicas::{map_replicas, Execution};
use crate::stats::standard_error_of_mean;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicField {
    pub values: Vec<f64>,
    /// Largest violation of the mean-value identity over all sites.
    pub residual: f64,
    pub iterations: usize,
}

struct Stencil {
    bath_sum: Vec<f64>,
    site_neighbors: Vec<Vec<u32>>,
    weight: f64,
}

impl Stencil {
    fn new(lattice: &LatticeDomain, bath_temps: &[f64]) -> Self {
        let mut bath_sum = vec![0.0; lattice.num_sites()];
        let mut site_neighbors = vec![Vec::new(); lattice.num_sites()];
        for v in 0..lattice.num_sites() {
            for nb in lattice.neighbors(v) {
                match *nb {
                    Neighbor::Site(w) => site_neighbors[v].push(w),
                    Neighbor::Bath(b) => bath_sum[v] += bath_temps[b as usize],
                }
            }
        }
        Stencil {
            bath_sum,
            site_neighbors,
            weight: 1.0 / lattice.degree() as f64,
        }
    }

    #[inline]
    fn average(&self, u: &[f64], v: usize) -> f64 {
        let s: f64 = self.site_neighbors[v].iter().map(|&w| u[w as usize]).sum();
        (self.bath_sum[v] + s) * self.weight
    }

    fn residual(&self, u: &[f64]) -> f64 {
        (0..u.len())
            .map(|v| (u[v] - self.average(u, v)).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves `u(v) = (1/2d) Σ_{w~v} ũ(w)` with `ũ = T` on the bath by
/// Gauss-Seidel relaxation.
pub fn solve_discrete_harmonic(
    lattice: &LatticeDomain,
    temperature: &BoundaryTemperature,
    tol: f64,
) -> Result<HarmonicField> {
    solve_discrete_harmonic_with(lattice, temperature, tol, DEFAULT_MAX_SWEEPS)
}

pub fn solve_discrete_harmonic_with(
    lattice: &LatticeDomain,
    temperature: &BoundaryTemperature,
    tol: f64,
    max_sweeps: usize,
) -> Result<HarmonicField> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::ConfigInvalid(format!("tolerance must be positive, got {tol}")));
    }
    let temps = lattice.bath_temperatures(temperature)?;
    let stencil = Stencil::new(lattice, &temps);
    let start = temps.iter().sum::<f64>() / temps.len() as f64;
    let mut u = vec![start; lattice.num_sites()];
    let mut residual = stencil.residual(&u);
    let mut iterations = 0;
    while residual > tol {
        if iterations >= max_sweeps {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
        for v in 0..u.len() {
            u[v] = stencil.average(&u, v);
        }
        iterations += 1;
        residual = stencil.residual(&u);
    }
    Ok(HarmonicField {
        values: u,
        residual,
        iterations,
    })
}

/// `T0 + (T1 - T0) x`, the harmonic function on `[0, 1]`.
pub fn continuum_solution_1d(t0: f64, t1: f64, x: f64) -> f64 {
    t0 + (t1 - t0) * x
}

/// Bath temperature where a simple symmetric random walk from `start`
/// first leaves the sites.
pub fn ssrw_hit_value<R: Rng + ?Sized>(lattice: &LatticeDomain, temps: &[f64], start: usize, rng: &mut R) -> f64 {
    let degree = lattice.degree();
    let mut v = start;
    loop {
        match lattice.neighbor(v, rng.random_range(0..degree)) {
            Neighbor::Site(w) => v = w as usize,
            Neighbor::Bath(b) => return temps[b as usize],
        }
    }
}

/// Monte Carlo estimate of `E T(S_τ / L)` with its standard error.
pub fn hitting_estimate_ssrw(
    lattice: &LatticeDomain,
    temperature: &BoundaryTemperature,
    start: usize,
    replicas: usize,
    seed: u64,
    execution: Execution,
) -> Result<(f64, f64)> {
    if start >= lattice.num_sites() {
        return Err(Error::ConfigInvalid(format!("start index {start} is not a site")));
    }
    if replicas < 2 {
        return Err(Error::ConfigInvalid("need at least 2 replicas".into()));
    }
    let temps = lattice.bath_temperatures(temperature)?;
    let hits = map_replicas(seed, replicas, execution, |_, rng| ssrw_hit_value(lattice, &temps, start, rng));
    let mean = hits.iter().sum::<f64>() / hits.len() as f64;
    Ok((mean, standard_error_of_mean(&hits)))
}
