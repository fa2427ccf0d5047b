//! Estimators that turn simulation output into checkable statements:
//! exponential moments, Poisson particle counts, conditional moments given
//! a site's particle count, and the two-sided duality identity.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dual::{DualChain, PacketLocation, PacketState, ParticleInit};
use crate::error::{Error, Result};
use crate::forward::{ForwardChain, LocalSnapshot, SystemState};
use crate::lattice::{BoundaryTemperature, LatticeDomain};
use crate::replicas::{try_map_replicas, Execution};

pub use crate::forward::DEFAULT_BATCHES;

/// Sample standard deviation over `sqrt(n)`; NaN for fewer than 2 values.
pub fn standard_error_of_mean(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Means of `batches` contiguous, nearly equal blocks.
pub fn batch_means(xs: &[f64], batches: usize) -> Vec<f64> {
    let batches = batches.min(xs.len()).max(1);
    let n = xs.len();
    (0..batches)
        .map(|b| {
            let block = &xs[b * n / batches..(b + 1) * n / batches];
            block.iter().sum::<f64>() / block.len() as f64
        })
        .collect()
}

/// Standard error of the mean of an autocorrelated series from the spread
/// of its batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    standard_error_of_mean(&batch_means(xs, batches))
}

/// Delete-one-batch jackknife standard error of `statistic`, which receives
/// the series with one block removed.
pub fn jackknife_se<F>(xs: &[f64], batches: usize, statistic: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let batches = batches.min(xs.len());
    if batches < 2 {
        return f64::NAN;
    }
    let n = xs.len();
    let mut buf = Vec::with_capacity(n);
    let estimates: Vec<f64> = (0..batches)
        .map(|b| {
            buf.clear();
            buf.extend_from_slice(&xs[..b * n / batches]);
            buf.extend_from_slice(&xs[(b + 1) * n / batches..]);
            statistic(&buf)
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / batches as f64;
    let ss: f64 = estimates.iter().map(|e| (e - mean) * (e - mean)).sum();
    ((batches - 1) as f64 / batches as f64 * ss).sqrt()
}

fn factorial(n: u32) -> f64 {
    (1..=n as u64).map(|k| k as f64).product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub order: Vec<u32>,
    pub empirical: f64,
    pub std_error: f64,
    /// `∏ n_i! θ^{n_i}`, once a scale has been supplied.
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub entries: Vec<MomentEntry>,
    pub samples: usize,
    pub theta: Option<f64>,
    pub max_relative_deviation: Option<f64>,
}

impl MomentReport {
    pub fn get(&self, order: &[u32]) -> Option<&MomentEntry> {
        self.entries.iter().find(|e| e.order == order)
    }
}

/// Every multi-index over `coords` coordinates with total degree in
/// `1..=max_degree`.
pub fn orders_up_to(coords: usize, max_degree: u32) -> Vec<Vec<u32>> {
    fn go(prefix: &mut Vec<u32>, coords: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == coords {
            if prefix.iter().any(|&n| n > 0) {
                out.push(prefix.clone());
            }
            return;
        }
        for n in 0..=left {
            prefix.push(n);
            go(prefix, coords, left - n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), coords, max_degree, &mut out);
    out
}

fn monomial(x: &[f64], order: &[u32]) -> f64 {
    x.iter().zip(order).map(|(x, &n)| x.powi(n as i32)).product()
}

/// Empirical joint moments `mean ∏ x_i^{n_i}` over sample vectors, with
/// batch-means standard errors.
pub fn empirical_moments<S: AsRef<[f64]>>(samples: &[S], orders: &[Vec<u32>]) -> Result<MomentReport> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if orders.is_empty() {
        return Err(Error::ConfigInvalid("no moment orders requested".into()));
    }
    let dim = samples[0].as_ref().len();
    if let Some(o) = orders.iter().find(|o| o.len() != dim) {
        return Err(Error::ConfigInvalid(format!(
            "order {o:?} does not match sample dimension {dim}"
        )));
    }
    let entries = orders
        .iter()
        .map(|order| {
            let values: Vec<f64> = samples.iter().map(|s| monomial(s.as_ref(), order)).collect();
            MomentEntry {
                order: order.clone(),
                empirical: values.iter().sum::<f64>() / values.len() as f64,
                std_error: batch_means_se(&values, DEFAULT_BATCHES),
                reference: None,
            }
        })
        .collect();
    Ok(MomentReport {
        entries,
        samples: samples.len(),
        theta: None,
        max_relative_deviation: None,
    })
}

/// Fills in the moments of i.i.d. exponentials with mean `theta` and
/// returns the largest relative deviation from them.
pub fn exponential_moment_distance(report: &mut MomentReport, theta: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for e in &mut report.entries {
        let reference: f64 = e
            .order
            .iter()
            .map(|&n| factorial(n) * theta.powi(n as i32))
            .product();
        e.reference = Some(reference);
        worst = worst.max((e.empirical - reference).abs() / reference);
    }
    report.theta = Some(theta);
    report.max_relative_deviation = Some(worst);
    worst
}

/// Poisson(α) mass function on `0..=cap`.
pub fn poisson_pmf(alpha: f64, cap: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(cap + 1);
    let mut term = (-alpha).exp();
    for k in 0..=cap {
        if k > 0 {
            term *= alpha / k as f64;
        }
        p.push(term);
    }
    p
}

pub fn count_distribution(counts: &[u32]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0) as usize;
    let mut dist = vec![0.0; max + 1];
    for &c in counts {
        dist[c as usize] += 1.0;
    }
    let n = counts.len() as f64;
    dist.iter_mut().for_each(|d| *d /= n);
    dist
}

/// Total variation distance between `dist` and Poisson(α), with all mass
/// above `cap` lumped into one bin.
pub fn total_variation_to_poisson(dist: &[f64], alpha: f64, cap: usize) -> f64 {
    let q = poisson_pmf(alpha, cap);
    let p_at = |k: usize| dist.get(k).copied().unwrap_or(0.0);
    let mut tv = 0.0;
    for (k, qk) in q.iter().enumerate() {
        tv += (p_at(k) - qk).abs();
    }
    let p_tail: f64 = dist.iter().skip(cap + 1).sum();
    let q_tail = (1.0 - q.iter().sum::<f64>()).max(0.0);
    tv += (p_tail - q_tail).abs();
    0.5 * tv
}

pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCounts {
    pub site: usize,
    pub distribution: Vec<f64>,
    pub mean: f64,
    pub total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub sites: (usize, usize),
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub alpha: f64,
    pub cap: usize,
    pub sites: Vec<SiteCounts>,
    pub correlations: Vec<PairCorrelation>,
}

pub const MIN_COUNT_SAMPLES: usize = 1000;

/// Compares per-site particle counts with independent Poisson(α) laws.
/// `series` holds `(site, counts over time)` pairs.
pub fn poisson_count_test(series: &[(usize, Vec<u32>)], alpha: f64, cap: usize) -> Result<CountReport> {
    if let Some((_, s)) = series.iter().find(|(_, s)| s.len() < MIN_COUNT_SAMPLES) {
        return Err(Error::InsufficientSamples {
            needed: MIN_COUNT_SAMPLES,
            got: s.len(),
        });
    }
    let sites = series
        .iter()
        .map(|(site, counts)| {
            let distribution = count_distribution(counts);
            SiteCounts {
                site: *site,
                mean: counts.iter().map(|&c| c as f64).sum::<f64>() / counts.len() as f64,
                total_variation: total_variation_to_poisson(&distribution, alpha, cap),
                distribution,
            }
        })
        .collect();
    let as_f64: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, c)| c.iter().map(|&c| c as f64).collect())
        .collect();
    let mut correlations = Vec::new();
    for a in 0..series.len() {
        for b in a + 1..series.len() {
            correlations.push(PairCorrelation {
                sites: (series[a].0, series[b].0),
                correlation: pearson_correlation(&as_f64[a], &as_f64[b]),
            });
        }
    }
    Ok(CountReport {
        alpha,
        cap,
        sites,
        correlations,
    })
}

/// Pearson chi-square goodness of fit; returns `(statistic, df, p-value)`.
pub fn chi_square_test(observed: &[f64], expected_probs: &[f64]) -> (f64, usize, f64) {
    let total: f64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(expected_probs)
        .map(|(o, p)| {
            let e = total * p;
            (o - e) * (o - e) / e
        })
        .sum();
    let df = observed.len().saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(df as f64).map(|d| d.cdf(stat)).unwrap_or(f64::NAN);
    (stat, df, p)
}

/// Chi-square statistic for time-averaged series whose standard errors
/// come from batch means, `Σ ((mean_i - expected_i) / se_i)^2` on `n - 1`
/// degrees of freedom. Returns `(statistic, df, p-value)`.
pub fn batched_chi_square(series: &[&[f64]], expected: &[f64], batches: usize) -> (f64, usize, f64) {
    let stat: f64 = series
        .iter()
        .zip(expected)
        .map(|(xs, e)| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let se = batch_means_se(xs, batches);
            ((mean - e) / se).powi(2)
        })
        .sum();
    let df = series.len().saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(df as f64).map(|d| d.cdf(stat)).unwrap_or(f64::NAN);
    (stat, df, p)
}

pub const MIN_CONDITIONAL_SAMPLES: usize = 100;
const MAX_SYMMETRIZED_PARTICLES: usize = 8;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Joint moments of `(ξ, η_1..η_K)` at a site, conditional on exactly `k`
/// particles being there, symmetrized over the order of the particles.
/// Each order is `[n_site, n_1, .., n_k]`.
pub fn conditional_energy_moments(snapshots: &[LocalSnapshot], k: usize, orders: &[Vec<u32>]) -> Result<MomentReport> {
    if k > MAX_SYMMETRIZED_PARTICLES {
        return Err(Error::ConfigInvalid(format!(
            "at most {MAX_SYMMETRIZED_PARTICLES} particles can be symmetrized, got {k}"
        )));
    }
    if orders.is_empty() || orders.iter().any(|o| o.len() != k + 1) {
        return Err(Error::ConfigInvalid(format!("each order needs {} entries", k + 1)));
    }
    let hits: Vec<&LocalSnapshot> = snapshots.iter().filter(|s| s.count() == k).collect();
    if hits.len() < MIN_CONDITIONAL_SAMPLES {
        return Err(Error::RareEvent {
            occurrences: hits.len(),
            needed: MIN_CONDITIONAL_SAMPLES,
        });
    }
    let perms = permutations(k);
    let entries = orders
        .iter()
        .map(|order| {
            let values: Vec<f64> = hits
                .iter()
                .map(|s| {
                    let site = s.site_energy.powi(order[0] as i32);
                    let sym: f64 = perms
                        .iter()
                        .map(|perm| {
                            perm.iter()
                                .zip(&order[1..])
                                .map(|(&i, &n)| s.particle_energies[i].powi(n as i32))
                                .product::<f64>()
                        })
                        .sum::<f64>()
                        / perms.len() as f64;
                    site * sym
                })
                .collect();
            MomentEntry {
                order: order.clone(),
                empirical: values.iter().sum::<f64>() / values.len() as f64,
                std_error: batch_means_se(&values, DEFAULT_BATCHES),
                reference: None,
            }
        })
        .collect();
    Ok(MomentReport {
        entries,
        samples: hits.len(),
        theta: None,
        max_relative_deviation: None,
    })
}

/// Packet counts `ň` on sites, particles and bath points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketCounts {
    pub site: Vec<u32>,
    pub carried: Vec<u32>,
    pub bath: Vec<u32>,
}

impl PacketCounts {
    pub fn empty(lattice: &LatticeDomain, particles: usize) -> Self {
        PacketCounts {
            site: vec![0; lattice.num_sites()],
            carried: vec![0; particles],
            bath: vec![0; lattice.num_bath()],
        }
    }

    /// One named packet per unit of count.
    pub fn to_placement(&self) -> Vec<PacketLocation> {
        let mut out = Vec::new();
        for (v, &n) in self.site.iter().enumerate() {
            out.extend(std::iter::repeat_n(PacketLocation::Site(v as u32), n as usize));
        }
        for (j, &n) in self.carried.iter().enumerate() {
            out.extend(std::iter::repeat_n(PacketLocation::Carried(j as u32), n as usize));
        }
        for (b, &n) in self.bath.iter().enumerate() {
            out.extend(std::iter::repeat_n(PacketLocation::Bath(b as u32), n as usize));
        }
        out
    }

    pub fn from_state(state: &PacketState, sites: usize, baths: usize) -> Self {
        let mut counts = PacketCounts {
            site: vec![0; sites],
            carried: vec![0; state.particle_position.len()],
            bath: vec![0; baths],
        };
        for loc in &state.packet_location {
            match *loc {
                PacketLocation::Site(v) => counts.site[v as usize] += 1,
                PacketLocation::Carried(j) => counts.carried[j as usize] += 1,
                PacketLocation::Bath(b) => counts.bath[b as usize] += 1,
            }
        }
        counts
    }
}

/// Energies `x̌` on sites and particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyAssignment {
    pub site: Vec<f64>,
    pub particle: Vec<f64>,
}

/// `F(ň, x̌) = ∏ ξ_v^{n_v}/n_v! · ∏ η_j^{ñ_j}/ñ_j! · ∏ T_b^{n̂_b}`.
pub fn duality_function(n: &PacketCounts, x: &EnergyAssignment, bath_temps: &[f64]) -> f64 {
    let term = |e: f64, k: u32| if k == 0 { 1.0 } else { e.powi(k as i32) / factorial(k) };
    let sites: f64 = n.site.iter().zip(&x.site).map(|(&k, &e)| term(e, k)).product();
    let parts: f64 = n.carried.iter().zip(&x.particle).map(|(&k, &e)| term(e, k)).product();
    let bath: f64 = n
        .bath
        .iter()
        .zip(bath_temps)
        .map(|(&k, &t)| if k == 0 { 1.0 } else { t.powi(k as i32) })
        .product();
    sites * parts * bath
}

#[derive(Debug, Clone)]
pub struct DualityCheckConfig {
    pub lattice: LatticeDomain,
    pub temperature: BoundaryTemperature,
    pub particles: usize,
    pub packets: PacketCounts,
    pub energies: EnergyAssignment,
    pub t_events: u64,
    pub replicas: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_std_error: f64,
    pub rhs_std_error: f64,
    pub combined_std_error: f64,
}

/// Estimates both sides of the finite-time duality identity
/// `E F(ň_*, x̌_t) = E F(ň_t, x̌_*)` with independent forward and dual
/// replicas, each started from uniformly placed particles. Replica `i`
/// uses stream `i` on the forward side and stream `replicas + i` on the
/// dual side.
pub fn duality_check(config: &DualityCheckConfig, execution: Execution) -> Result<DualityCheck> {
    let lat = &config.lattice;
    let m = config.particles;
    if config.replicas == 0 || m == 0 {
        return Err(Error::ConfigInvalid("replicas and particles must be positive".into()));
    }
    if config.packets.site.len() != lat.num_sites()
        || config.packets.carried.len() != m
        || config.packets.bath.len() != lat.num_bath()
        || config.energies.site.len() != lat.num_sites()
        || config.energies.particle.len() != m
    {
        return Err(Error::ConfigInvalid(
            "packet counts and energies must cover every site, particle and bath point".into(),
        ));
    }
    let temps = lat.bath_temperatures(&config.temperature)?;
    let placement = config.packets.to_placement();
    let r = config.replicas;

    let values = try_map_replicas(config.seed, 2 * r, execution, |i, rng| -> Result<f64> {
        let positions = ParticleInit::Uniform.sample(lat.num_sites(), m, rng)?;
        if i < r {
            let state = SystemState::new(
                lat,
                config.energies.site.clone(),
                config.energies.particle.clone(),
                positions,
            )?;
            let mut chain = ForwardChain::with_bath_temperatures(lat, temps.clone(), state);
            chain.run(config.t_events, rng);
            let x_t = EnergyAssignment {
                site: chain.state.site_energy,
                particle: chain.state.particle_energy,
            };
            Ok(duality_function(&config.packets, &x_t, &temps))
        } else {
            let state = PacketState::new(lat, placement.clone(), positions)?;
            let mut chain = DualChain::new(lat, state);
            chain.run(config.t_events, rng);
            let n_t = PacketCounts::from_state(&chain.state, lat.num_sites(), lat.num_bath());
            Ok(duality_function(&n_t, &config.energies, &temps))
        }
    })?;
    let (left, right) = values.split_at(r);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let se = |xs: &[f64]| {
        let s = standard_error_of_mean(xs);
        if s.is_nan() {
            0.0
        } else {
            s
        }
    };
    let (lhs_se, rhs_se) = (se(left), se(right));
    Ok(DualityCheck {
        lhs: mean(left),
        rhs: mean(right),
        lhs_std_error: lhs_se,
        rhs_std_error: rhs_se,
        combined_std_error: (lhs_se * lhs_se + rhs_se * rhs_se).sqrt(),
    })
}
