//! Forward energy-transport process.
//!
//! `M` particles perform reflected random walks on the sites. When a
//! particle's clock rings it pools its energy with the site it occupies,
//! leaves a uniform fraction `p` there and carries the rest to the chosen
//! neighbor. Bath neighbors refresh the particle's energy with an
//! exponential draw of mean `T(w/L)` and the particle stays put.
//!
//! All clocks ring at rate one, so the process is simulated through its
//! jump chain: one uniformly chosen particle per event. Physical time is
//! not tracked.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BoundaryTemperature, LatticeDomain, Neighbor};
use crate::replicas::replica_rng;

/// Splits `total` into `(p·total, (1-p)·total)`.
///
/// The site share is snapped to the unit-in-last-place grid of `total`, so
/// the two shares are exact and add back to `total` bit for bit.
#[inline]
fn split_energy(total: f64, p: f64) -> (f64, f64) {
    if total == 0.0 {
        return (0.0, 0.0);
    }
    let ulp = f64::from_bits(total.to_bits() + 1) - total;
    let site = ((p * total) / ulp).round() * ulp;
    (site, total - site)
}

/// Energy mixing for a jump to an interior site: returns the new site and
/// particle energies.
#[inline]
pub fn interior_exchange(site_e: f64, particle_e: f64, p: f64) -> (f64, f64) {
    split_energy(site_e + particle_e, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathExchange {
    pub site: f64,
    pub particle: f64,
    /// Energy the particle hands to the bath, `(1-p)(ξ + η)`.
    pub discarded: f64,
}

/// Energy update for a jump towards a bath point: the site keeps its share
/// of the pooled energy and the particle's remainder is replaced by
/// `bath_draw`.
#[inline]
pub fn bath_exchange(site_e: f64, particle_e: f64, p: f64, bath_draw: f64) -> BathExchange {
    let (site, discarded) = split_energy(site_e + particle_e, p);
    BathExchange {
        site,
        particle: bath_draw,
        discarded,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub site_energy: Vec<f64>,
    pub particle_energy: Vec<f64>,
    pub particle_position: Vec<u32>,
    /// Number of particles at each site, kept in sync with positions.
    occupancy: Vec<u32>,
    pub event_count: u64,
}

impl SystemState {
    pub fn new(
        lattice: &LatticeDomain,
        site_energy: Vec<f64>,
        particle_energy: Vec<f64>,
        particle_position: Vec<u32>,
    ) -> Result<Self> {
        let n = lattice.num_sites();
        if site_energy.len() != n {
            return Err(Error::ConfigInvalid(format!(
                "expected {n} site energies, got {}",
                site_energy.len()
            )));
        }
        if particle_energy.is_empty() || particle_energy.len() != particle_position.len() {
            return Err(Error::ConfigInvalid(
                "particle energies and positions must be nonempty and of equal length".into(),
            ));
        }
        if site_energy
            .iter()
            .chain(&particle_energy)
            .any(|e| !(e.is_finite() && *e >= 0.0))
        {
            return Err(Error::ConfigInvalid("energies must be finite and >= 0".into()));
        }
        let mut occupancy = vec![0u32; n];
        for &x in &particle_position {
            let slot = occupancy.get_mut(x as usize).ok_or_else(|| {
                Error::ConfigInvalid(format!("particle position {x} is not a site index"))
            })?;
            *slot += 1;
        }
        Ok(SystemState {
            site_energy,
            particle_energy,
            particle_position,
            occupancy,
            event_count: 0,
        })
    }

    /// Every energy set to `energy`, positions i.i.d. uniform over sites.
    pub fn uniform<R: Rng + ?Sized>(
        lattice: &LatticeDomain,
        particles: usize,
        energy: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = lattice.num_sites();
        let positions = (0..particles)
            .map(|_| rng.random_range(0..n) as u32)
            .collect();
        Self::new(lattice, vec![energy; n], vec![energy; particles], positions)
    }

    pub fn num_particles(&self) -> usize {
        self.particle_energy.len()
    }

    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    pub fn total_energy(&self) -> f64 {
        self.site_energy.iter().sum::<f64>() + self.particle_energy.iter().sum::<f64>()
    }
}

/// Cumulative energy exchanged with each bath point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BathFlux {
    pub events: Vec<u64>,
    /// Energy handed to the bath by arriving particles.
    pub discarded: Vec<f64>,
    /// Energy drawn from the bath.
    pub injected: Vec<f64>,
}

impl BathFlux {
    fn new(n: usize) -> Self {
        BathFlux {
            events: vec![0; n],
            discarded: vec![0.0; n],
            injected: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Interior { particle: usize, from: usize, to: usize },
    Bath { particle: usize, site: usize, bath: usize },
}

/// One replica of the forward process.
#[derive(Debug, Clone)]
pub struct ForwardChain<'a> {
    lattice: &'a LatticeDomain,
    bath_temps: Vec<f64>,
    pub state: SystemState,
    pub flux: BathFlux,
}

impl<'a> ForwardChain<'a> {
    pub fn new(
        lattice: &'a LatticeDomain,
        temperature: &BoundaryTemperature,
        state: SystemState,
    ) -> Result<Self> {
        let bath_temps = lattice.bath_temperatures(temperature)?;
        Ok(Self::with_bath_temperatures(lattice, bath_temps, state))
    }

    pub fn with_bath_temperatures(
        lattice: &'a LatticeDomain,
        bath_temps: Vec<f64>,
        state: SystemState,
    ) -> Self {
        let flux = BathFlux::new(lattice.num_bath());
        ForwardChain {
            lattice,
            bath_temps,
            state,
            flux,
        }
    }

    pub fn lattice(&self) -> &LatticeDomain {
        self.lattice
    }

    /// One event of the jump chain.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepOutcome {
        let degree = self.lattice.degree();
        let m = self.state.particle_energy.len();
        let draw = rng.random_range(0..m * degree);
        let (k, dir) = (draw / degree, draw % degree);
        let p: f64 = rng.random();
        let from = self.state.particle_position[k] as usize;
        let st = &mut self.state;
        st.event_count += 1;
        match self.lattice.neighbor(from, dir) {
            Neighbor::Site(to) => {
                let to = to as usize;
                let (site, particle) = interior_exchange(st.site_energy[from], st.particle_energy[k], p);
                st.site_energy[from] = site;
                st.particle_energy[k] = particle;
                st.particle_position[k] = to as u32;
                st.occupancy[from] -= 1;
                st.occupancy[to] += 1;
                StepOutcome::Interior {
                    particle: k,
                    from,
                    to,
                }
            }
            Neighbor::Bath(b) => {
                let b = b as usize;
                let unit: f64 = rng.sample(Exp1);
                let draw = unit * self.bath_temps[b];
                let ex = bath_exchange(st.site_energy[from], st.particle_energy[k], p, draw);
                st.site_energy[from] = ex.site;
                st.particle_energy[k] = ex.particle;
                self.flux.events[b] += 1;
                self.flux.discarded[b] += ex.discarded;
                self.flux.injected[b] += draw;
                StepOutcome::Bath {
                    particle: k,
                    site: from,
                    bath: b,
                }
            }
        }
    }

    pub fn run<R: Rng + ?Sized>(&mut self, events: u64, rng: &mut R) {
        for _ in 0..events {
            self.step(rng);
        }
    }
}

/// Scalar quantities recorded along a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    SiteEnergy { site: usize },
    ParticleEnergy { particle: usize },
    ParticlePosition { particle: usize },
    ParticleCount { site: usize },
    TotalEnergy,
}

impl Observable {
    fn read(&self, state: &SystemState) -> f64 {
        match *self {
            Observable::SiteEnergy { site } => state.site_energy[site],
            Observable::ParticleEnergy { particle } => state.particle_energy[particle],
            Observable::ParticlePosition { particle } => state.particle_position[particle] as f64,
            Observable::ParticleCount { site } => state.occupancy[site] as f64,
            Observable::TotalEnergy => state.total_energy(),
        }
    }

    pub fn label(&self, lattice: &LatticeDomain) -> String {
        let coords = |site: usize| {
            lattice
                .site(site)
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("_")
        };
        match *self {
            Observable::SiteEnergy { site } => format!("xi_{}", coords(site)),
            Observable::ParticleEnergy { particle } => format!("eta_{particle}"),
            Observable::ParticlePosition { particle } => format!("pos_{particle}"),
            Observable::ParticleCount { site } => format!("count_{}", coords(site)),
            Observable::TotalEnergy => "total_energy".into(),
        }
    }
}

/// Site energy together with the energies of the particles sitting on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSnapshot {
    pub site_energy: f64,
    pub particle_energies: Vec<f64>,
}

impl LocalSnapshot {
    pub fn count(&self) -> usize {
        self.particle_energies.len()
    }
}

pub const DEFAULT_BATCHES: usize = 30;

#[derive(Debug, Clone)]
pub struct ForwardRunConfig {
    pub lattice: LatticeDomain,
    pub temperature: BoundaryTemperature,
    pub particles: usize,
    pub seed: u64,
    pub burn_in_events: u64,
    pub sample_events: u64,
    pub thinning: u64,
    pub observables: Vec<Observable>,
    /// Sites whose local snapshots are recorded at every sample.
    pub snapshot_sites: Vec<usize>,
    pub batches: usize,
}

impl ForwardRunConfig {
    /// Defaults: burn-in `200·|D_L|·M` events, thinning `M`.
    pub fn new(
        lattice: LatticeDomain,
        temperature: BoundaryTemperature,
        particles: usize,
        seed: u64,
        sample_events: u64,
    ) -> Self {
        let burn_in_events = default_burn_in(lattice.num_sites(), particles);
        ForwardRunConfig {
            lattice,
            temperature,
            particles,
            seed,
            burn_in_events,
            sample_events,
            thinning: particles.max(1) as u64,
            observables: Vec::new(),
            snapshot_sites: Vec::new(),
            batches: DEFAULT_BATCHES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::ConfigInvalid("need at least one particle".into()));
        }
        if self.thinning == 0 {
            return Err(Error::ConfigInvalid("thinning must be >= 1".into()));
        }
        if self.burn_in_events + self.sample_events == 0 {
            return Err(Error::ConfigInvalid("burn_in_events + sample_events must be >= 1".into()));
        }
        if self.batches == 0 {
            return Err(Error::ConfigInvalid("batches must be >= 1".into()));
        }
        let n = self.lattice.num_sites();
        for obs in &self.observables {
            let ok = match *obs {
                Observable::SiteEnergy { site } | Observable::ParticleCount { site } => site < n,
                Observable::ParticleEnergy { particle }
                | Observable::ParticlePosition { particle } => particle < self.particles,
                Observable::TotalEnergy => true,
            };
            if !ok {
                return Err(Error::ConfigInvalid(format!("observable {obs:?} is out of range")));
            }
        }
        if let Some(s) = self.snapshot_sites.iter().find(|&&s| s >= n) {
            return Err(Error::ConfigInvalid(format!("snapshot site {s} is out of range")));
        }
        self.temperature.validate(self.lattice.spec())
    }

    pub fn records(&self) -> usize {
        (self.sample_events / self.thinning) as usize
    }
}

pub fn default_burn_in(sites: usize, particles: usize) -> u64 {
    200 * sites as u64 * particles as u64
}

/// Time-averaged statistics of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteStatistics {
    pub mean: f64,
    pub variance: f64,
    /// Batch-means standard error of `mean`.
    pub std_error: f64,
    pub mean_occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateSample {
    pub observables: Vec<Observable>,
    /// One sequence per observable, `⌊sample_events / thinning⌋` long.
    pub series: Vec<Vec<f64>>,
    pub snapshot_sites: Vec<usize>,
    pub snapshots: Vec<Vec<LocalSnapshot>>,
    pub profile: Vec<SiteStatistics>,
    /// Per-batch site-energy means, `batches × |D_L|` row-major.
    pub batch_means: Vec<f64>,
    pub batches: usize,
    pub bath_flux: BathFlux,
    pub records: usize,
    pub events: u64,
}

impl SteadyStateSample {
    pub fn series_of(&self, obs: &Observable) -> Option<&[f64]> {
        self.observables
            .iter()
            .position(|o| o == obs)
            .map(|i| self.series[i].as_slice())
    }

    pub fn snapshots_at(&self, site: usize) -> Option<&[LocalSnapshot]> {
        self.snapshot_sites
            .iter()
            .position(|&s| s == site)
            .map(|i| self.snapshots[i].as_slice())
    }

    /// Batch means of site `v`.
    pub fn site_batch_means(&self, v: usize) -> Vec<f64> {
        let n = self.profile.len();
        (0..self.batches).map(|b| self.batch_means[b * n + v]).collect()
    }
}

/// Starting point for steady-state runs: every energy at the midpoint of
/// the bath temperature range, positions uniform.
pub fn initial_state<R: Rng + ?Sized>(
    lattice: &LatticeDomain,
    bath_temps: &[f64],
    particles: usize,
    rng: &mut R,
) -> Result<SystemState> {
    let (lo, hi) = bath_temps
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    SystemState::uniform(lattice, particles, 0.5 * (lo + hi), rng)
}

/// Runs burn-in followed by the sampling window. Deterministic given the
/// config's seed.
pub fn simulate_ness(config: &ForwardRunConfig) -> Result<SteadyStateSample> {
    simulate_ness_replica(config, 0)
}

/// Replica `replica` of [`simulate_ness`], on its own random stream.
pub fn simulate_ness_replica(config: &ForwardRunConfig, replica: u64) -> Result<SteadyStateSample> {
    config.validate()?;
    let lattice = &config.lattice;
    let mut rng = replica_rng(config.seed, replica);
    let bath_temps = lattice.bath_temperatures(&config.temperature)?;
    let state = initial_state(lattice, &bath_temps, config.particles, &mut rng)?;
    let mut chain = ForwardChain::with_bath_temperatures(lattice, bath_temps, state);
    chain.run(config.burn_in_events, &mut rng);
    chain.flux = BathFlux::new(lattice.num_bath());

    let n = lattice.num_sites();
    let records = config.records();
    let batches = config.batches.min(records.max(1));
    let mut series: Vec<Vec<f64>> = config
        .observables
        .iter()
        .map(|_| Vec::with_capacity(records))
        .collect();
    let mut snapshots: Vec<Vec<LocalSnapshot>> = config
        .snapshot_sites
        .iter()
        .map(|_| Vec::with_capacity(records))
        .collect();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut occ = vec![0u64; n];
    let mut batch_sums = vec![0.0; batches * n];
    let mut batch_counts = vec![0usize; batches];
    let mut recorded = 0usize;

    for i in 0..config.sample_events {
        chain.step(&mut rng);
        if (i + 1) % config.thinning != 0 {
            continue;
        }
        let st = &chain.state;
        for (obs, out) in config.observables.iter().zip(series.iter_mut()) {
            out.push(obs.read(st));
        }
        for (&site, out) in config.snapshot_sites.iter().zip(snapshots.iter_mut()) {
            let particle_energies = st
                .particle_position
                .iter()
                .zip(&st.particle_energy)
                .filter(|(&x, _)| x as usize == site)
                .map(|(_, &e)| e)
                .collect();
            out.push(LocalSnapshot {
                site_energy: st.site_energy[site],
                particle_energies,
            });
        }
        let batch = recorded * batches / records;
        batch_counts[batch] += 1;
        let row = &mut batch_sums[batch * n..(batch + 1) * n];
        for v in 0..n {
            let e = st.site_energy[v];
            sum[v] += e;
            sum_sq[v] += e * e;
            row[v] += e;
            occ[v] += st.occupancy[v] as u64;
        }
        recorded += 1;
    }

    let mut batch_means = batch_sums;
    for (b, &count) in batch_counts.iter().enumerate() {
        for x in &mut batch_means[b * n..(b + 1) * n] {
            *x = if count > 0 { *x / count as f64 } else { f64::NAN };
        }
    }
    let profile = (0..n)
        .map(|v| {
            let r = recorded as f64;
            let mean = sum[v] / r;
            let variance = if recorded > 1 {
                (sum_sq[v] - r * mean * mean) / (r - 1.0)
            } else {
                f64::NAN
            };
            let means: Vec<f64> = (0..batches).map(|b| batch_means[b * n + v]).collect();
            SiteStatistics {
                mean,
                variance,
                std_error: crate::stats::standard_error_of_mean(&means),
                mean_occupancy: occ[v] as f64 / r,
            }
        })
        .collect();

    Ok(SteadyStateSample {
        observables: config.observables.clone(),
        series,
        snapshot_sites: config.snapshot_sites.clone(),
        snapshots,
        profile,
        batch_means,
        batches,
        bath_flux: chain.flux,
        records: recorded,
        events: chain.state.event_count,
    })
}
