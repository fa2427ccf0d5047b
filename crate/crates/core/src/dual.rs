//! Packet chain dual to the forward process.
//!
//! Named packets sit on sites, ride on particles, or rest permanently at
//! bath points. Each event picks a particle uniformly and one of its `2d`
//! neighbors uniformly:
//!
//! * interior neighbor `w`: the particle moves to `w`, pools its packets
//!   with those left at `w`, and carries a uniform-size random subset of
//!   the pool onward;
//! * bath neighbor: every carried packet is dropped at that bath point, the
//!   particle stays, and it redraws its cargo from the packets at its own
//!   site.
//!
//! The order of the two halves of each move is the time-reversal of the
//! forward exchange, which is what makes the packet counts dual to the
//! energies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{nearest_lattice_point, BoundaryTemperature, LatticeDomain, Neighbor};
use crate::replicas::{try_map_replicas, Execution};
use crate::stats::standard_error_of_mean;

pub const DEFAULT_STEP_CAP: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "at", content = "index", rename_all = "snake_case")]
pub enum PacketLocation {
    Site(u32),
    Bath(u32),
    Carried(u32),
}

/// Splits a pool of `n` packets: a uniform count `q ∈ {0..n}` stays, chosen
/// as a uniform subset, and the rest is carried. Returns `(stay, carry)`
/// as two views of the reordered pool.
///
/// Any particular carried subset of size `l` has probability
/// `l!(n-l)!/(n+1)!`.
pub fn split_packets<'a, P, R>(pooled: &'a mut [P], rng: &mut R) -> (&'a [P], &'a [P])
where
    R: Rng + ?Sized,
{
    let n = pooled.len();
    if n == 0 {
        return (&[], &[]);
    }
    let stay = rng.random_range(0..=n);
    // Partial Fisher-Yates: the first `stay` slots become a uniform subset.
    for i in 0..stay.min(n - 1) {
        let j = rng.random_range(i..n);
        pooled.swap(i, j);
    }
    let (a, b) = pooled.split_at(stay);
    (a, b)
}

/// Packet location with "carried by a particle at v" read as "at v".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Projected {
    Site(u32),
    Bath(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketState {
    pub packet_location: Vec<PacketLocation>,
    pub particle_position: Vec<u32>,
    site_packets: Vec<u32>,
    carried: Vec<u32>,
    absorbed: usize,
    pub event_count: u64,
}

impl PacketState {
    pub fn new(
        lattice: &LatticeDomain,
        packet_location: Vec<PacketLocation>,
        particle_position: Vec<u32>,
    ) -> Result<Self> {
        let n = lattice.num_sites();
        let m = particle_position.len();
        if m == 0 {
            return Err(Error::ConfigInvalid("need at least one particle".into()));
        }
        if let Some(&y) = particle_position.iter().find(|&&y| y as usize >= n) {
            return Err(Error::ConfigInvalid(format!("particle position {y} is not a site")));
        }
        let mut site_packets = vec![0u32; n];
        let mut carried = vec![0u32; m];
        let mut absorbed = 0;
        for loc in &packet_location {
            match *loc {
                PacketLocation::Site(v) if (v as usize) < n => site_packets[v as usize] += 1,
                PacketLocation::Bath(b) if (b as usize) < lattice.num_bath() => absorbed += 1,
                PacketLocation::Carried(j) if (j as usize) < m => carried[j as usize] += 1,
                _ => {
                    return Err(Error::ConfigInvalid(format!(
                        "packet location {loc:?} is out of range"
                    )))
                }
            }
        }
        Ok(PacketState {
            packet_location,
            particle_position,
            site_packets,
            carried,
            absorbed,
            event_count: 0,
        })
    }

    pub fn num_packets(&self) -> usize {
        self.packet_location.len()
    }

    pub fn num_absorbed(&self) -> usize {
        self.absorbed
    }

    pub fn all_absorbed(&self) -> bool {
        self.absorbed == self.packet_location.len()
    }

    /// Packets left at site `v` (not counting those carried by particles there).
    pub fn packets_at_site(&self, v: usize) -> u32 {
        self.site_packets[v]
    }

    pub fn packets_carried_by(&self, j: usize) -> u32 {
        self.carried[j]
    }

    pub fn projected(&self, packet: usize) -> Projected {
        match self.packet_location[packet] {
            PacketLocation::Site(v) => Projected::Site(v),
            PacketLocation::Bath(b) => Projected::Bath(b),
            PacketLocation::Carried(j) => Projected::Site(self.particle_position[j as usize]),
        }
    }

    /// Final bath index of every packet, if all are absorbed.
    pub fn absorption_points(&self) -> Option<Vec<usize>> {
        self.packet_location
            .iter()
            .map(|loc| match *loc {
                PacketLocation::Bath(b) => Some(b as usize),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualStep {
    pub particle: usize,
    pub target: Neighbor,
}

/// One replica of the packet chain.
#[derive(Debug, Clone)]
pub struct DualChain<'a> {
    lattice: &'a LatticeDomain,
    pub state: PacketState,
    pool: Vec<u32>,
}

impl<'a> DualChain<'a> {
    pub fn new(lattice: &'a LatticeDomain, state: PacketState) -> Self {
        DualChain {
            lattice,
            state,
            pool: Vec::new(),
        }
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> DualStep {
        let degree = self.lattice.degree();
        let m = self.state.particle_position.len();
        let draw = rng.random_range(0..m * degree);
        let (j, dir) = (draw / degree, draw % degree);
        let y = self.state.particle_position[j] as usize;
        let target = self.lattice.neighbor(y, dir);
        self.state.event_count += 1;
        match target {
            Neighbor::Site(w) => {
                self.state.particle_position[j] = w;
                if self.state.carried[j] + self.state.site_packets[w as usize] > 0 {
                    self.remix(j, w, true, rng);
                }
            }
            Neighbor::Bath(b) => {
                if self.state.carried[j] > 0 {
                    let st = &mut self.state;
                    for loc in st.packet_location.iter_mut() {
                        if *loc == PacketLocation::Carried(j as u32) {
                            *loc = PacketLocation::Bath(b);
                            st.absorbed += 1;
                        }
                    }
                    st.carried[j] = 0;
                }
                if self.state.site_packets[y] > 0 {
                    self.remix(j, y as u32, false, rng);
                }
            }
        }
        DualStep {
            particle: j,
            target,
        }
    }

    /// Pools the packets at `site` (plus the cargo of `j` if `with_cargo`)
    /// and redistributes them between the site and particle `j`.
    fn remix<R: Rng + ?Sized>(&mut self, j: usize, site: u32, with_cargo: bool, rng: &mut R) {
        let st = &mut self.state;
        self.pool.clear();
        for (i, loc) in st.packet_location.iter().enumerate() {
            let pooled = match *loc {
                PacketLocation::Site(v) => v == site,
                PacketLocation::Carried(k) => with_cargo && k as usize == j,
                PacketLocation::Bath(_) => false,
            };
            if pooled {
                self.pool.push(i as u32);
            }
        }
        let (stay, carry) = split_packets(&mut self.pool, rng);
        for &i in stay {
            st.packet_location[i as usize] = PacketLocation::Site(site);
        }
        for &i in carry {
            st.packet_location[i as usize] = PacketLocation::Carried(j as u32);
        }
        st.site_packets[site as usize] = stay.len() as u32;
        st.carried[j] = carry.len() as u32;
    }

    pub fn run<R: Rng + ?Sized>(&mut self, events: u64, rng: &mut R) {
        for _ in 0..events {
            self.step(rng);
        }
    }

    /// Steps until every packet rests at a bath point.
    pub fn run_to_absorption<R: Rng + ?Sized>(&mut self, cap: u64, rng: &mut R) -> Result<Vec<usize>> {
        let start = self.state.event_count;
        while !self.state.all_absorbed() {
            if self.state.event_count - start >= cap {
                return Err(Error::StepLimitExceeded { cap });
            }
            self.step(rng);
        }
        Ok(self.state.absorption_points().expect("all packets absorbed"))
    }
}

/// Initial law of the particle positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParticleInit {
    /// Uniform over all `M`-tuples of sites.
    Uniform,
    /// Uniform over configurations in which exactly the particles in
    /// `particles` occupy `site`.
    Conditioned { site: usize, particles: Vec<usize> },
}

impl ParticleInit {
    pub fn sample<R: Rng + ?Sized>(&self, sites: usize, particles: usize, rng: &mut R) -> Result<Vec<u32>> {
        match self {
            ParticleInit::Uniform => Ok((0..particles).map(|_| rng.random_range(0..sites) as u32).collect()),
            ParticleInit::Conditioned { site, particles: chosen } => {
                if *site >= sites || chosen.iter().any(|&j| j >= particles) {
                    return Err(Error::ConfigInvalid("conditioning event is out of range".into()));
                }
                if sites == 1 && chosen.len() < particles {
                    return Err(Error::ConfigInvalid("conditioning event is empty".into()));
                }
                let mut pos = vec![0u32; particles];
                for (j, p) in pos.iter_mut().enumerate() {
                    *p = if chosen.contains(&j) {
                        *site as u32
                    } else {
                        // Uniform over the other sites.
                        let r = rng.random_range(0..sites - 1);
                        (if r >= *site { r + 1 } else { r }) as u32
                    };
                }
                Ok(pos)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualRunConfig {
    pub lattice: LatticeDomain,
    pub temperature: BoundaryTemperature,
    pub particles: usize,
    /// Initial location of each packet; `N` is its length.
    pub placement: Vec<PacketLocation>,
    pub particle_init: ParticleInit,
    pub seed: u64,
    pub replicas: usize,
    pub step_cap: u64,
}

impl DualRunConfig {
    pub fn new(
        lattice: LatticeDomain,
        temperature: BoundaryTemperature,
        particles: usize,
        placement: Vec<PacketLocation>,
        seed: u64,
        replicas: usize,
    ) -> Self {
        DualRunConfig {
            lattice,
            temperature,
            particles,
            placement,
            particle_init: ParticleInit::Uniform,
            seed,
            replicas,
            step_cap: DEFAULT_STEP_CAP,
        }
    }

    /// Fresh initial state: configured packets, particles drawn from
    /// `particle_init`.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PacketState> {
        let positions = self
            .particle_init
            .sample(self.lattice.num_sites(), self.particles, rng)?;
        PacketState::new(&self.lattice, self.placement.clone(), positions)
    }
}

/// Packets placed at `⟨xL + L^θ v⟩` for every offset `v`.
pub fn mesoscopic_sites(
    lattice: &LatticeDomain,
    x: &[f64],
    theta: f64,
    offsets: &[Vec<f64>],
) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "mesoscopic exponent theta must lie in (0, 1), got {theta}"
        )));
    }
    let scale = lattice.scale();
    let spread = scale.powf(theta);
    offsets
        .iter()
        .map(|v| {
            if v.len() != lattice.dim() || x.len() != lattice.dim() {
                return Err(Error::ConfigInvalid("offset dimension mismatch".into()));
            }
            let p: Vec<f64> = x.iter().zip(v).map(|(x, v)| x * scale + spread * v).collect();
            let q = nearest_lattice_point(&p);
            lattice.site_index(&q).ok_or(Error::NotASite { point: q })
        })
        .collect()
}

/// Absorption points of one replica.
pub fn run_to_absorption<R: Rng + ?Sized>(config: &DualRunConfig, rng: &mut R) -> Result<Vec<usize>> {
    let state = config.initial_state(rng)?;
    DualChain::new(&config.lattice, state).run_to_absorption(config.step_cap, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProductEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub replicas: usize,
    /// Absorption bath index of every packet, per replica.
    pub hits: Vec<Vec<usize>>,
    /// Per replica `∏ T(Z_i/L)`.
    pub products: Vec<f64>,
    /// `marginals[i][b]`: fraction of replicas in which packet `i` ended at bath `b`.
    pub marginals: Vec<Vec<f64>>,
}

/// Monte Carlo estimate of `E ∏_i T(Z_{i,∞}/L)`.
pub fn estimate_moment_product(config: &DualRunConfig, execution: Execution) -> Result<MomentProductEstimate> {
    if config.replicas < 2 {
        return Err(Error::ConfigInvalid("need at least 2 replicas".into()));
    }
    let temps = config.lattice.bath_temperatures(&config.temperature)?;
    let hits = try_map_replicas(config.seed, config.replicas, execution, |_, rng| {
        run_to_absorption(config, rng)
    })?;
    let products: Vec<f64> = hits
        .iter()
        .map(|h| h.iter().map(|&b| temps[b]).product())
        .collect();
    let estimate = products.iter().sum::<f64>() / products.len() as f64;
    let std_error = standard_error_of_mean(&products);
    let nb = config.lattice.num_bath();
    let mut marginals = vec![vec![0.0; nb]; config.placement.len()];
    for h in &hits {
        for (i, &b) in h.iter().enumerate() {
            marginals[i][b] += 1.0;
        }
    }
    for row in &mut marginals {
        for x in row.iter_mut() {
            *x /= hits.len() as f64;
        }
    }
    Ok(MomentProductEstimate {
        estimate,
        std_error,
        replicas: hits.len(),
        hits,
        products,
        marginals,
    })
}

/// How a coincidence of the two packets ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StickingEpisode {
    /// Separated after this many collapsed steps.
    Separated(u64),
    /// Dropped at the same bath point while still together.
    AbsorbedTogether,
}

impl StickingEpisode {
    pub fn exceeds(&self, k: u64) -> bool {
        match *self {
            StickingEpisode::Separated(kappa) => kappa > k,
            StickingEpisode::AbsorbedTogether => true,
        }
    }
}

/// Follows a packet pair to absorption in collapsed time (only steps in
/// which some projected packet position changes count) and records, for
/// every coincidence away from the bath, how many collapsed steps the pair
/// needed to separate.
pub fn pair_sticking_time_sample<R: Rng + ?Sized>(
    lattice: &LatticeDomain,
    particles: usize,
    placement: [PacketLocation; 2],
    cap: u64,
    rng: &mut R,
) -> Result<Vec<StickingEpisode>> {
    let positions = ParticleInit::Uniform.sample(lattice.num_sites(), particles, rng)?;
    let state = PacketState::new(lattice, placement.to_vec(), positions)?;
    let mut chain = DualChain::new(lattice, state);
    let mut episodes = Vec::new();
    let mut current: Option<u64> = None;
    let mut prev = (chain.state.projected(0), chain.state.projected(1));
    if prev.0 == prev.1 && matches!(prev.0, Projected::Site(_)) {
        current = Some(0);
    }
    let mut events = 0u64;
    while !chain.state.all_absorbed() {
        if events >= cap {
            return Err(Error::StepLimitExceeded { cap });
        }
        chain.step(rng);
        events += 1;
        let now = (chain.state.projected(0), chain.state.projected(1));
        if now == prev {
            continue;
        }
        prev = now;
        let together = now.0 == now.1;
        match current {
            Some(kappa) => {
                let kappa = kappa + 1;
                if !together {
                    episodes.push(StickingEpisode::Separated(kappa));
                    current = None;
                } else if matches!(now.0, Projected::Bath(_)) {
                    episodes.push(StickingEpisode::AbsorbedTogether);
                    current = None;
                } else {
                    current = Some(kappa);
                }
            }
            None => {
                if together && matches!(now.0, Projected::Site(_)) {
                    current = Some(0);
                }
            }
        }
    }
    Ok(episodes)
}

/// `(k, P̂(κ > k), binomial standard error, (2/3)^((k-1)/2))` for `k = 1..=k_max`.
pub fn sticking_survival(episodes: &[StickingEpisode], k_max: u64) -> Vec<(u64, f64, f64, f64)> {
    let n = episodes.len() as f64;
    (1..=k_max)
        .map(|k| {
            let p = episodes.iter().filter(|e| e.exceeds(k)).count() as f64 / n;
            let se = (p * (1.0 - p) / n).sqrt();
            let bound = (2.0f64 / 3.0).powf((k as f64 - 1.0) / 2.0);
            (k, p, se, bound)
        })
        .collect()
}
