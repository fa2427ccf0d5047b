//! TOML run configuration: schema, cross-field validation and defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dual::{mesoscopic_sites, PacketLocation, DEFAULT_STEP_CAP};
use crate::error::{Error, Result};
use crate::forward::{default_burn_in, DEFAULT_BATCHES};
use crate::harmonic::{DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE};
use crate::lattice::{BoundaryTemperature, DomainSpec, LatticeDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ForwardNess,
    DualHitting,
    Harmonic,
    DualityCheck,
    EquilibriumCheck,
    PoissonCheck,
    ConditionalLte,
    StickingTail,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ForwardNess => "forward-ness",
            ExperimentKind::DualHitting => "dual-hitting",
            ExperimentKind::Harmonic => "harmonic",
            ExperimentKind::DualityCheck => "duality-check",
            ExperimentKind::EquilibriumCheck => "equilibrium-check",
            ExperimentKind::PoissonCheck => "poisson-check",
            ExperimentKind::ConditionalLte => "conditional-lte",
            ExperimentKind::StickingTail => "sticking-tail",
        }
    }

    fn runs_forward(self) -> bool {
        matches!(
            self,
            ExperimentKind::ForwardNess
                | ExperimentKind::EquilibriumCheck
                | ExperimentKind::PoissonCheck
                | ExperimentKind::ConditionalLte
        )
    }

    fn uses_packets(self) -> bool {
        matches!(
            self,
            ExperimentKind::DualHitting | ExperimentKind::DualityCheck | ExperimentKind::StickingTail
        )
    }

    fn uses_particles(self) -> bool {
        self != ExperimentKind::Harmonic
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub burn_in: Option<u64>,
    pub sample_events: Option<u64>,
    pub thinning: Option<u64>,
    pub batches: Option<usize>,
}

/// Initial packet positions. Packet `i` starts at `⟨at_i · L⟩`, or at
/// `⟨at_i · L + L^theta · offsets_i⟩` when `theta` is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketSpec {
    pub at: Vec<Vec<f64>>,
    pub theta: Option<f64>,
    pub offsets: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub prefix: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub domain: Option<DomainSpec>,
    pub temperature: Option<BoundaryTemperature>,
    #[serde(rename = "L", alias = "scale")]
    pub scale: Option<f64>,
    #[serde(rename = "M", alias = "particles")]
    pub particles: Option<usize>,
    /// Particle density α; `M = round(α·|D_L|)`.
    pub density: Option<f64>,
    /// Opaque 64-bit value; negative numbers are reinterpreted bitwise.
    pub seed: Option<i64>,
    pub replicas: Option<usize>,
    /// Worker threads; 0 uses all available cores.
    pub threads: Option<usize>,
    pub sampling: Option<SamplingSpec>,
    pub packets: Option<PacketSpec>,
    /// Observation points in the continuum domain, mapped to `⟨xL⟩`.
    pub sites: Option<Vec<Vec<f64>>>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub orders: Option<Vec<Vec<u32>>>,
    pub t_events: Option<u64>,
    /// Initial energy of every site and particle in a duality check.
    pub energy: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_sweeps: Option<usize>,
    /// Truncation of count distributions; mass above it forms a tail bin.
    pub cap: Option<usize>,
    pub episodes: Option<usize>,
    pub k_max: Option<u64>,
    pub step_cap: Option<u64>,
    /// Random-walk replicas cross-checking the harmonic solver at `sites`.
    pub walk_replicas: Option<usize>,
    pub output: Option<OutputSpec>,
}

fn missing(field: &str, kind: ExperimentKind) -> Error {
    Error::ConfigInvalid(format!("missing field `{field}` required by kind `{}`", kind.name()))
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = Some(seed as i64);
        }
        if let Some(r) = o.replicas {
            self.replicas = Some(r);
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(dir) = &o.out_dir {
            self.output.get_or_insert_with(OutputSpec::default).dir = Some(dir.clone());
        }
    }

    pub fn seed_u64(&self) -> u64 {
        self.seed.unwrap_or(0) as u64
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lattice(&self) -> Result<LatticeDomain> {
        let domain = self.domain.clone().unwrap_or_else(DomainSpec::unit_interval);
        let scale = self.scale.ok_or_else(|| missing("L", self.kind))?;
        LatticeDomain::build(&domain, scale)
    }

    /// Checks every field the kind needs and fills in all defaults.
    /// Returns the resolved config and diagnostics about ignored fields.
    pub fn resolve(&self) -> Result<(RunConfig, Vec<String>)> {
        let kind = self.kind;
        let mut r = self.clone();
        let mut diagnostics = Vec::new();
        let mut ignored = |field: &str, present: bool| {
            if present {
                diagnostics.push(format!("field `{field}` is ignored by kind `{}`", kind.name()));
            }
        };

        let scale = self.scale.ok_or_else(|| missing("L", kind))?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("`L` must be positive, got {scale}")));
        }
        r.domain = Some(self.domain.clone().unwrap_or_else(DomainSpec::unit_interval));
        let lattice = r.lattice()?;
        let temperature = self.temperature.clone().ok_or_else(|| missing("temperature", kind))?;
        temperature.validate(lattice.spec())?;
        r.seed = Some(self.seed.unwrap_or(0));
        r.threads = Some(self.threads.unwrap_or(0));

        // Particles
        if kind.uses_particles() {
            let m = match (self.particles, self.density) {
                (Some(_), Some(_)) => return Err(invalid("give either `M` or `density`, not both")),
                (Some(m), None) => m,
                (None, Some(a)) => {
                    if a.is_nan() || a <= 0.0 {
                        return Err(invalid(format!("`density` must be positive, got {a}")));
                    }
                    (a * lattice.num_sites() as f64).round() as usize
                }
                (None, None) => return Err(missing("M", kind)),
            };
            if m == 0 {
                return Err(invalid("`M` must be positive"));
            }
            r.particles = Some(m);
            r.density = None;
        } else {
            ignored("M", self.particles.is_some());
            ignored("density", self.density.is_some());
            r.particles = None;
            r.density = None;
        }

        // Replicas
        let default_replicas = match kind {
            ExperimentKind::DualHitting => 1000,
            ExperimentKind::DualityCheck => 10_000,
            _ => 1,
        };
        let replicas = self.replicas.unwrap_or(default_replicas);
        if replicas == 0 {
            return Err(invalid("`replicas` must be positive"));
        }
        match kind {
            ExperimentKind::DualHitting | ExperimentKind::DualityCheck if replicas < 2 => {
                return Err(invalid("`replicas` must be at least 2 for a standard error"))
            }
            ExperimentKind::EquilibriumCheck | ExperimentKind::PoissonCheck | ExperimentKind::ConditionalLte
                if replicas != 1 =>
            {
                return Err(invalid(format!(
                    "kind `{}` analyses a single long chain; `replicas` must be 1",
                    kind.name()
                )))
            }
            _ => {}
        }
        r.replicas = Some(replicas);

        // Forward sampling
        if kind.runs_forward() {
            let s = self.sampling.clone().unwrap_or_default();
            let m = r.particles.unwrap();
            let sample_events = s.sample_events.ok_or_else(|| missing("sampling.sample_events", kind))?;
            let thinning = s.thinning.unwrap_or(m as u64);
            if thinning == 0 {
                return Err(invalid("`sampling.thinning` must be at least 1"));
            }
            let batches = s.batches.unwrap_or(DEFAULT_BATCHES);
            if batches < 2 {
                return Err(invalid("`sampling.batches` must be at least 2"));
            }
            if sample_events / thinning < batches as u64 {
                return Err(invalid(format!(
                    "sampling window yields {} records, fewer than {batches} batches",
                    sample_events / thinning
                )));
            }
            r.sampling = Some(SamplingSpec {
                burn_in: Some(s.burn_in.unwrap_or_else(|| default_burn_in(lattice.num_sites(), m))),
                sample_events: Some(sample_events),
                thinning: Some(thinning),
                batches: Some(batches),
            });
        } else {
            ignored("sampling", self.sampling.is_some());
            r.sampling = None;
        }

        // Packets
        if kind.uses_packets() {
            let p = self.packets.clone().ok_or_else(|| missing("packets", kind))?;
            if p.at.is_empty() {
                return Err(invalid("`packets.at` lists no packets"));
            }
            if kind == ExperimentKind::StickingTail && p.at.len() != 2 {
                return Err(invalid("kind `sticking-tail` follows exactly two packets"));
            }
            packet_sites(&lattice, &p)?;
        } else {
            ignored("packets", self.packets.is_some());
            r.packets = None;
        }
        if kind.uses_packets() {
            r.step_cap = Some(self.step_cap.unwrap_or(DEFAULT_STEP_CAP));
        } else {
            ignored("step_cap", self.step_cap.is_some());
        }

        // Observation points
        match kind {
            ExperimentKind::PoissonCheck | ExperimentKind::ConditionalLte | ExperimentKind::Harmonic => {
                let sites = match (kind, &self.sites) {
                    (ExperimentKind::Harmonic, None) => Vec::new(),
                    (_, None) => return Err(missing("sites", kind)),
                    (_, Some(s)) => s.clone(),
                };
                if kind == ExperimentKind::ConditionalLte && sites.len() != 1 {
                    return Err(invalid("kind `conditional-lte` observes exactly one site"));
                }
                if kind == ExperimentKind::PoissonCheck && sites.is_empty() {
                    return Err(invalid("`sites` lists no points"));
                }
                for x in &sites {
                    lattice.site_near(x)?;
                }
                r.sites = Some(sites);
            }
            _ => {
                ignored("sites", self.sites.is_some());
                r.sites = None;
            }
        }

        // Kind-specific scalars
        match kind {
            ExperimentKind::ConditionalLte => {
                let k = self.k.ok_or_else(|| missing("K", kind))?;
                let orders = self.orders.clone().unwrap_or_else(|| {
                    if k < 3 {
                        crate::stats::orders_up_to(k + 1, 3)
                    } else {
                        vec![vec![1; k + 1]]
                    }
                });
                if orders.iter().any(|o| o.len() != k + 1) {
                    return Err(invalid(format!("each entry of `orders` needs K + 1 = {} exponents", k + 1)));
                }
                r.orders = Some(orders);
            }
            ExperimentKind::EquilibriumCheck => {
                if temperature.is_constant().is_none() {
                    return Err(invalid("kind `equilibrium-check` needs a constant temperature"));
                }
                let orders = self.orders.clone().unwrap_or_else(|| vec![vec![1], vec![2], vec![3]]);
                if orders.is_empty() || orders.iter().any(|o| o.len() != 1) {
                    return Err(invalid("`orders` for single-site moments have one exponent each"));
                }
                r.orders = Some(orders);
                ignored("K", self.k.is_some());
            }
            _ => {
                ignored("K", self.k.is_some());
                ignored("orders", self.orders.is_some());
            }
        }
        if kind == ExperimentKind::DualityCheck {
            let t = self.t_events.ok_or_else(|| missing("t_events", kind))?;
            r.t_events = Some(t);
            let e = self.energy.unwrap_or(1.0);
            if !(e >= 0.0 && e.is_finite()) {
                return Err(invalid(format!("`energy` must be nonnegative, got {e}")));
            }
            r.energy = Some(e);
        } else {
            ignored("t_events", self.t_events.is_some());
            ignored("energy", self.energy.is_some());
        }
        let needs_reference = !matches!(kind, ExperimentKind::DualityCheck | ExperimentKind::StickingTail);
        if needs_reference {
            let tol = self.tolerance.unwrap_or(DEFAULT_TOLERANCE);
            if tol.is_nan() || tol <= 0.0 {
                return Err(invalid("`tolerance` must be positive"));
            }
            r.tolerance = Some(tol);
            r.max_sweeps = Some(self.max_sweeps.unwrap_or(DEFAULT_MAX_SWEEPS));
        }
        if kind == ExperimentKind::PoissonCheck {
            r.cap = Some(self.cap.unwrap_or(12));
        } else {
            ignored("cap", self.cap.is_some());
        }
        if kind == ExperimentKind::StickingTail {
            let episodes = self.episodes.unwrap_or(10_000);
            if episodes == 0 {
                return Err(invalid("`episodes` must be positive"));
            }
            r.episodes = Some(episodes);
            r.k_max = Some(self.k_max.unwrap_or(10));
        } else {
            ignored("episodes", self.episodes.is_some());
            ignored("k_max", self.k_max.is_some());
        }
        if kind == ExperimentKind::Harmonic {
            r.walk_replicas = Some(self.walk_replicas.unwrap_or(0));
        } else {
            ignored("walk_replicas", self.walk_replicas.is_some());
        }

        let out = self.output.clone().unwrap_or_default();
        r.output = Some(OutputSpec {
            dir: Some(out.dir.unwrap_or_else(|| PathBuf::from("."))),
            prefix: Some(out.prefix.unwrap_or_else(|| kind.name().to_string())),
        });
        Ok((r, diagnostics))
    }
}

/// Lattice sites of the configured packets.
pub fn packet_sites(lattice: &LatticeDomain, p: &PacketSpec) -> Result<Vec<usize>> {
    match p.theta {
        None => {
            if p.offsets.is_some() {
                return Err(invalid("`packets.offsets` needs `packets.theta`"));
            }
            p.at.iter().map(|x| lattice.site_near(x)).collect()
        }
        Some(theta) => {
            let offsets = p
                .offsets
                .clone()
                .unwrap_or_else(|| vec![vec![0.0; lattice.dim()]; p.at.len()]);
            if offsets.len() != p.at.len() {
                return Err(invalid("`packets.offsets` needs one entry per packet"));
            }
            p.at
                .iter()
                .zip(offsets)
                .map(|(x, off)| mesoscopic_sites(lattice, x, theta, &[off]).map(|v| v[0]))
                .collect()
        }
    }
}

pub fn packet_placement(lattice: &LatticeDomain, p: &PacketSpec) -> Result<Vec<PacketLocation>> {
    Ok(packet_sites(lattice, p)?
        .into_iter()
        .map(|v| PacketLocation::Site(v as u32))
        .collect())
}
