//! Executes a resolved [`RunConfig`] and writes its CSV table and JSON
//! summary.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{packet_placement, packet_sites, ExperimentKind, Overrides, RunConfig};
use crate::dual::{estimate_moment_product, pair_sticking_time_sample, sticking_survival, DualRunConfig, StickingEpisode};
use crate::error::{Error, Result};
use crate::forward::{simulate_ness, simulate_ness_replica, ForwardRunConfig, Observable, SteadyStateSample};
use crate::harmonic::{continuum_solution_1d, hitting_estimate_ssrw, solve_discrete_harmonic_with, HarmonicField};
use crate::lattice::{BoundaryTemperature, LatticeDomain};
use crate::replicas::{map_replica_range, try_map_replicas, with_threads, Execution};
use crate::stats::{
    batched_chi_square, conditional_energy_moments, duality_check, empirical_moments, exponential_moment_distance,
    poisson_count_test, standard_error_of_mean, DualityCheckConfig, EnergyAssignment, PacketCounts,
};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Replicas per round when collecting a target number of sticking episodes.
const EPISODE_CHUNK: usize = 64;

/// Result of `validate`: the config with all defaults filled in, plus
/// warnings about fields the chosen kind ignores.
#[derive(Debug, Clone, Serialize)]
pub struct Validation {
    pub diagnostics: Vec<String>,
    pub resolved: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub summary: Value,
}

/// In-memory experiment output.
#[derive(Debug, Clone)]
pub struct Report {
    pub csv: Vec<u8>,
    pub results: Value,
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    Ok(cfg)
}

pub fn validate(path: &Path, overrides: &Overrides) -> Result<Validation> {
    let (resolved, diagnostics) = load(path, overrides)?.resolve()?;
    Ok(Validation { diagnostics, resolved })
}

pub fn run(path: &Path, overrides: &Overrides) -> Result<RunOutputs> {
    run_config(&load(path, overrides)?)
}

/// Hash of the resolved config without its output location and worker
/// count, neither of which changes results.
pub fn experiment_hash(resolved: &RunConfig) -> String {
    let mut c = resolved.clone();
    c.output = None;
    c.threads = None;
    c.hash()
}

pub fn run_config(cfg: &RunConfig) -> Result<RunOutputs> {
    let (resolved, diagnostics) = cfg.resolve()?;
    let report = with_threads(resolved.threads.unwrap_or(0), || execute(&resolved, Execution::Parallel))?;
    let summary = json!({
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "config_hash": experiment_hash(&resolved),
        "seed": resolved.seed_u64(),
        "kind": resolved.kind.name(),
        "config": resolved,
        "diagnostics": diagnostics,
        "results": report.results,
    });
    let out = resolved.output.as_ref().expect("resolved output");
    let dir = out.dir.clone().expect("resolved dir");
    let prefix = out.prefix.clone().expect("resolved prefix");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv_path = dir.join(format!("{prefix}.csv"));
    let json_path = dir.join(format!("{prefix}.json"));
    write_atomic(&csv_path, &report.csv)?;
    let mut text = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    text.push(b'\n');
    write_atomic(&json_path, &text)?;
    Ok(RunOutputs {
        csv_path,
        json_path,
        summary,
    })
}

/// Writes to a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let ctx = || format!("writing {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx(), e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(ctx(), e))?;
    tmp.persist(path).map_err(|e| Error::io(ctx(), e.error))?;
    Ok(())
}

/// Runs the experiment of an already resolved config.
pub fn execute(r: &RunConfig, execution: Execution) -> Result<Report> {
    let lattice = r.lattice()?;
    let temperature = r.temperature.clone().expect("resolved temperature");
    let ctx = Context {
        r,
        lattice: &lattice,
        temperature: &temperature,
        execution,
    };
    match r.kind {
        ExperimentKind::ForwardNess => ctx.forward_ness(),
        ExperimentKind::EquilibriumCheck => ctx.equilibrium_check(),
        ExperimentKind::PoissonCheck => ctx.poisson_check(),
        ExperimentKind::ConditionalLte => ctx.conditional_lte(),
        ExperimentKind::DualHitting => ctx.dual_hitting(),
        ExperimentKind::Harmonic => ctx.harmonic(),
        ExperimentKind::DualityCheck => ctx.duality(),
        ExperimentKind::StickingTail => ctx.sticking_tail(),
    }
}

struct Context<'a> {
    r: &'a RunConfig,
    lattice: &'a LatticeDomain,
    temperature: &'a BoundaryTemperature,
    execution: Execution,
}

fn coords(p: &[i64]) -> String {
    p.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

fn order_label(o: &[u32]) -> String {
    o.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new<I: IntoIterator<Item = S>, S: AsRef<[u8]>>(header: I) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Table { w }
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        self.w.write_record(fields).expect("in-memory write");
    }

    fn finish(self) -> Vec<u8> {
        self.w.into_inner().expect("in-memory flush")
    }
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

impl Context<'_> {
    fn particles(&self) -> usize {
        self.r.particles.expect("resolved M")
    }

    fn reference(&self) -> Result<HarmonicField> {
        solve_discrete_harmonic_with(
            self.lattice,
            self.temperature,
            self.r.tolerance.expect("resolved tolerance"),
            self.r.max_sweeps.expect("resolved max_sweeps"),
        )
    }

    fn forward_config(&self) -> ForwardRunConfig {
        let s = self.r.sampling.clone().expect("resolved sampling");
        let mut fc = ForwardRunConfig::new(
            self.lattice.clone(),
            self.temperature.clone(),
            self.particles(),
            self.r.seed_u64(),
            s.sample_events.unwrap(),
        );
        fc.burn_in_events = s.burn_in.unwrap();
        fc.thinning = s.thinning.unwrap();
        fc.batches = s.batches.unwrap();
        fc
    }

    fn sites(&self) -> Result<Vec<usize>> {
        self.r
            .sites
            .iter()
            .flatten()
            .map(|x| self.lattice.site_near(x))
            .collect()
    }

    fn site_header(&self) -> Vec<String> {
        (0..self.lattice.dim()).map(|i| format!("v{i}")).collect()
    }

    fn forward_ness(&self) -> Result<Report> {
        let fc = self.forward_config();
        let replicas = self.r.replicas.unwrap();
        let field = self.reference()?;
        let samples: Vec<SteadyStateSample> =
            try_map_replicas(fc.seed, replicas, self.execution, |i, _| simulate_ness_replica(&fc, i as u64))?;
        let n = self.lattice.num_sites();
        let rf = replicas as f64;
        let mut header = self.site_header();
        header.extend(["mean", "std_error", "harmonic", "deviation", "mean_occupancy"].map(String::from));
        let mut table = Table::new(header);
        let (mut max_dev, mut max_z) = (0.0f64, 0.0f64);
        for v in 0..n {
            let mean = samples.iter().map(|s| s.profile[v].mean).sum::<f64>() / rf;
            let se = samples.iter().map(|s| s.profile[v].std_error.powi(2)).sum::<f64>().sqrt() / rf;
            let occ = samples.iter().map(|s| s.profile[v].mean_occupancy).sum::<f64>() / rf;
            let dev = mean - field.values[v];
            max_dev = max_dev.max(dev.abs());
            max_z = max_z.max(dev.abs() / se);
            let mut row: Vec<String> = self.lattice.site(v).iter().map(|c| c.to_string()).collect();
            row.extend([num(mean), num(se), num(field.values[v]), num(dev), num(occ)]);
            table.row(row);
        }
        let flux_in: f64 = samples.iter().flat_map(|s| &s.bath_flux.injected).sum();
        let flux_out: f64 = samples.iter().flat_map(|s| &s.bath_flux.discarded).sum();
        let bath_events: u64 = samples.iter().flat_map(|s| &s.bath_flux.events).sum();
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "replicas": replicas,
                "records_per_replica": samples[0].records,
                "max_abs_deviation": max_dev,
                "max_deviation_in_std_errors": max_z,
                "harmonic_residual": field.residual,
                "bath": { "events": bath_events, "injected": flux_in, "discarded": flux_out },
            }),
        })
    }

    fn equilibrium_check(&self) -> Result<Report> {
        let mut fc = self.forward_config();
        let n = self.lattice.num_sites();
        fc.observables = (0..n)
            .map(|site| Observable::SiteEnergy { site })
            .chain((0..n).map(|site| Observable::ParticleCount { site }))
            .collect();
        let theta = self.lattice.bath_temperatures(self.temperature)?[0];
        let orders = self.r.orders.clone().unwrap();
        let sample = simulate_ness(&fc)?;
        let mut header = self.site_header();
        header.extend(["order", "empirical", "std_error", "reference"].map(String::from));
        let mut table = Table::new(header);
        let mut worst = 0.0f64;
        let mut worst_in_se = 0.0f64;
        for v in 0..n {
            let rows: Vec<[f64; 1]> = sample.series[v].iter().map(|&x| [x]).collect();
            let mut report = empirical_moments(&rows, &orders)?;
            worst = worst.max(exponential_moment_distance(&mut report, theta));
            for e in &report.entries {
                let reference = e.reference.unwrap();
                worst_in_se = worst_in_se.max((e.empirical - reference).abs() / e.std_error);
                let mut row: Vec<String> = self.lattice.site(v).iter().map(|c| c.to_string()).collect();
                row.extend([order_label(&e.order), num(e.empirical), num(e.std_error), num(reference)]);
                table.row(row);
            }
        }
        let counts: Vec<&[f64]> = sample.series[n..].iter().map(Vec::as_slice).collect();
        let expected = vec![self.particles() as f64 / n as f64; n];
        let (stat, df, p) = batched_chi_square(&counts, &expected, sample.batches);
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "theta": theta,
                "records": sample.records,
                "max_relative_deviation": worst,
                "max_deviation_in_std_errors": worst_in_se,
                "occupation": { "statistic": stat, "df": df, "p_value": p },
            }),
        })
    }

    fn poisson_check(&self) -> Result<Report> {
        let mut fc = self.forward_config();
        let sites = self.sites()?;
        fc.observables = sites.iter().map(|&site| Observable::ParticleCount { site }).collect();
        let sample = simulate_ness(&fc)?;
        let series: Vec<(usize, Vec<u32>)> = sites
            .iter()
            .zip(&sample.series)
            .map(|(&v, s)| (v, s.iter().map(|&c| c as u32).collect()))
            .collect();
        let alpha = self.particles() as f64 / self.lattice.num_sites() as f64;
        let cap = self.r.cap.unwrap();
        let report = poisson_count_test(&series, alpha, cap)?;
        let pmf = crate::stats::poisson_pmf(alpha, cap);
        let mut table = Table::new(["site", "count", "empirical", "poisson"]);
        for s in &report.sites {
            let label = coords(self.lattice.site(s.site));
            for (k, q) in pmf.iter().enumerate() {
                let p = s.distribution.get(k).copied().unwrap_or(0.0);
                table.row([label.clone(), k.to_string(), num(p), num(*q)]);
            }
            let tail: f64 = s.distribution.iter().skip(cap + 1).sum();
            table.row([label, format!(">{cap}"), num(tail), num((1.0 - pmf.iter().sum::<f64>()).max(0.0))]);
        }
        let sites_json: Vec<Value> = report
            .sites
            .iter()
            .map(|s| {
                json!({
                    "site": self.lattice.site(s.site),
                    "mean": s.mean,
                    "total_variation": s.total_variation,
                })
            })
            .collect();
        let corr_json: Vec<Value> = report
            .correlations
            .iter()
            .map(|c| {
                json!({
                    "sites": [self.lattice.site(c.sites.0), self.lattice.site(c.sites.1)],
                    "correlation": c.correlation,
                })
            })
            .collect();
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "alpha": alpha,
                "cap": cap,
                "records": sample.records,
                "sites": sites_json,
                "correlations": corr_json,
            }),
        })
    }

    fn conditional_lte(&self) -> Result<Report> {
        let mut fc = self.forward_config();
        let site = self.sites()?[0];
        fc.snapshot_sites = vec![site];
        let k = self.r.k.unwrap();
        let field = self.reference()?;
        let sample = simulate_ness(&fc)?;
        let mut report = conditional_energy_moments(&sample.snapshots[0], k, self.r.orders.as_ref().unwrap())?;
        let theta = field.values[site];
        let worst = exponential_moment_distance(&mut report, theta);
        let mut table = Table::new(["order", "empirical", "std_error", "reference"]);
        for e in &report.entries {
            table.row([order_label(&e.order), num(e.empirical), num(e.std_error), num(e.reference.unwrap())]);
        }
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "site": self.lattice.site(site),
                "K": k,
                "theta": theta,
                "occurrences": report.samples,
                "records": sample.records,
                "max_relative_deviation": worst,
                "moments": report,
            }),
        })
    }

    fn dual_hitting(&self) -> Result<Report> {
        let packets = self.r.packets.as_ref().unwrap();
        let sites = packet_sites(self.lattice, packets)?;
        let mut dc = DualRunConfig::new(
            self.lattice.clone(),
            self.temperature.clone(),
            self.particles(),
            packet_placement(self.lattice, packets)?,
            self.r.seed_u64(),
            self.r.replicas.unwrap(),
        );
        dc.step_cap = self.r.step_cap.unwrap();
        let field = self.reference()?;
        let reference: f64 = sites.iter().map(|&v| field.values[v]).product();
        let est = estimate_moment_product(&dc, self.execution)?;
        let mut header = vec!["replica".to_string()];
        header.extend((0..sites.len()).map(|i| format!("packet{i}_bath")));
        header.push("product".into());
        let mut table = Table::new(header);
        for (i, (hits, prod)) in est.hits.iter().zip(&est.products).enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(hits.iter().map(|&b| coords(self.lattice.bath_point(b))));
            row.push(num(*prod));
            table.row(row);
        }
        let marginals: Vec<Value> = est
            .marginals
            .iter()
            .map(|m| {
                let pts: Vec<Value> = m
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(b, &p)| json!({ "bath": self.lattice.bath_point(b), "probability": p }))
                    .collect();
                Value::Array(pts)
            })
            .collect();
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "packet_sites": sites.iter().map(|&v| self.lattice.site(v)).collect::<Vec<_>>(),
                "replicas": est.replicas,
                "estimate": est.estimate,
                "std_error": est.std_error,
                "harmonic_product": reference,
                "marginals": marginals,
            }),
        })
    }

    fn harmonic(&self) -> Result<Report> {
        let field = self.reference()?;
        let continuum = match (self.temperature, self.lattice.dim()) {
            (BoundaryTemperature::Endpoints { left, right }, 1) => Some((*left, *right)),
            _ => None,
        };
        let mut header = self.site_header();
        header.push("u".into());
        if continuum.is_some() {
            header.push("continuum".into());
        }
        let mut table = Table::new(header);
        for (v, u) in field.values.iter().enumerate() {
            let p = self.lattice.site(v);
            let mut row: Vec<String> = p.iter().map(|c| c.to_string()).collect();
            row.push(num(*u));
            if let Some((t0, t1)) = continuum {
                let x = p[0] as f64 / self.lattice.scale();
                row.push(num(continuum_solution_1d(t0, t1, x)));
            }
            table.row(row);
        }
        let walks = self.r.walk_replicas.unwrap();
        let mut checks = Vec::new();
        if walks >= 2 {
            for v in self.sites()? {
                let (est, se) = hitting_estimate_ssrw(
                    self.lattice,
                    self.temperature,
                    v,
                    walks,
                    self.r.seed_u64() ^ v as u64,
                    self.execution,
                )?;
                checks.push(json!({
                    "site": self.lattice.site(v),
                    "solver": field.values[v],
                    "walk_estimate": est,
                    "walk_std_error": se,
                }));
            }
        }
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "iterations": field.iterations,
                "residual": field.residual,
                "walk_checks": checks,
            }),
        })
    }

    fn duality(&self) -> Result<Report> {
        let lat = self.lattice;
        let m = self.particles();
        let mut packets = PacketCounts::empty(lat, m);
        for v in packet_sites(lat, self.r.packets.as_ref().unwrap())? {
            packets.site[v] += 1;
        }
        let e = self.r.energy.unwrap();
        let cfg = DualityCheckConfig {
            lattice: lat.clone(),
            temperature: self.temperature.clone(),
            particles: m,
            packets,
            energies: EnergyAssignment {
                site: vec![e; lat.num_sites()],
                particle: vec![e; m],
            },
            t_events: self.r.t_events.unwrap(),
            replicas: self.r.replicas.unwrap(),
            seed: self.r.seed_u64(),
        };
        let check = duality_check(&cfg, self.execution)?;
        let mut table = Table::new(["lhs", "rhs", "lhs_std_error", "rhs_std_error", "combined_std_error"]);
        table.row([
            num(check.lhs),
            num(check.rhs),
            num(check.lhs_std_error),
            num(check.rhs_std_error),
            num(check.combined_std_error),
        ]);
        let z = if check.combined_std_error > 0.0 {
            (check.lhs - check.rhs).abs() / check.combined_std_error
        } else {
            0.0
        };
        Ok(Report {
            csv: table.finish(),
            results: json!({ "check": check, "difference_in_std_errors": z }),
        })
    }

    fn sticking_tail(&self) -> Result<Report> {
        let placement = packet_placement(self.lattice, self.r.packets.as_ref().unwrap())?;
        let placement = [placement[0], placement[1]];
        let target = self.r.episodes.unwrap();
        let k_max = self.r.k_max.unwrap();
        let cap = self.r.step_cap.unwrap();
        let m = self.particles();
        let mut episodes: Vec<StickingEpisode> = Vec::new();
        let mut replicas = 0;
        while episodes.len() < target {
            let chunk = map_replica_range(self.r.seed_u64(), replicas..replicas + EPISODE_CHUNK, self.execution, |_, rng| {
                pair_sticking_time_sample(self.lattice, m, placement, cap, rng)
            });
            replicas += EPISODE_CHUNK;
            for c in chunk {
                episodes.extend(c?);
            }
        }
        let survival = sticking_survival(&episodes, k_max);
        let mut table = Table::new(["k", "survival", "std_error", "bound"]);
        let mut worst_excess = f64::NEG_INFINITY;
        for &(k, p, se, bound) in &survival {
            worst_excess = worst_excess.max(p - bound - 3.0 * se);
            table.row([k.to_string(), num(p), num(se), num(bound)]);
        }
        let together = episodes.iter().filter(|e| **e == StickingEpisode::AbsorbedTogether).count();
        let lengths: Vec<f64> = episodes
            .iter()
            .filter_map(|e| match e {
                StickingEpisode::Separated(k) => Some(*k as f64),
                StickingEpisode::AbsorbedTogether => None,
            })
            .collect();
        Ok(Report {
            csv: table.finish(),
            results: json!({
                "episodes": episodes.len(),
                "replicas": replicas,
                "absorbed_together": together,
                "mean_separation_time": lengths.iter().sum::<f64>() / lengths.len().max(1) as f64,
                "mean_separation_time_std_error": standard_error_of_mean(&lengths),
                "max_excess_over_bound": worst_excess,
            }),
        })
    }
}

/// Machine-readable error payload for stderr.
pub fn error_payload(err: &Error) -> Value {
    json!({ "error": { "kind": err.kind(), "message": err.to_string() } })
}
