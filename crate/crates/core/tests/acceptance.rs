//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `cargo test --test acceptance` runs everything; append criterion ids
//! (`cargo test --test acceptance -- 2 6 1b`) to run a subset.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use nesslab::dual::{
    estimate_moment_product, pair_sticking_time_sample, split_packets, sticking_survival, DualChain, DualRunConfig,
    PacketLocation, PacketState, ParticleInit, StickingEpisode,
};
use nesslab::forward::{interior_exchange, simulate_ness, ForwardRunConfig, Observable, SteadyStateSample};
use nesslab::harmonic::{solve_discrete_harmonic, HarmonicField};
use nesslab::lattice::{BoundaryTemperature, DomainSpec, LatticeDomain};
use nesslab::replicas::{map_replica_range, replica_rng, Execution};
use nesslab::stats::{
    batched_chi_square, chi_square_test, conditional_energy_moments, duality_check, empirical_moments,
    exponential_moment_distance, jackknife_se, poisson_count_test, DualityCheckConfig, EnergyAssignment, PacketCounts,
};
use rand::Rng;

const CHI_SQUARE_LEVEL: f64 = 1e-3;
const SOLVER_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("1a", "bitwise energy conservation", c1a_exchange_conservation),
    ("1b", "packet split law", c1b_split_law),
    ("1c", "duality at time zero", c1c_duality_time_zero),
    ("1d", "packet conservation", c1d_packet_conservation),
    ("2", "equilibrium moments", c2_equilibrium),
    ("3", "1d steady profile", c3_profile_1d),
    ("4", "2d steady profile", c4_profile_2d),
    ("5", "local equilibrium moments", c5_local_moments),
    ("6", "1d hitting product", c6_hitting_1d),
    ("7", "2d hitting product", c7_hitting_2d),
    ("8", "mesoscopic hitting product", c8_mesoscopic),
    ("9", "duality identity", c9_duality),
    ("10", "Poisson particle counts", c10_poisson_counts),
    ("11", "conditional local moments", c11_conditional),
    ("12", "sticking-time tail", c12_sticking_tail),
    ("13", "embedding invariance", c13_embedding),
];

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for &(id, name, run) in CRITERIA {
        let group = id.trim_end_matches(char::is_alphabetic);
        if !selected.is_empty() && !selected.iter().any(|s| s == id || s == group) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        println!(
            "acceptance {id:>3} {name:<28} {} {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn interval(scale: f64) -> LatticeDomain {
    LatticeDomain::build(&DomainSpec::unit_interval(), scale).unwrap()
}

fn square(scale: f64) -> LatticeDomain {
    LatticeDomain::build(&DomainSpec::unit_cube(2), scale).unwrap()
}

fn x_gradient() -> BoundaryTemperature {
    BoundaryTemperature::Affine {
        offset: 1.0,
        gradient: vec![1.0, 0.0],
    }
}

fn harmonic(lattice: &LatticeDomain, temp: &BoundaryTemperature) -> HarmonicField {
    solve_discrete_harmonic(lattice, temp, SOLVER_TOL).unwrap()
}

// 1a. Shares of an interior exchange sum bitwise to the pooled energy.
fn c1a_exchange_conservation() -> Outcome {
    let mut rng = replica_rng(101, 0);
    let mut bad = 0usize;
    for _ in 0..1_000_000 {
        // Magnitudes spread over many binades.
        let site = rng.random::<f64>() * 10f64.powi(rng.random_range(-8..8));
        let particle = rng.random::<f64>() * 10f64.powi(rng.random_range(-8..8));
        let p = rng.random::<f64>();
        let (s, q) = interior_exchange(site, particle, p);
        if s + q != site + particle || s < 0.0 || q < 0.0 {
            bad += 1;
        }
    }
    Outcome::new(bad == 0, format!("{bad} of 1000000 exchanges off"))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

// 1b. Carried subsets of n pooled packets follow l!(n-l)!/(n+1)!.
fn c1b_split_law() -> Outcome {
    let mut rng = replica_rng(102, 0);
    let draws = 1_000_000;
    let mut worst_p: f64 = 1.0;
    let mut details = Vec::new();
    for n in 0..=4usize {
        let mut counts = vec![0.0; 1 << n];
        let mut pool: Vec<usize> = (0..n).collect();
        for _ in 0..draws {
            pool.sort_unstable();
            let (_, carry) = split_packets(&mut pool, &mut rng);
            let mask = carry.iter().fold(0usize, |m, &i| m | (1 << i));
            counts[mask] += 1.0;
        }
        if n == 0 {
            let ok = counts[0] == draws as f64;
            worst_p = if ok { worst_p } else { 0.0 };
            details.push("n=0 empty".to_string());
            continue;
        }
        let probs: Vec<f64> = (0..1usize << n)
            .map(|mask| {
                let l = mask.count_ones() as usize;
                factorial(l) * factorial(n - l) / factorial(n + 1)
            })
            .collect();
        let (_, _, p) = chi_square_test(&counts, &probs);
        worst_p = worst_p.min(p);
        details.push(format!("n={n} p={p:.3}"));
    }
    Outcome::new(worst_p > CHI_SQUARE_LEVEL, details.join(" "))
}

// 1c. With no evolution both sides of the duality identity coincide.
fn c1c_duality_time_zero() -> Outcome {
    let mut rng = replica_rng(103, 0);
    let mut unequal = 0;
    for case in 0..100u64 {
        let lattice = if rng.random::<bool>() {
            interval(rng.random_range(3..9) as f64)
        } else {
            square(rng.random_range(3..5) as f64)
        };
        let m = rng.random_range(1..=3usize);
        let mut packets = PacketCounts::empty(&lattice, m);
        packets.site.iter_mut().for_each(|n| *n = rng.random_range(0..3));
        packets.carried.iter_mut().for_each(|n| *n = rng.random_range(0..2));
        packets.bath.iter_mut().for_each(|n| *n = rng.random_range(0..2));
        let energies = EnergyAssignment {
            site: (0..lattice.num_sites()).map(|_| 3.0 * rng.random::<f64>()).collect(),
            particle: (0..m).map(|_| 3.0 * rng.random::<f64>()).collect(),
        };
        let cfg = DualityCheckConfig {
            temperature: BoundaryTemperature::function(|x| 1.0 + x.iter().sum::<f64>()),
            lattice,
            particles: m,
            packets,
            energies,
            t_events: 0,
            replicas: 4,
            seed: case,
        };
        let check = duality_check(&cfg, Execution::Parallel).unwrap();
        if check.lhs != check.rhs {
            unequal += 1;
        }
    }
    Outcome::new(unequal == 0, format!("{unequal} of 100 configurations unequal"))
}

// 1d. Packets are neither created nor destroyed and absorbed packets
// never move.
fn c1d_packet_conservation() -> Outcome {
    let lattice = square(30.0);
    let mut rng = replica_rng(104, 0);
    let n_packets = 50;
    let placement: Vec<PacketLocation> = (0..n_packets)
        .map(|_| PacketLocation::Site(rng.random_range(0..lattice.num_sites()) as u32))
        .collect();
    let positions = ParticleInit::Uniform
        .sample(lattice.num_sites(), lattice.num_sites(), &mut rng)
        .unwrap();
    let mut chain = DualChain::new(&lattice, PacketState::new(&lattice, placement, positions).unwrap());
    let mut violations = 0u64;
    let mut absorbed_at: Vec<Option<u32>> = vec![None; n_packets];
    for _ in 0..1_000_000 {
        chain.step(&mut rng);
        let st = &chain.state;
        let counts = PacketCounts::from_state(st, lattice.num_sites(), lattice.num_bath());
        let total: u32 = counts.site.iter().chain(&counts.carried).chain(&counts.bath).sum();
        if st.num_packets() != n_packets || total as usize != n_packets {
            violations += 1;
        }
        for (i, loc) in st.packet_location.iter().enumerate() {
            match (absorbed_at[i], *loc) {
                (Some(b), PacketLocation::Bath(now)) if b != now => violations += 1,
                (Some(_), PacketLocation::Site(_) | PacketLocation::Carried(_)) => violations += 1,
                (None, PacketLocation::Bath(now)) => absorbed_at[i] = Some(now),
                _ => {}
            }
        }
    }
    let absorbed = absorbed_at.iter().filter(|a| a.is_some()).count();
    Outcome::new(
        violations == 0,
        format!("{violations} violations over 1000000 events, {absorbed}/{n_packets} absorbed"),
    )
}

// 2. Constant temperature: site energies are Exp(1), positions uniform.
fn c2_equilibrium() -> Outcome {
    let lattice = interval(30.0);
    let n = lattice.num_sites();
    let mut cfg = ForwardRunConfig::new(lattice, BoundaryTemperature::constant(1.0), 30, 202, 5_000_000);
    cfg.observables = (0..n)
        .map(|site| Observable::SiteEnergy { site })
        .chain((0..n).map(|site| Observable::ParticleCount { site }))
        .collect();
    let sample = simulate_ness(&cfg).unwrap();
    let orders = [vec![1], vec![2], vec![3]];
    let mut misses = 0;
    let mut worst = 0.0f64;
    for v in 0..n {
        let rows: Vec<[f64; 1]> = sample.series[v].iter().map(|&x| [x]).collect();
        let mut report = empirical_moments(&rows, &orders).unwrap();
        worst = worst.max(exponential_moment_distance(&mut report, 1.0));
        for e in &report.entries {
            let reference = e.reference.unwrap();
            let tol = (0.05 * reference).max(3.0 * e.std_error);
            if (e.empirical - reference).abs() > tol {
                misses += 1;
            }
        }
    }
    let counts: Vec<&[f64]> = sample.series[n..].iter().map(Vec::as_slice).collect();
    let (stat, df, p) = batched_chi_square(&counts, &vec![30.0 / n as f64; n], sample.batches);
    Outcome::new(
        misses == 0 && p > CHI_SQUARE_LEVEL,
        format!(
            "{misses} site moments out of band, max rel dev {worst:.4}; occupation chi2 {stat:.1} on {df} df p={p:.3}"
        ),
    )
}

struct ProfileCheck {
    misses: usize,
    max_dev: f64,
    max_se: f64,
}

fn profile_check(sample: &SteadyStateSample, field: &HarmonicField, floor: f64) -> ProfileCheck {
    let mut out = ProfileCheck {
        misses: 0,
        max_dev: 0.0,
        max_se: 0.0,
    };
    for (stats, u) in sample.profile.iter().zip(&field.values) {
        let dev = (stats.mean - u).abs();
        out.max_dev = out.max_dev.max(dev);
        out.max_se = out.max_se.max(stats.std_error);
        if dev > floor.max(3.0 * stats.std_error) {
            out.misses += 1;
        }
    }
    out
}

struct Run1d {
    lattice: LatticeDomain,
    field: HarmonicField,
    sample: SteadyStateSample,
    center: usize,
}

// Shared by criteria 3 and 5.
fn run_1d() -> &'static Run1d {
    static RUN: OnceLock<Run1d> = OnceLock::new();
    RUN.get_or_init(|| {
        let lattice = interval(32.0);
        let temp = BoundaryTemperature::endpoints(1.0, 2.0);
        let field = harmonic(&lattice, &temp);
        let center = lattice.site_near(&[0.5]).unwrap();
        let mut cfg = ForwardRunConfig::new(lattice.clone(), temp, 32, 203, 100_000_000);
        cfg.observables = vec![
            Observable::SiteEnergy { site: center },
            Observable::SiteEnergy { site: center + 1 },
        ];
        let sample = simulate_ness(&cfg).unwrap();
        Run1d {
            lattice,
            field,
            sample,
            center,
        }
    })
}

// 3. Mean site energies follow the linear harmonic profile.
fn c3_profile_1d() -> Outcome {
    let run = run_1d();
    let linear = run
        .lattice
        .sites()
        .zip(&run.field.values)
        .all(|(v, u)| (u - (1.0 + v[0] as f64 / 32.0)).abs() < 1e-6);
    let c = profile_check(&run.sample, &run.field, 0.05);
    Outcome::new(
        c.misses == 0 && linear,
        format!(
            "{} sites out of band, max |dev| {:.4}, max se {:.4}, reference linear: {linear}",
            c.misses, c.max_dev, c.max_se
        ),
    )
}

// 4. Same on the unit square with temperature 1 + x.
fn c4_profile_2d() -> Outcome {
    let lattice = square(16.0);
    let temp = x_gradient();
    let field = harmonic(&lattice, &temp);
    let m = lattice.num_sites();
    let cfg = ForwardRunConfig::new(lattice, temp, m, 204, 200_000_000);
    let sample = simulate_ness(&cfg).unwrap();
    let c = profile_check(&sample, &field, 0.07);
    Outcome::new(
        c.misses == 0,
        format!(
            "{} of {m} sites out of band, max |dev| {:.4}, max se {:.4}",
            c.misses, c.max_dev, c.max_se
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// 5. Second moment at the center and the joint first moment of two
// neighbors match products of exponentials with the harmonic means.
fn c5_local_moments() -> Outcome {
    let run = run_1d();
    let here = &run.sample.series[0];
    let next = &run.sample.series[1];
    let u = run.field.values[run.center];
    let u_next = run.field.values[run.center + 1];

    let squares: Vec<f64> = here.iter().map(|x| x * x).collect();
    let second = mean(&squares);
    let second_jk = jackknife_se(&squares, 30, mean);
    let second_ref = 2.0 * u * u;

    let products: Vec<f64> = here.iter().zip(next).map(|(a, b)| a * b).collect();
    let joint = mean(&products);
    let joint_jk = jackknife_se(&products, 30, mean);
    let joint_ref = u * u_next;

    let rel2 = (second - second_ref).abs() / second_ref;
    let rel11 = (joint - joint_ref).abs() / joint_ref;
    Outcome::new(
        rel2 <= 0.10 && rel11 <= 0.10,
        format!(
            "E xi^2 {second:.4} ± {second_jk:.4} vs {second_ref:.4} ({:.1}%), E xi xi' {joint:.4} ± {joint_jk:.4} vs {joint_ref:.4} ({:.1}%)",
            100.0 * rel2,
            100.0 * rel11
        ),
    )
}

/// Probability that packets started at `sites` all end at the right end
/// of the unit interval, from `replicas` independent absorptions.
fn right_end_probability(scale: f64, sites: &[usize], replicas: usize, seed: u64) -> (f64, f64) {
    let lattice = interval(scale);
    let placement = sites.iter().map(|&v| PacketLocation::Site(v as u32)).collect();
    let m = scale as usize;
    let cfg = DualRunConfig::new(
        lattice,
        BoundaryTemperature::endpoints(0.0, 1.0),
        m,
        placement,
        seed,
        replicas,
    );
    let est = estimate_moment_product(&cfg, Execution::Parallel).unwrap();
    (est.estimate, est.std_error)
}

// 6. With T = x on the boundary, the product of hit temperatures is the
// indicator that every packet exits to the right.
fn c6_hitting_1d() -> Outcome {
    let lattice = interval(64.0);
    let mid = lattice.site_near(&[0.5]).unwrap();
    let (rr, rr_se) = right_end_probability(64.0, &[mid, mid], 10_000, 206);
    let (r, r_se) = right_end_probability(64.0, &[mid], 10_000, 1206);
    let pass = (rr - 0.25).abs() <= 0.03 && (r - 0.5).abs() <= 0.02;
    Outcome::new(
        pass,
        format!("P(R,R) {rr:.4} ± {rr_se:.4} (band 0.25 ± 0.03), P(R) {r:.4} ± {r_se:.4} (band 0.5 ± 0.02)"),
    )
}

// 7. Two coinciding packets in the square: the mean product is the square
// of the harmonic value at the start.
fn c7_hitting_2d() -> Outcome {
    let lattice = square(24.0);
    let temp = x_gradient();
    let field = harmonic(&lattice, &temp);
    let center = lattice.site_near(&[0.5, 0.5]).unwrap();
    let reference = field.values[center].powi(2);
    let m = lattice.num_sites();
    let placement = vec![PacketLocation::Site(center as u32); 2];
    let cfg = DualRunConfig::new(lattice, temp, m, placement, 207, 5_000);
    let est = estimate_moment_product(&cfg, Execution::Parallel).unwrap();
    let tol = (0.10 * reference).max(3.0 * est.std_error);
    Outcome::new(
        (est.estimate - reference).abs() <= tol,
        format!("estimate {:.4} ± {:.4} vs u^2 {reference:.4}", est.estimate, est.std_error),
    )
}

// 8. Second packet moved sqrt(L) sites to the right; same band as 6.
fn c8_mesoscopic() -> Outcome {
    let lattice = interval(64.0);
    let mid = lattice.site_near(&[0.5]).unwrap();
    let offset = (64f64.sqrt() + 0.5).floor() as usize;
    let far = mid + offset;
    let (rr, se) = right_end_probability(64.0, &[mid, far], 10_000, 208);
    let x2 = lattice.site(far)[0] as f64 / 64.0;
    Outcome::new(
        (rr - 0.25).abs() <= 0.03,
        format!(
            "P(R,R) {rr:.4} ± {se:.4} (band 0.25 ± 0.03); sites {} and {}, product of start positions {:.4}",
            lattice.site(mid)[0],
            lattice.site(far)[0],
            0.5 * x2
        ),
    )
}

// 9. Forward and dual sides of the finite-time identity agree.
fn c9_duality() -> Outcome {
    let lattice = interval(5.0);
    let mut packets = PacketCounts::empty(&lattice, 2);
    packets.site[lattice.site_near(&[0.5]).unwrap()] = 1;
    let cfg = DualityCheckConfig {
        energies: EnergyAssignment {
            site: vec![1.0; lattice.num_sites()],
            particle: vec![1.0; 2],
        },
        lattice,
        temperature: BoundaryTemperature::endpoints(1.0, 3.0),
        particles: 2,
        packets,
        t_events: 10,
        replicas: 100_000,
        seed: 209,
    };
    let c = duality_check(&cfg, Execution::Parallel).unwrap();
    let z = (c.lhs - c.rhs).abs() / c.combined_std_error;
    Outcome::new(
        z <= 3.0,
        format!(
            "lhs {:.5} ± {:.5}, rhs {:.5} ± {:.5}, |diff| = {z:.2} combined se",
            c.lhs, c.lhs_std_error, c.rhs, c.rhs_std_error
        ),
    )
}

struct DenseRun {
    field: HarmonicField,
    sample: SteadyStateSample,
    center: usize,
    other: usize,
}

// Shared by criteria 10 and 11: L = 40, one particle per site on average.
fn dense_run() -> &'static DenseRun {
    static RUN: OnceLock<DenseRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let lattice = interval(40.0);
        let temp = BoundaryTemperature::endpoints(1.0, 2.0);
        let field = harmonic(&lattice, &temp);
        let center = lattice.site_near(&[0.5]).unwrap();
        let other = center + 5;
        let m = lattice.num_sites();
        let mut cfg = ForwardRunConfig::new(lattice, temp, m, 210, 200_000_000);
        cfg.observables = vec![
            Observable::ParticleCount { site: center },
            Observable::ParticleCount { site: other },
        ];
        cfg.snapshot_sites = vec![center];
        let sample = simulate_ness(&cfg).unwrap();
        DenseRun {
            field,
            sample,
            center,
            other,
        }
    })
}

// 10. Occupation numbers are close to independent Poisson(1).
fn c10_poisson_counts() -> Outcome {
    let run = dense_run();
    let series: Vec<(usize, Vec<u32>)> = [run.center, run.other]
        .iter()
        .zip(&run.sample.series)
        .map(|(&v, s)| (v, s.iter().map(|&c| c as u32).collect()))
        .collect();
    // M = |D_L|
    let report = poisson_count_test(&series, 1.0, 12).unwrap();
    let tv = report.sites[0].total_variation;
    let corr = report.correlations[0].correlation;
    Outcome::new(
        tv <= 0.05 && corr.abs() <= 0.05,
        format!(
            "center TV {tv:.4}, correlation at distance 5 {corr:.4}, mean counts {:.3} {:.3}",
            report.sites[0].mean, report.sites[1].mean
        ),
    )
}

// 11. Given exactly one particle at the center, site and particle energy
// are nearly independent exponentials with the harmonic mean.
fn c11_conditional() -> Outcome {
    let run = dense_run();
    let u = run.field.values[run.center];
    let report = conditional_energy_moments(&run.sample.snapshots[0], 1, &[vec![1, 1]]).unwrap();
    let e = &report.entries[0];
    let reference = u * u;
    let rel = (e.empirical - reference).abs() / reference;
    Outcome::new(
        rel <= 0.15,
        format!(
            "E[xi eta | K=1] {:.4} ± {:.4} vs u^2 {reference:.4} ({:.1}%), {} occurrences",
            e.empirical,
            e.std_error,
            100.0 * rel,
            report.samples
        ),
    )
}

// 12. Geometric tail of the number of collapsed steps two coinciding
// packets stay together.
fn c12_sticking_tail() -> Outcome {
    let lattice = square(20.0);
    let center = lattice.site_near(&[0.5, 0.5]).unwrap() as u32;
    let placement = [PacketLocation::Site(center), PacketLocation::Site(center)];
    let m = lattice.num_sites();
    let mut episodes: Vec<StickingEpisode> = Vec::new();
    let mut next = 0;
    while episodes.len() < 10_000 {
        let chunk = map_replica_range(212, next..next + 64, Execution::Parallel, |_, rng| {
            pair_sticking_time_sample(&lattice, m, placement, u64::MAX, rng).unwrap()
        });
        next += 64;
        episodes.extend(chunk.into_iter().flatten());
    }
    let rows = sticking_survival(&episodes, 10);
    let violations: Vec<u64> = rows
        .iter()
        .filter(|&&(_, p, se, bound)| p > bound + 3.0 * se)
        .map(|r| r.0)
        .collect();
    let (_, p1, _, _) = rows[0];
    let (_, p10, _, b10) = rows[9];
    Outcome::new(
        violations.is_empty(),
        format!(
            "{} episodes, P(>1) {p1:.4}, P(>10) {p10:.5} vs bound {b10:.4}, violations at k {violations:?}",
            episodes.len()
        ),
    )
}

// 13. Extra packets do not change where the first one is absorbed.
fn c13_embedding() -> Outcome {
    let lattice = interval(32.0);
    let mid = lattice.site_near(&[0.5]).unwrap();
    let m = lattice.num_sites();
    let temp = BoundaryTemperature::endpoints(0.0, 1.0);
    let right_fraction = |sites: &[usize], seed: u64| {
        let placement = sites.iter().map(|&v| PacketLocation::Site(v as u32)).collect();
        let cfg = DualRunConfig::new(lattice.clone(), temp.clone(), m, placement, seed, 10_000);
        let est = estimate_moment_product(&cfg, Execution::Parallel).unwrap();
        let right = lattice.bath_index(&[32]).unwrap();
        est.marginals[0][right]
    };
    let alone = right_fraction(&[mid], 213);
    let crowded = right_fraction(&[mid, mid - 1, mid + 1], 1213);
    // Two outcomes, so the total variation distance is the gap in P(R).
    let tv = (alone - crowded).abs();
    Outcome::new(
        tv <= 0.03,
        format!("P(packet 1 exits right): N=1 {alone:.4}, N=3 {crowded:.4}, TV {tv:.4}"),
    )
}
