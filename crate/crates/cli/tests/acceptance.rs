//! Acceptance criteria 1-12. Each test prints one `criterion N: PASS|FAIL` line
//! with the measured values, then asserts.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use treemix::graph::Adjacency;
use treemix::hitting::{excursion_moments, hitting_moments, laziness_transfer_check, local_time_law, ExcursionConvention, PathBoundary};
use treemix::lumping::{coarsest_lumpable_partition, quotient_chain, validate_lumping};
use treemix::mixing::{cutoff_report, CutoffReport, WorstCaseProfile};
use treemix::montecarlo::{geometric_fit, sample_hitting_time, sample_path_local_times, simulate_coupling, MCConfig};
use treemix::spectral::{
    complement_band, complement_poincare_check, poincare_line_check, poincare_tree_check, relaxation_time_tree,
};
use treemix::{build_family_tree, ChainOperator, EdgeListGraph, TreeFamilySpec, TreeGraph, TreeMode, VertexRef};

const SEED: u64 = 20_240_601;

fn report(n: u32, name: &str, passed: bool, detail: String) {
    println!("criterion {n:>2}: {} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn graph(spec: &TreeFamilySpec) -> TreeGraph {
    build_family_tree(spec).unwrap()
}

/// Hitting moments of `tau_0` from `n_k` for the lazy walk: `(E, Var, N)`.
fn concentration(k: u32) -> (f64, f64, f64) {
    static CACHE: OnceLock<BTreeMap<u32, (f64, f64, f64)>> = OnceLock::new();
    *CACHE
        .get_or_init(|| {
            [2, 3]
                .into_iter()
                .map(|k| {
                    let spec = TreeFamilySpec::canonical(k);
                    let g = graph(&spec);
                    let chain = ChainOperator::lazy(&g).unwrap();
                    let m = hitting_moments(&chain, &[0]).unwrap();
                    let far = g.path_len() as usize;
                    (k, (m.mean_at(far), m.variance_at(far).unwrap(), spec.mass().unwrap() as f64))
                })
                .collect()
        })
        .get(&k)
        .unwrap()
}

fn canonical_cutoff() -> &'static CutoffReport {
    static CACHE: OnceLock<CutoffReport> = OnceLock::new();
    CACHE.get_or_init(|| cutoff_report(&[TreeFamilySpec::canonical(2), TreeFamilySpec::canonical(3)], &[0.1, 0.25]))
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

#[test]
fn criterion_01_construction() {
    let spec = TreeFamilySpec::canonical(2).with_mode(TreeMode::ExactSize);
    let clock = Instant::now();
    let g = graph(&spec);
    let elapsed = clock.elapsed().as_secs_f64();
    // Independent count: breadth-first search from the origin over the adjacency.
    let mut seen = vec![false; g.vertex_count()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut reached = 0;
    while let Some(v) = queue.pop_front() {
        reached += 1;
        for (u, _) in g.neighbor_list(v) {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    // Path [0, 16] plus trees of 4096, 1024 and 256 vertices sharing their roots with the path.
    let expected = 17 + (4096 - 1) + (1024 - 1) + (256 - 1);
    report(
        1,
        "construction",
        reached == 5390 && expected == 5390 && g.vertex_count() == 5390 && elapsed < 1.0,
        format!("reached {reached}, stored {}, {elapsed:.3} s", g.vertex_count()),
    );
}

#[test]
fn criterion_02_lumping() {
    let clock = Instant::now();
    let g = graph(&TreeFamilySpec::canonical(2));
    let chain = ChainOperator::lazy(&g).unwrap();
    let mut worst: f64 = 0.0;
    let starts = g.canonical_starts();
    for &v in &starts {
        let partition = coarsest_lumpable_partition(&chain, v).unwrap();
        assert!(partition.is_certified());
        let q = quotient_chain(&chain, partition).unwrap();
        let check = validate_lumping(&chain, &q, &[1, 10, 100, 1000]).unwrap();
        worst = worst.max(check.max_error);
    }
    let elapsed = clock.elapsed().as_secs_f64();
    report(
        2,
        "lumping exactness",
        worst <= 1e-12 && elapsed < 60.0,
        format!("{} starts, max L-inf error {worst:.3e}, {elapsed:.1} s", starts.len()),
    );
}

#[test]
fn criterion_03_laziness_transfer() {
    let g = graph(&TreeFamilySpec::canonical(2));
    let family = laziness_transfer_check(&ChainOperator::non_lazy(&g).unwrap(), &[0], g.path_len() as usize).unwrap();
    let mut worst = family.mean_discrepancy.max(family.variance_discrepancy);
    for n in [2usize, 8, 32] {
        let p = EdgeListGraph::path(n);
        let r = laziness_transfer_check(&ChainOperator::non_lazy(&p).unwrap(), &[0], n).unwrap();
        worst = worst.max(r.mean_discrepancy).max(r.variance_discrepancy);
    }
    report(3, "laziness transfer", worst <= 1e-8, format!("max relative discrepancy {worst:.3e}"));
}

#[test]
fn criterion_04_local_times() {
    let mut worst: f64 = 0.0;
    let mut p_values = Vec::new();
    for n in [4u64, 16] {
        for i in 1..=n {
            let law = local_time_law(n, i, PathBoundary::Hold).unwrap();
            let p = 1.0 / (2.0 * i as f64);
            for &(m, exact, _) in &law.pmf {
                // L counts visits, so P(L = m) = (1-p)^(m-1) p for m >= 1.
                let geometric = if m == 0 { 0.0 } else { (1.0 - p).powi(m as i32 - 1) * p };
                worst = worst.max((exact - geometric).abs());
            }
        }
        let site = n / 2;
        let sample = sample_path_local_times(n, site, PathBoundary::Hold, &MCConfig::new(SEED ^ n, 100_000)).unwrap();
        // `counts` is a histogram; expand it and fit the geometric law directly.
        let visits: Vec<u64> =
            sample.counts.iter().enumerate().flat_map(|(m, &c)| std::iter::repeat(m as u64).take(c as usize)).collect();
        let fit = geometric_fit(&visits, 1.0 / (2.0 * site as f64));
        p_values.push((n, site, fit.p_value, sample.truncations));
    }
    let mc_ok = p_values.iter().all(|&(_, _, p, t)| p > 0.01 && t == 0);
    report(
        4,
        "local-time law",
        worst <= 1e-10 && mc_ok,
        format!("max pmf error {worst:.3e}; chi-square (n, site, p) {p_values:?}"),
    );
}

#[test]
fn criterion_05_excursions() {
    let sizes = [7u64, 15, 31, 63, 127];
    let mut matching = Vec::new();
    let mut worst_spread: f64 = 0.0;
    for c in ExcursionConvention::all() {
        let rows: Vec<_> = sizes.iter().map(|&n| excursion_moments(n, c).unwrap()).collect();
        let scaled: Vec<f64> = rows.iter().map(|r| r.second_moment / (r.size as f64).powi(2)).collect();
        let spread = scaled.iter().cloned().fold(0.0, f64::max) / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        worst_spread = worst_spread.max(spread);
        if rows.iter().all(|r| (r.mean - (3.0 * r.size as f64 - 1.0) / 2.0).abs() <= 1e-9 * r.mean) {
            matching.push(c.label());
        }
    }
    report(
        5,
        "excursion moments",
        worst_spread <= 64.0,
        format!("worst E[T^2]/n^2 spread {worst_spread:.3}; conventions with mean (3n-1)/2: {matching:?}"),
    );
}

#[test]
fn criterion_06_concentration() {
    let clock = Instant::now();
    let (e2, v2, n2) = concentration(2);
    let (e3, v3, n3) = concentration(3);
    let elapsed = clock.elapsed().as_secs_f64();
    let ratio = |e: f64, n: f64, k: f64| e / (6.0 * n * k);
    let (r2, r3) = (ratio(e2, n2, 2.0), ratio(e3, n3, 3.0));
    let (s2, s3) = (v2 / (n2 * n2 * 2.0), v3 / (n3 * n3 * 3.0));
    let (c2, c3) = (v2 / (e2 * e2), v3 / (e3 * e3));
    let band = |x: f64| (1.0 / 64.0..=64.0).contains(&x);
    let clauses = [
        ("Var/E^2 decreases", c3 < c2),
        ("Var/(N^2 k) in band", band(s2) && band(s3)),
        ("E/(6Nk) at k=3 closer to 1", (r3 - 1.0).abs() < (r2 - 1.0).abs()),
        ("runtime < 10 min", elapsed < 600.0),
    ];
    let failed: Vec<&str> = clauses.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        6,
        "concentration",
        failed.is_empty(),
        format!(
            "E/(6Nk) {r2:.4} -> {r3:.4}; Var/(N^2k) {s2:.3} -> {s3:.3}; Var/E^2 {c2:.4} -> {c3:.4}; {elapsed:.1} s; failed clauses {failed:?}"
        ),
    );
}

#[test]
fn criterion_07_monte_carlo_hitting() {
    let g = graph(&TreeFamilySpec::canonical(2));
    let chain = ChainOperator::lazy(&g).unwrap();
    let (mean, variance, _) = concentration(2);
    let far = g.path_len() as usize;
    let cfg = MCConfig::new(SEED, 10_000).with_cap_from_mean(mean);
    let stats = sample_hitting_time(&chain, far, 0, &cfg).unwrap();
    let (zm, zv) = (stats.tau.mean_z(mean), stats.tau.variance_z(variance));
    report(
        7,
        "MC vs exact hitting time",
        zm.abs() <= 3.0 && zv.abs() <= 3.0 && stats.truncations == 0 && stats.identity_violations == 0,
        format!(
            "mean {:.1} vs {mean:.1} (z {zm:.2}), variance {:.4e} vs {variance:.4e} (z {zv:.2}), {} truncations",
            stats.tau.mean, stats.tau.variance, stats.truncations
        ),
    );
}

#[test]
fn criterion_08_cutoff_trend() {
    let canonical = canonical_cutoff();
    let base4 = cutoff_report(&(2..=5).map(|k| TreeFamilySpec::geometric(k, 4)).collect::<Vec<_>>(), &[0.1, 0.25]);
    let mut ok = canonical.failures.is_empty() && base4.failures.is_empty();
    let mut detail = Vec::new();
    for (name, r, ks) in [("canonical", canonical, vec![2u32, 3]), ("base 4", &base4, (2..=5).collect())] {
        let rows: Vec<_> = ks.iter().map(|&k| r.row(k, 0.1).expect("row")).collect();
        let ratios: Vec<f64> = rows.iter().map(|r| r.ratio.unwrap()).collect();
        let windows: Vec<f64> = rows.iter().map(|r| r.window_over_tmix_quarter.unwrap()).collect();
        ok &= strictly_decreasing(&ratios) && strictly_decreasing(&windows);
        detail.push(format!("{name}: tmix(0.1)/tmix(0.9) {ratios:.3?}, window/tmix(1/4) {windows:.3?}"));
    }
    let scaled: Vec<f64> = [2, 3].iter().map(|&k| canonical.row(k, 0.1).unwrap().window_over_mass_sqrt_k.unwrap()).collect();
    let spread = scaled.iter().cloned().fold(0.0, f64::max) / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    ok &= spread <= 16.0;
    detail.push(format!("window/(N sqrt k) {scaled:.3?}"));
    report(8, "cutoff trend", ok, detail.join("; "));
}

#[test]
fn criterion_09_relaxation() {
    let mut rows = Vec::new();
    for k in [2u32, 3] {
        let spec = TreeFamilySpec::canonical(k);
        let g = graph(&spec);
        let chain = ChainOperator::lazy(&g).unwrap();
        let r = relaxation_time_tree(&chain).unwrap();
        let n = spec.mass().unwrap() as f64;
        let phi = *r.bottleneck.values().next().expect("origin bottleneck");
        let tmix = canonical_cutoff().row(k, 0.25).expect("row").tmix as f64;
        let validated = r.sector_validation.as_ref().map_or(true, |v| v.passed);
        rows.push((k, r.t_rel, r.t_rel / n, 1.0 / (2.0 * phi), r.t_rel / tmix, format!("{:?}", r.method), validated));
    }
    let band = |x: f64| (1.0 / 64.0..=64.0).contains(&x);
    let (a, b) = (&rows[0], &rows[1]);
    let ok = band(a.2)
        && band(b.2)
        && a.2.max(b.2) / a.2.min(b.2) <= 4.0
        && rows.iter().all(|r| r.1 >= r.3 && r.6)
        && b.4 < a.4;
    let detail = rows
        .iter()
        .map(|r| format!("k={} t_rel/N {:.3} ({}), 1/(2 Phi) {:.4e} <= t_rel {:.4e}, t_rel/tmix(1/4) {:.3}", r.0, r.2, r.5, r.3, r.1, r.4))
        .collect::<Vec<_>>()
        .join("; ");
    report(9, "relaxation", ok, detail);
}

#[test]
fn criterion_10_poincare() {
    let line = poincare_line_check(64, 1000, SEED).unwrap();
    let trees = poincare_tree_check(&[7, 15, 31, 63, 127, 255], 1000, SEED).unwrap();
    let complements: Vec<_> = [(1u32, 1000usize), (2, 1000), (3, 0)]
        .iter()
        .map(|&(k, trials)| complement_poincare_check(&TreeFamilySpec::canonical(k), trials, SEED).unwrap())
        .collect();
    let band = complement_band(&complements);
    let ok = line.passes && trees.passes && complements.iter().all(|c| c.passes) && band.passes;
    report(
        10,
        "Poincaré suite",
        ok,
        format!(
            "line: {} random failures, max ratio {:.4}; trees: sup/m spread {:.3}; complement: sup/N {:?}, spread {:.3}",
            line.failures,
            line.max_random_ratio,
            trees.spread,
            complements.iter().map(|c| format!("k={} {:.3}", c.k, c.row.sup_over_size)).collect::<Vec<_>>(),
            band.spread
        ),
    );
}

#[test]
fn criterion_11_coupling() {
    let spec = TreeFamilySpec::canonical(2);
    let g = graph(&spec);
    let chain = ChainOperator::lazy(&g).unwrap();
    let n = spec.mass().unwrap();
    let horizon = 12 * n * spec.k as u64;
    let grid: Vec<u64> = (0..=64).map(|i| i * horizon / 64).collect();
    let far = g.path_len() as usize;
    let exact = WorstCaseProfile::from_quotients(&chain, &[VertexRef::path(far as u64)]).unwrap();
    let cfg = MCConfig::new(SEED, 10_000).with_max_steps(20 * horizon);
    let stats = simulate_coupling(&chain, far, &cfg, &grid).unwrap();
    let violations: Vec<u64> = stats
        .tail
        .iter()
        .filter(|p| p.probability < exact.distance(p.t) - 3.0 * p.standard_error)
        .map(|p| p.t)
        .collect();
    let below = stats.tail.iter().find(|p| p.probability < 0.25).map(|p| p.t);
    report(
        11,
        "coupling",
        violations.is_empty() && below.is_some() && stats.divergences == 0 && stats.truncations == 0,
        format!(
            "coupling-inequality violations at {violations:?}; first t with P(tau > t) < 1/4: {below:?} (12Nk = {horizon}); mean tau {:.1}",
            stats.tau.mean
        ),
    );
}

fn run_cli(args: &[&str], out: &Path, threads: usize) {
    let status = Command::new(env!("CARGO_BIN_EXE_treemix"))
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--out-dir")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "treemix {args:?} failed");
}

/// Every output file except the run manifest, which holds timings.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| !e.file_name().to_string_lossy().ends_with(".manifest.json"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn criterion_12_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    let runs: [(&str, &[&str]); 2] = [
        ("verify", &["verify", "--k", "2", "--seed", "11"]),
        ("mc", &["mc", "--k", "2", "--seed", "11", "--replicates", "2000"]),
    ];
    for (name, args) in runs {
        let dirs: Vec<_> = [(1usize, "a"), (8, "b"), (1, "c")]
            .iter()
            .map(|&(threads, tag)| {
                let d = tmp.path().join(format!("{name}-{tag}"));
                run_cli(args, &d, threads);
                outputs(&d)
            })
            .collect();
        let same = !dirs[0].is_empty() && dirs[0] == dirs[1] && dirs[0] == dirs[2];
        ok &= same;
        detail.push(format!("{name}: {} files identical across 1/8/1 threads: {same}", dirs[0].len()));
    }
    report(12, "determinism", ok, detail.join("; "));
}
