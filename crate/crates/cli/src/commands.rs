use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};
use treemix::chain::DENSE_LIMIT;
use treemix::hitting::{hitting_moments, laziness_transfer_check};
use treemix::mixing::{cutoff_report, mixing_time, MixingProfile, WorstCaseProfile, DEFAULT_EPS_GRID};
use treemix::montecarlo::{sample_hitting_time, simulate_coupling, MCConfig};
use treemix::spectral::{
    complement_poincare_check, poincare_line_check, poincare_tree_check, relaxation_time_tree,
};
use treemix::verify::{run_property_suite, VerifyOptions, TREE_SIZES};
use treemix::{build_family_tree, ChainOperator, RegionId, TreeFamilySpec, TreeGraph, VertexRef};

use crate::output::OutputDir;
use crate::{CliResult, CommonArgs, ConfigFile, Failure, SpecArgs};

const DEFAULT_MC_REPLICATES: u64 = 10_000;
const DEFAULT_VERIFY_REPLICATES: u64 = 100_000;

#[derive(Args, Debug, Serialize)]
pub struct BuildArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Start vertex such as `path:16` or `T0:8` (default: all canonical starts).
    #[arg(long)]
    pub start: Option<String>,
    /// Last time on the grid (default: 5/4 of t_mix(0.01)).
    #[arg(long)]
    pub t_max: Option<u64>,
    /// Number of grid intervals.
    #[arg(long, default_value_t = 200)]
    pub points: u64,
    /// Eps values for the mixing-time table.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct TmixArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 0.25)]
    pub eps: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct HittingArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Start vertex (default: all canonical starts).
    #[arg(long)]
    pub start: Option<String>,
    /// Target vertex.
    #[arg(long, default_value = "path:0")]
    pub target: String,
    /// Use the non-lazy walk.
    #[arg(long)]
    pub non_lazy: bool,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SpectralArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Also run the Poincaré checks (line, trees, complement of the origin tree).
    #[arg(long)]
    pub poincare: bool,
    /// Random functions per Poincaré check.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Path length for the line check.
    #[arg(long, default_value_t = 64)]
    pub line_n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct McArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Start vertex (default: far path end `path:n_k`).
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long, default_value = "path:0")]
    pub target: String,
    /// Per-replicate step cap (default: 20 times the exact mean).
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct CoupleArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Start of X (default: far path end).
    #[arg(long)]
    pub start: Option<String>,
    /// Last time on the tail grid (default: 12 N k).
    #[arg(long)]
    pub t_max: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub points: u64,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo replicates for the local-time check.
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Random functions per Poincaré/variational check.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Family indices to analyze.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub ks: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: CommonArgs,
}

fn manifest_config<A: Serialize>(spec: Option<&TreeFamilySpec>, args: &A, common: &CommonArgs) -> Value {
    json!({ "spec": spec, "args": args, "threads": common.threads })
}

fn build_graph(spec: &TreeFamilySpec) -> CliResult<TreeGraph> {
    Ok(build_family_tree(spec)?)
}

/// Parses `path:<i>` or `<tree name>:<heap index>`.
fn parse_vertex(g: &TreeGraph, text: &str) -> CliResult<usize> {
    let bad = || Failure::Usage(format!("bad vertex {text:?}; expected path:<i> or <tree>:<heap index>"));
    let (name, index) = text.split_once(':').ok_or_else(bad)?;
    let index: u64 = index.trim().parse().map_err(|_| bad())?;
    let v = if name == "path" {
        VertexRef::path(index)
    } else {
        let slot = g.trees().iter().position(|t| t.name == name).ok_or_else(bad)?;
        VertexRef::tree(slot as u32, index)
    };
    Ok(g.encode(v)?)
}

fn labelled_starts(g: &TreeGraph, start: Option<&str>) -> CliResult<Vec<(String, usize)>> {
    match start {
        Some(s) => {
            let id = parse_vertex(g, s)?;
            Ok(vec![(g.describe(g.decode(id)?), id)])
        }
        None => g.canonical_starts().into_iter().map(|v| Ok((g.describe(v), g.encode(v)?))).collect(),
    }
}

/// Exact profile over the given starts: lumped chains on perfect trees,
/// the full dense chain otherwise.
fn exact_profile(chain: &ChainOperator<'_, TreeGraph>, starts: &[usize]) -> CliResult<WorstCaseProfile> {
    let g = chain.graph();
    let refs = starts.iter().map(|&s| g.decode(s)).collect::<treemix::Result<Vec<_>>>()?;
    if g.trees().iter().all(|t| t.is_perfect()) {
        Ok(WorstCaseProfile::from_quotients(chain, &refs)?)
    } else if g.vertex_count_u64() <= DENSE_LIMIT as u64 {
        Ok(WorstCaseProfile::from_full_chain(chain, &refs)?)
    } else {
        Err(Failure::Usage(format!(
            "{} states with non-perfect trees exceed the dense limit; use --mode perfect",
            g.vertex_count_u64()
        )))
    }
}

fn mass_scale(spec: &TreeFamilySpec) -> CliResult<f64> {
    Ok(spec.mass()? as f64)
}

fn require_seed(flag: Option<u64>, config: &ConfigFile) -> CliResult<u64> {
    flag.or(config.seed).ok_or_else(|| Failure::Usage("--seed is required".into()))
}

fn replicates(flag: Option<u64>, config: &ConfigFile, default: u64) -> CliResult<u64> {
    let r = flag.or(config.replicates).unwrap_or(default);
    if r == 0 {
        return Err(Failure::Usage("--replicates must be at least 1".into()));
    }
    Ok(r)
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_line(text: &str) -> CliResult<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(e.into())),
        _ => Ok(()),
    }
}

fn print_json(v: &Value) -> CliResult<()> {
    print_line(&serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?)
}

pub fn build(a: &BuildArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let mut out = OutputDir::create(&a.common.out_dir, "build", manifest_config(Some(&spec), a, &a.common), None)?;
    let g = build_graph(&spec)?;
    out.mark("construct");
    let summary = g.summary();
    out.write_with("regions.csv", |w| {
        writeln!(w, "name,requested_size,actual_size,root_position,depth")?;
        for r in &summary.regions {
            writeln!(w, "{},{},{},{},{}", r.name, r.requested_size, r.actual_size, r.root_position, r.depth)?;
        }
        Ok(())
    })?;
    let v = out.write_json("summary.json", &summary)?;
    out.finish()?;
    print_json(&v)
}

pub fn profile(a: &ProfileArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let mut out = OutputDir::create(&a.common.out_dir, "profile", manifest_config(Some(&spec), a, &a.common), None)?;
    let g = build_graph(&spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let starts = labelled_starts(&g, a.start.as_deref())?;
    let ids: Vec<usize> = starts.iter().map(|s| s.1).collect();
    let worst = exact_profile(&chain, &ids)?;
    out.mark("decompose");
    let t_max = match a.t_max {
        Some(t) => t,
        None => mixing_time(&worst, 0.01)? * 5 / 4,
    };
    let points = a.points.max(1);
    let mut grid: Vec<u64> = (0..=points).map(|i| ((i as u128 * t_max as u128) / points as u128) as u64).collect();
    grid.dedup();
    let eps = a.eps.clone().unwrap_or_else(|| DEFAULT_EPS_GRID.to_vec());
    let profiles = worst.profiles(&grid, &eps)?;
    out.mark("profile");
    out.write_with("profile.csv", |w| Ok(MixingProfile::write_csv(&profiles, w)?))?;
    let tables: Vec<Value> = profiles.iter().map(|p| json!({ "start": p.start, "tmix": p.tmix_table })).collect();
    let v = out.write_json("profile.json", &json!({ "mass": spec.mass()?, "k": spec.k, "starts": tables }))?;
    out.finish()?;
    print_json(&v)
}

pub fn tmix(a: &TmixArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    if !(a.eps > 0.0 && a.eps < 1.0) {
        return Err(Failure::Usage(format!("--eps must lie in (0, 1), got {}", a.eps)));
    }
    let mut out = OutputDir::create(&a.common.out_dir, "tmix", manifest_config(Some(&spec), a, &a.common), None)?;
    let g = build_graph(&spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let ids: Vec<usize> = labelled_starts(&g, None)?.into_iter().map(|s| s.1).collect();
    let worst = exact_profile(&chain, &ids)?;
    let t = mixing_time(&worst, a.eps)?;
    out.mark("tmix");
    let (start, d) = worst.worst_start(t);
    let n = mass_scale(&spec)?;
    let v = out.write_json(
        "tmix.json",
        &json!({
            "k": spec.k,
            "mass": spec.mass()?,
            "eps": a.eps,
            "tmix": t,
            "worst_start": start,
            "distance_at_tmix": d,
            "tmix_over_6Nk": t as f64 / (6.0 * n * spec.k as f64),
        }),
    )?;
    out.finish()?;
    print_line(&t.to_string())?;
    print_json(&v)
}

pub fn hitting(a: &HittingArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let mut out = OutputDir::create(&a.common.out_dir, "hitting", manifest_config(Some(&spec), a, &a.common), None)?;
    let g = build_graph(&spec)?;
    let chain = if a.non_lazy { ChainOperator::non_lazy(&g)? } else { ChainOperator::lazy(&g)? };
    let target = parse_vertex(&g, &a.target)?;
    let starts = labelled_starts(&g, a.start.as_deref())?;
    let moments = hitting_moments(&chain, &[target])?;
    out.mark("solve");
    let far = g.path_len() as usize;
    let transfer = laziness_transfer_check(&ChainOperator::non_lazy(&g)?, &[target], far)?;
    out.mark("transfer");
    out.write_with("hitting.csv", |w| Ok(moments.write_csv(w, &starts)?))?;
    let n = mass_scale(&spec)?;
    let k = spec.k as f64;
    let rows: Vec<Value> = starts
        .iter()
        .map(|(label, x)| json!({ "start": label, "mean": moments.mean_at(*x), "variance": moments.variance_at(*x) }))
        .collect();
    let mean_far = moments.mean_at(far);
    let var_far = moments.variance_at(far);
    let v = out.write_json(
        "hitting.json",
        &json!({
            "target": g.describe(g.decode(target)?),
            "laziness": chain.laziness(),
            "max_residual": moments.max_residual,
            "starts": rows,
            "far_end": {
                "mean_over_6Nk": mean_far / (6.0 * n * k),
                "variance_over_N2k": var_far.map(|v| v / (n * n * k)),
                "variance_over_mean2": var_far.map(|v| v / (mean_far * mean_far)),
            },
            "laziness_transfer": transfer,
        }),
    )?;
    out.finish()?;
    print_json(&v)
}

pub fn spectral(a: &SpectralArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let seed = a.seed.or(config.seed).unwrap_or(0);
    let mut out = OutputDir::create(&a.common.out_dir, "spectral", manifest_config(Some(&spec), a, &a.common), Some(seed))?;
    let g = build_graph(&spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let report = relaxation_time_tree(&chain)?;
    out.mark("relaxation");
    let n = mass_scale(&spec)?;
    let mut doc = json!({
        "report": report,
        "t_rel_over_N": report.t_rel / n,
        "t_rel_over_N_sqrt_k": report.t_rel / (n * (spec.k as f64).sqrt()),
        "cheeger_consistent": report.cheeger_consistent(),
    });
    let mut passed = true;
    if a.poincare {
        let line = poincare_line_check(a.line_n, a.trials, seed)?;
        let trees = poincare_tree_check(&TREE_SIZES, a.trials, seed)?;
        let trials = if g.vertex_count_u64() <= DENSE_LIMIT as u64 { a.trials } else { 0 };
        let complement = complement_poincare_check(&spec, trials, seed)?;
        out.mark("poincare");
        passed = line.passes && trees.passes && complement.passes;
        out.write_with("poincare_trees.csv", |w| Ok(trees.write_csv(w)?))?;
        doc["poincare"] = json!({ "line": line, "trees": trees, "complement": complement, "passed": passed });
    }
    let v = out.write_json("spectral.json", &doc)?;
    out.finish()?;
    print_json(&v)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Failed("Poincaré checks failed".into()))
    }
}

pub fn mc(a: &McArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let seed = require_seed(a.seed, config)?;
    let replicates = replicates(a.replicates, config, DEFAULT_MC_REPLICATES)?;
    let mut out = OutputDir::create(&a.common.out_dir, "mc", manifest_config(Some(&spec), a, &a.common), Some(seed))?;
    let g = build_graph(&spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let start = match &a.start {
        Some(s) => parse_vertex(&g, s)?,
        None => g.path_len() as usize,
    };
    let target = parse_vertex(&g, &a.target)?;
    let exact = hitting_moments(&chain, &[target])?;
    out.mark("exact");
    let mean = exact.mean_at(start);
    let variance = exact.variance_at(start).unwrap_or(f64::NAN);
    let cfg = match a.max_steps {
        Some(m) => MCConfig::new(seed, replicates).with_max_steps(m),
        None => MCConfig::new(seed, replicates).with_cap_from_mean(mean),
    };
    let stats = sample_hitting_time(&chain, start, target, &cfg)?;
    out.mark("simulate");
    out.write_with("mc_samples.csv", |w| Ok(stats.write_samples_csv(w)?))?;
    let mean_z = stats.tau.mean_z(mean);
    let variance_z = stats.tau.variance_z(variance);
    let v = out.write_json(
        "mc_summary.json",
        &json!({
            "start": g.describe(g.decode(start)?),
            "target": g.describe(g.decode(target)?),
            "stats": stats,
            "covariances": stats.covariances(),
            "exact": { "mean": mean, "variance": variance },
            "mean_z": mean_z,
            "variance_z": variance_z,
            "within_3_se": mean_z.abs() <= 3.0 && variance_z.abs() <= 3.0,
        }),
    )?;
    out.finish()?;
    print_json(&v)
}

pub fn couple(a: &CoupleArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let seed = require_seed(a.seed, config)?;
    let replicates = replicates(a.replicates, config, DEFAULT_MC_REPLICATES)?;
    let mut out = OutputDir::create(&a.common.out_dir, "couple", manifest_config(Some(&spec), a, &a.common), Some(seed))?;
    let g = build_graph(&spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let start = match &a.start {
        Some(s) => parse_vertex(&g, s)?,
        None => g.path_len() as usize,
    };
    let n = mass_scale(&spec)?;
    let horizon = (12.0 * n * spec.k as f64).ceil() as u64;
    let t_max = a.t_max.unwrap_or(horizon);
    let points = a.points.max(1);
    let mut grid: Vec<u64> = (0..=points).map(|i| ((i as u128 * t_max as u128) / points as u128) as u64).collect();
    grid.dedup();
    let exact = exact_profile(&chain, &[start])?;
    let d: Vec<f64> = grid.iter().map(|&t| exact.distance(t)).collect();
    out.mark("exact");
    let cfg = match a.max_steps {
        Some(m) => MCConfig::new(seed, replicates).with_max_steps(m),
        None => MCConfig::new(seed, replicates).with_max_steps(20 * horizon.max(1000)),
    };
    let stats = simulate_coupling(&chain, start, &cfg, &grid)?;
    out.mark("simulate");
    let inequality: Vec<bool> = stats.tail.iter().zip(&d).map(|(p, &d)| p.probability >= d - 3.0 * p.standard_error).collect();
    out.write_with("coupling_tail.csv", |w| {
        writeln!(w, "t,p_tau_gt_t,se,d_exact")?;
        for (p, dt) in stats.tail.iter().zip(&d) {
            writeln!(w, "{},{:.17e},{:.17e},{:.17e}", p.t, p.probability, p.standard_error, dt)?;
        }
        Ok(())
    })?;
    out.write_with("coupling_samples.csv", |w| Ok(stats.write_samples_csv(w)?))?;
    let first_below = stats.tail.iter().find(|p| p.probability < 0.25).map(|p| p.t);
    let region_of_start = match g.region_of(start) {
        RegionId::Path => "path".to_string(),
        RegionId::Tree(s) => g.tree(s).name.clone(),
    };
    let v = out.write_json(
        "coupling.json",
        &json!({
            "x_start": g.describe(g.decode(start)?),
            "x_start_region": region_of_start,
            "stats": stats,
            "horizon_12Nk": horizon,
            "coupling_inequality_holds": inequality.iter().all(|&b| b),
            "first_t_with_tail_below_quarter": first_below,
        }),
    )?;
    out.finish()?;
    print_json(&v)
}

pub fn verify(a: &VerifyArgs, config: &ConfigFile) -> CliResult<()> {
    let spec = config.spec(&a.spec)?;
    let seed = a.seed.or(config.seed).unwrap_or(0);
    let mut options = VerifyOptions::new(spec.clone(), seed);
    options.replicates = replicates(a.replicates, config, DEFAULT_VERIFY_REPLICATES)?;
    options.random_trials = a.trials;
    let mut out = OutputDir::create(&a.common.out_dir, "verify", manifest_config(Some(&spec), a, &a.common), Some(seed))?;
    let report = run_property_suite(&options)?;
    out.mark("suite");
    out.write_with("verify_checks.csv", |w| {
        writeln!(w, "check,passed")?;
        for c in &report.checks {
            writeln!(w, "{},{}", c.name, c.passed)?;
        }
        Ok(())
    })?;
    out.write_json("verify.json", &report)?;
    out.finish()?;
    let failures = report.failures();
    print_json(&json!({ "passed": report.passed, "failures": failures }))?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Failed(format!("checks failed: {}", failures.join(", "))))
    }
}

pub fn sweep(a: &SweepArgs, config: &ConfigFile) -> CliResult<()> {
    if a.ks.is_empty() {
        return Err(Failure::Usage("--ks must list at least one k".into()));
    }
    let specs = a
        .ks
        .iter()
        .map(|&k| config.spec(&SpecArgs { k: Some(k), ..a.spec.clone() }))
        .collect::<CliResult<Vec<_>>>()?;
    let eps = a.eps.clone().unwrap_or_else(|| DEFAULT_EPS_GRID.to_vec());
    if let Some(&e) = eps.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(Failure::Usage(format!("eps values must lie in (0, 1), got {e}")));
    }
    let mut out = OutputDir::create(&a.common.out_dir, "sweep", manifest_config(None, &json!({ "specs": specs, "args": a }), &a.common), None)?;
    let report = cutoff_report(&specs, &eps);
    out.mark("cutoff");
    out.write_with("cutoff.csv", |w| Ok(report.write_csv(w)?))?;
    let v = out.write_json("cutoff.json", &report)?;
    out.finish()?;
    print_json(&v)?;
    if report.failures.is_empty() {
        Ok(())
    } else {
        let ks: Vec<String> = report.failures.iter().map(|(k, m)| format!("k={k}: {m}")).collect();
        Err(Failure::Failed(ks.join("; ")))
    }
}
