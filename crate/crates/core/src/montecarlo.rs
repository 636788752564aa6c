//! Seeded simulation of the walk: hitting times with their path/tree
//! decomposition, local times, excursions and the three-phase coupling.
//!
//! Replicate `r` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `r`,
//! so results do not depend on how replicates are spread over threads.
//! Per-replicate results are collected in replicate order before any
//! accumulation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::ChainOperator;
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::hitting::{excursion_moments, local_time_law, ExcursionConvention, PathBoundary, RootContext};
use crate::stats::{chi_square_gof, ChiSquareResult, MomentSummary, Moments};
use crate::topology::{TreeGraph, TreeMode};

/// Cap used when no exact mean is available to scale from.
pub const DEFAULT_MAX_STEPS: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCConfig {
    pub seed: u64,
    pub replicates: u64,
    /// Steps after which a replicate is abandoned and counted as truncated.
    pub max_steps: u64,
}

impl MCConfig {
    pub fn new(seed: u64, replicates: u64) -> Self {
        Self { seed, replicates, max_steps: DEFAULT_MAX_STEPS }
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> Self {
        self.max_steps = max_steps;
        self
    }

    /// `max(20 * mean, 1000)` steps, the cap used when the exact mean is known.
    pub fn with_cap_from_mean(self, mean: f64) -> Self {
        self.with_max_steps(((20.0 * mean).ceil() as u64).max(1000))
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Precondition("replicates must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Precondition("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Independent stream of replicate `r`.
    pub fn rng(&self, replicate: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate);
        rng
    }

    fn run<T: Send>(&self, f: impl Fn(u64, &mut ChaCha8Rng) -> T + Sync + Send) -> Vec<T> {
        (0..self.replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = self.rng(r);
                f(r, &mut rng)
            })
            .collect()
    }
}

/// One step of the lazy walk from `x`.
#[inline]
fn walk_step<R: Rng>(g: &TreeGraph, laziness: f64, x: usize, rng: &mut R) -> usize {
    if laziness > 0.0 && rng.random::<f64>() < laziness {
        return x;
    }
    let nb = g.neighbor_list(x);
    let total: u32 = nb.iter().map(|&(_, w)| w).sum();
    let mut r = rng.random_range(0..total);
    for &(y, w) in &nb {
        if r < w {
            return y;
        }
        r -= w;
    }
    unreachable!("weights sum to the degree")
}

/// Exact draw from `pi` (proportional to degree) by rejection.
fn stationary_draw<R: Rng>(chain: &ChainOperator<'_, TreeGraph>, max_degree: u64, rng: &mut R) -> usize {
    let n = chain.state_count();
    loop {
        let x = rng.random_range(0..n);
        if rng.random_range(0..max_degree) < chain.degree(x) {
            return x;
        }
    }
}

/// Per-replicate hitting time with its decomposition. Each step is charged
/// to the region of the position it starts from: path vertices (tree roots
/// included) to `path_steps`, tree vertices to their tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HittingSample {
    pub tau: u64,
    /// `S`: steps started on the path.
    pub path_steps: u64,
    /// `D`: steps started inside attached trees.
    pub tree_steps: u64,
    /// `D_i` per tree slot.
    pub region_steps: Vec<u64>,
    /// Visits of the embedded path walk to each tree's root site, per slot.
    pub local_times: Vec<u64>,
    /// Sum over path visits of the tree time spent during the visit.
    pub visit_delays: u64,
    pub truncated: bool,
}

impl HittingSample {
    /// `tau = S + D`, `D = sum D_i` and `D = sum of per-visit delays`.
    pub fn identities_hold(&self) -> bool {
        self.tau == self.path_steps + self.tree_steps
            && self.tree_steps == self.region_steps.iter().sum::<u64>()
            && self.tree_steps == self.visit_delays
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompStats {
    pub config: MCConfig,
    pub start: usize,
    pub target: usize,
    pub region_names: Vec<String>,
    pub root_sites: Vec<u64>,
    pub truncations: u64,
    pub identity_violations: u64,
    /// Over non-truncated replicates.
    pub tau: MomentSummary,
    pub path_steps: MomentSummary,
    pub tree_steps: MomentSummary,
    pub region_steps: Vec<MomentSummary>,
    #[serde(skip)]
    pub samples: Vec<HittingSample>,
}

impl DecompStats {
    /// Local times at the root site of tree `slot`, non-truncated replicates.
    pub fn local_times(&self, slot: usize) -> Vec<u64> {
        self.samples.iter().filter(|s| !s.truncated).map(|s| s.local_times[slot]).collect()
    }

    /// Covariance of `(D_i, D_j)` for every pair of trees, with a standard error.
    pub fn covariances(&self) -> Vec<CovarianceRow> {
        let kept: Vec<&HittingSample> = self.samples.iter().filter(|s| !s.truncated).collect();
        let slots = self.region_names.len();
        let means: Vec<f64> = (0..slots).map(|i| self.region_steps[i].mean).collect();
        let mut out = Vec::new();
        for i in 0..slots {
            for j in 0..i {
                let mut m = Moments::new();
                for s in &kept {
                    m.push((s.region_steps[i] as f64 - means[i]) * (s.region_steps[j] as f64 - means[j]));
                }
                out.push(CovarianceRow {
                    first: self.region_names[i].clone(),
                    second: self.region_names[j].clone(),
                    covariance: m.mean(),
                    standard_error: m.mean_se(),
                });
            }
        }
        out
    }

    /// CSV of raw samples: `replicate,tau,S,D,truncated` then one `D_<region>`
    /// and one `L_<region>` column per tree.
    pub fn write_samples_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "replicate,tau,S,D,truncated")?;
        for name in &self.region_names {
            write!(out, ",D_{name}")?;
        }
        for name in &self.region_names {
            write!(out, ",L_{name}")?;
        }
        writeln!(out)?;
        for (r, s) in self.samples.iter().enumerate() {
            write!(out, "{r},{},{},{},{}", s.tau, s.path_steps, s.tree_steps, u8::from(s.truncated))?;
            for d in &s.region_steps {
                write!(out, ",{d}")?;
            }
            for l in &s.local_times {
                write!(out, ",{l}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub first: String,
    pub second: String,
    pub covariance: f64,
    pub standard_error: f64,
}

/// Samples `tau_target` from `start` with the path/tree decomposition.
pub fn sample_hitting_time(
    chain: &ChainOperator<'_, TreeGraph>,
    start: usize,
    target: usize,
    cfg: &MCConfig,
) -> Result<DecompStats> {
    cfg.validate()?;
    let g = chain.graph();
    let n = chain.state_count();
    if start >= n || target >= n {
        return Err(Error::Addressing(format!("state outside 0..{n}")));
    }
    let slots = g.trees().len();
    let root_sites: Vec<u64> = g.trees().iter().map(|t| t.root_position).collect();
    let laziness = chain.laziness();
    let samples = cfg.run(|_, rng| {
        let mut s = HittingSample {
            tau: 0,
            path_steps: 0,
            tree_steps: 0,
            region_steps: vec![0; slots],
            local_times: vec![0; slots],
            visit_delays: 0,
            truncated: false,
        };
        let site_slot = |x: usize| g.tree_rooted_at(x as u64);
        let mut x = start;
        let mut delay = 0u64;
        if g.is_path_vertex(x) {
            if let Some(slot) = site_slot(x) {
                s.local_times[slot as usize] += 1;
            }
        }
        while x != target {
            if s.tau == cfg.max_steps {
                s.truncated = true;
                break;
            }
            let from_path = g.is_path_vertex(x);
            match g.tree_coordinates(x) {
                None => s.path_steps += 1,
                Some((slot, _)) => {
                    s.tree_steps += 1;
                    s.region_steps[slot as usize] += 1;
                    delay += 1;
                }
            }
            let y = walk_step(g, laziness, x, rng);
            s.tau += 1;
            // A new visit of the embedded path walk: a path-to-path move.
            if from_path && y != x && g.is_path_vertex(y) {
                s.visit_delays += delay;
                delay = 0;
                if let Some(slot) = site_slot(y) {
                    s.local_times[slot as usize] += 1;
                }
            }
            x = y;
        }
        s.visit_delays += delay;
        s
    });
    Ok(summarize_hitting(g, *cfg, start, target, root_sites, samples))
}

fn summarize_hitting(
    g: &TreeGraph,
    config: MCConfig,
    start: usize,
    target: usize,
    root_sites: Vec<u64>,
    samples: Vec<HittingSample>,
) -> DecompStats {
    let slots = root_sites.len();
    let (mut tau, mut path, mut tree) = (Moments::new(), Moments::new(), Moments::new());
    let mut regions = vec![Moments::new(); slots];
    let (mut truncations, mut identity_violations) = (0, 0);
    for s in &samples {
        if !s.identities_hold() {
            identity_violations += 1;
        }
        if s.truncated {
            truncations += 1;
            continue;
        }
        tau.push(s.tau as f64);
        path.push(s.path_steps as f64);
        tree.push(s.tree_steps as f64);
        for (m, &d) in regions.iter_mut().zip(&s.region_steps) {
            m.push(d as f64);
        }
    }
    DecompStats {
        config,
        start,
        target,
        region_names: g.trees().iter().map(|t| t.name.clone()).collect(),
        root_sites,
        truncations,
        identity_violations,
        tau: tau.summary(),
        path_steps: path.summary(),
        tree_steps: tree.summary(),
        region_steps: regions.iter().map(|m| m.summary()).collect(),
        samples,
    }
}

/// Chi-square fit of visit counts (all at least 1) to `Geometric(p)` on `{1, 2, ...}`.
pub fn geometric_fit(samples: &[u64], p: f64) -> ChiSquareResult {
    let max = samples.iter().copied().max().unwrap_or(1).max(1) as usize;
    let mut observed = vec![0u64; max + 1];
    for &v in samples {
        observed[v as usize] += 1;
    }
    // Category m = 0 has probability 0 under the law; keep it so zeros count against the fit.
    let mut probs: Vec<f64> = (0..=max).map(|m| if m == 0 { 0.0 } else { (1.0 - p).powi(m as i32 - 1) * p }).collect();
    let tail: f64 = (1.0 - p).powi(max as i32);
    *probs.last_mut().expect("non-empty") += tail;
    chi_square_gof(&observed, &probs, 5.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeSample {
    pub config: MCConfig,
    pub path_length: u64,
    pub site: u64,
    pub boundary: PathBoundary,
    /// `counts[m]` = replicates with `m` visits.
    pub counts: Vec<u64>,
    pub truncations: u64,
    pub fit: ChiSquareResult,
}

/// Visits to `site` by the non-lazy path walk from `n` before it hits 0,
/// fitted against the exact law.
pub fn sample_path_local_times(n: u64, site: u64, boundary: PathBoundary, cfg: &MCConfig) -> Result<LocalTimeSample> {
    cfg.validate()?;
    let exact = local_time_law(n, site, boundary)?;
    let visits = cfg.run(|_, rng| {
        let (mut x, mut count, mut steps) = (n, 0u64, 0u64);
        while x != 0 {
            if steps == cfg.max_steps {
                return None;
            }
            if x == site {
                count += 1;
            }
            x = if x == n {
                match boundary {
                    PathBoundary::Hold => {
                        if rng.random::<bool>() {
                            n
                        } else {
                            n - 1
                        }
                    }
                    PathBoundary::Reflect => n - 1,
                }
            } else if rng.random::<bool>() {
                x + 1
            } else {
                x - 1
            };
            steps += 1;
        }
        Some(count)
    });
    let truncations = visits.iter().filter(|v| v.is_none()).count() as u64;
    let kept: Vec<u64> = visits.into_iter().flatten().collect();
    let max = kept.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0u64; max + 1];
    for &v in &kept {
        counts[v as usize] += 1;
    }
    let mut probs: Vec<f64> = (0..=max).map(|m| exact.pmf.get(m).map_or(0.0, |e| e.1)).collect();
    let covered: f64 = probs.iter().sum();
    *probs.last_mut().expect("non-empty") += (1.0 - covered).max(0.0);
    let fit = chi_square_gof(&counts, &probs, 5.0);
    Ok(LocalTimeSample { config: *cfg, path_length: n, site, boundary, counts, truncations, fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcursionSample {
    pub config: MCConfig,
    pub size: u64,
    pub convention: ExcursionConvention,
    pub length: MomentSummary,
    /// Moments of the squared length, i.e. the second-moment estimate.
    pub squared_length: MomentSummary,
    pub exact_mean: f64,
    pub exact_second_moment: f64,
    pub odd_lengths: u64,
    pub truncations: u64,
}

impl ExcursionSample {
    pub fn mean_z(&self) -> f64 {
        self.length.mean_z(self.exact_mean)
    }

    pub fn second_moment_z(&self) -> f64 {
        self.squared_length.mean_z(self.exact_second_moment)
    }
}

/// Samples root excursions of a complete binary tree under a convention.
pub fn excursion_sampler(size: u64, convention: ExcursionConvention, cfg: &MCConfig) -> Result<ExcursionSample> {
    cfg.validate()?;
    let exact = excursion_moments(size, convention)?;
    let g = TreeGraph::binary_tree(size, TreeMode::ExactSize, convention.leaf_self_loops)?;
    let laziness = if convention.lazy { 0.5 } else { 0.0 };
    let root = 0usize;
    let children: Vec<usize> = g.neighbor_list(root).iter().map(|&(y, _)| y).filter(|&y| y != root).collect();
    let lengths = cfg.run(|_, rng| {
        let mut x = match convention.context {
            RootContext::Isolated => walk_step(&g, laziness, root, rng),
            RootContext::InSitu => children[rng.random_range(0..children.len())],
        };
        let mut len = 1u64;
        while x != root {
            if len == cfg.max_steps {
                return None;
            }
            x = walk_step(&g, laziness, x, rng);
            len += 1;
        }
        Some(len)
    });
    let (mut length, mut squared) = (Moments::new(), Moments::new());
    let (mut odd, mut truncations) = (0u64, 0u64);
    for l in &lengths {
        match l {
            Some(l) => {
                length.push(*l as f64);
                squared.push((*l as f64) * (*l as f64));
                odd += l % 2;
            }
            None => truncations += 1,
        }
    }
    Ok(ExcursionSample {
        config: *cfg,
        size,
        convention,
        length: length.summary(),
        squared_length: squared.summary(),
        exact_mean: exact.mean,
        exact_second_moment: exact.second_moment,
        odd_lengths: odd,
        truncations,
    })
}

/// Phase entry times of one coupled run. Phases are (i) independent until X
/// hits the origin, (ii) independent until equal depth in the origin tree,
/// (iii) depth-synchronized until coalescence. A collision at any time
/// coalesces the walks; unreached phase marks then equal the coalescence time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingSample {
    pub hit_origin: u64,
    pub level_match: u64,
    /// Coupling time `tau`; equals `max_steps` when truncated.
    pub coalescence: u64,
    pub y_start: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub t: u64,
    /// Empirical `P(tau > t)`.
    pub probability: f64,
    pub standard_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingStats {
    pub config: MCConfig,
    pub x_start: usize,
    pub truncations: u64,
    /// Replicates whose walks differed after coalescence (must be 0).
    pub divergences: u64,
    pub tau: MomentSummary,
    pub tail: Vec<TailPoint>,
    /// How collisions are treated.
    pub collision_rule: String,
    #[serde(skip)]
    pub samples: Vec<CouplingSample>,
}

impl CouplingStats {
    /// CSV with columns `replicate,y_start,hit_origin,level_match,coalescence,truncated`.
    pub fn write_samples_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "replicate,y_start,hit_origin,level_match,coalescence,truncated")?;
        for (r, s) in self.samples.iter().enumerate() {
            writeln!(out, "{r},{},{},{},{},{}", s.y_start, s.hit_origin, s.level_match, s.coalescence, u8::from(s.truncated))?;
        }
        Ok(())
    }

    /// CSV with columns `t,p_tau_gt_t,se`.
    pub fn write_tail_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,p_tau_gt_t,se")?;
        for p in &self.tail {
            writeln!(out, "{},{:.17e},{:.17e}", p.t, p.probability, p.standard_error)?;
        }
        Ok(())
    }
}

/// Steps simulated after coalescence to confirm the walks stay together.
const POST_COALESCENCE_STEPS: u64 = 8;

/// Origin-tree depth of `v`, if `v` is in the origin tree.
fn origin_depth(g: &TreeGraph, origin: Option<(u32, u64)>, v: usize) -> Option<u32> {
    let (slot, root) = origin?;
    if v as u64 == root {
        return Some(0);
    }
    match g.tree_coordinates(v) {
        Some((s, h)) if s == slot => Some(63 - h.leading_zeros()),
        _ => None,
    }
}

/// Moves of X observed by the coupling, for faithfulness checks.
pub trait CouplingObserver {
    fn observe(&mut self, x_from: usize, x_to: usize, y_from: usize, y_to: usize);
}

impl CouplingObserver for () {
    fn observe(&mut self, _: usize, _: usize, _: usize, _: usize) {}
}

fn run_coupling<R: Rng, O: CouplingObserver>(
    chain: &ChainOperator<'_, TreeGraph>,
    x_start: usize,
    y_start: usize,
    max_steps: u64,
    rng: &mut R,
    observer: &mut O,
) -> (CouplingSample, bool) {
    let g = chain.graph();
    let laziness = chain.laziness();
    let origin = g.origin_slot().map(|s| (s, g.tree(s).root_position));
    let origin_vertex = origin.map(|(_, r)| r as usize);
    let (mut x, mut y) = (x_start, y_start);
    let mut sample = CouplingSample { hit_origin: u64::MAX, level_match: u64::MAX, coalescence: 0, y_start, truncated: false };
    let mut t = 0u64;
    let mut synchronized = false;
    while x != y {
        if t == max_steps {
            sample.truncated = true;
            break;
        }
        if sample.hit_origin == u64::MAX && Some(x) == origin_vertex {
            sample.hit_origin = t;
        }
        if sample.hit_origin != u64::MAX && !synchronized {
            if let (Some(a), Some(b)) = (origin_depth(g, origin, x), origin_depth(g, origin, y)) {
                if a == b {
                    synchronized = true;
                    sample.level_match = t;
                }
            }
        }
        let nx = walk_step(g, laziness, x, rng);
        let ny = if synchronized { mirrored_step(g, x, nx, y, rng) } else { walk_step(g, laziness, y, rng) };
        observer.observe(x, nx, y, ny);
        x = nx;
        y = ny;
        t += 1;
    }
    sample.coalescence = t;
    sample.hit_origin = sample.hit_origin.min(t);
    sample.level_match = sample.level_match.min(t);
    let mut diverged = false;
    if !sample.truncated {
        for _ in 0..POST_COALESCENCE_STEPS {
            let nx = walk_step(g, laziness, x, rng);
            observer.observe(x, nx, y, nx);
            x = nx;
            y = nx;
            diverged |= x != y;
        }
    }
    (sample, diverged)
}

/// Y's move when X moved `x -> nx` at equal origin-tree depth: hold with X,
/// go up with X, or go down to a uniformly chosen child when X goes down.
/// Vertices at equal depth in a perfect tree share their move probabilities,
/// so Y's marginal is still the lazy walk.
fn mirrored_step<R: Rng>(g: &TreeGraph, x: usize, nx: usize, y: usize, rng: &mut R) -> usize {
    let (_, hy) = g.tree_coordinates(y).expect("synchronized walks are below the root");
    let (slot, hx) = g.tree_coordinates(x).expect("synchronized walks are below the root");
    if nx == x {
        return y;
    }
    let parent_of_x = g.heap_id(slot, hx / 2);
    if nx == parent_of_x {
        return g.heap_id(slot, hy / 2);
    }
    g.heap_id(slot, 2 * hy + rng.random_range(0..2u64))
}

/// Runs the coupling from `x_start` with `Y_0 ~ pi`.
pub fn simulate_coupling(chain: &ChainOperator<'_, TreeGraph>, x_start: usize, cfg: &MCConfig, t_grid: &[u64]) -> Result<CouplingStats> {
    cfg.validate()?;
    let g = chain.graph();
    if x_start >= chain.state_count() {
        return Err(Error::Addressing(format!("start {x_start} outside 0..{}", chain.state_count())));
    }
    if g.origin_slot().is_some_and(|s| !g.tree(s).is_perfect()) {
        return Err(Error::Unsupported("depth-synchronized moves need a perfect origin tree".into()));
    }
    let max_degree = (0..chain.state_count()).map(|x| chain.degree(x)).max().unwrap_or(1);
    let runs = cfg.run(|_, rng| {
        let y0 = stationary_draw(chain, max_degree, rng);
        run_coupling(chain, x_start, y0, cfg.max_steps, rng, &mut ())
    });
    let divergences = runs.iter().filter(|r| r.1).count() as u64;
    let samples: Vec<CouplingSample> = runs.into_iter().map(|r| r.0).collect();
    let truncations = samples.iter().filter(|s| s.truncated).count() as u64;
    let mut tau = Moments::new();
    for s in samples.iter().filter(|s| !s.truncated) {
        tau.push(s.coalescence as f64);
    }
    let r = samples.len() as f64;
    let tail = t_grid
        .iter()
        .map(|&t| {
            // Truncated replicates have tau > max_steps >= t whenever t < max_steps.
            let above = samples.iter().filter(|s| s.coalescence > t || s.truncated).count() as f64;
            let p = above / r;
            TailPoint { t, probability: p, standard_error: (p * (1.0 - p) / r).sqrt() }
        })
        .collect();
    Ok(CouplingStats {
        config: *cfg,
        x_start,
        truncations,
        divergences,
        tau: tau.summary(),
        tail,
        collision_rule: "coalesce on any collision, in every phase".into(),
        samples,
    })
}

/// Transition counts `(from, to) -> count` of X and of Y over coupled runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionCounts {
    pub x: std::collections::BTreeMap<(usize, usize), u64>,
    pub y: std::collections::BTreeMap<(usize, usize), u64>,
}

impl CouplingObserver for TransitionCounts {
    fn observe(&mut self, x_from: usize, x_to: usize, y_from: usize, y_to: usize) {
        *self.x.entry((x_from, x_to)).or_default() += 1;
        *self.y.entry((y_from, y_to)).or_default() += 1;
    }
}

impl TransitionCounts {
    /// Smallest chi-square p-value over states with at least `min_visits`
    /// departures, testing observed moves against `P(x, .)`.
    pub fn worst_fit<G: Adjacency>(counts: &std::collections::BTreeMap<(usize, usize), u64>, chain: &ChainOperator<'_, G>, min_visits: u64) -> f64 {
        let mut worst = 1.0f64;
        for x in 0..chain.state_count() {
            let mut targets = Vec::new();
            let mut probs = Vec::new();
            chain.for_each_transition(x, |y, p| {
                if let Some(i) = targets.iter().position(|&t| t == y) {
                    probs[i] += p;
                } else {
                    targets.push(y);
                    probs.push(p);
                }
            });
            let observed: Vec<u64> = targets.iter().map(|&y| counts.get(&(x, y)).copied().unwrap_or(0)).collect();
            let total: u64 = observed.iter().sum();
            let departures: u64 = counts.range((x, 0)..(x + 1, 0)).map(|(_, c)| c).sum();
            if departures != total {
                return 0.0;
            }
            if total >= min_visits {
                worst = worst.min(chi_square_gof(&observed, &probs, 5.0).p_value);
            }
        }
        worst
    }
}

/// Sequential coupled runs recording every move of both walks.
pub fn coupling_transition_counts(chain: &ChainOperator<'_, TreeGraph>, x_start: usize, cfg: &MCConfig) -> Result<TransitionCounts> {
    cfg.validate()?;
    let max_degree = (0..chain.state_count()).map(|x| chain.degree(x)).max().unwrap_or(1);
    let mut counts = TransitionCounts::default();
    for r in 0..cfg.replicates {
        let mut rng = cfg.rng(r);
        let y0 = stationary_draw(chain, max_degree, &mut rng);
        run_coupling(chain, x_start, y0, cfg.max_steps, &mut rng, &mut counts);
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hitting::hitting_moments;
    use crate::topology::{build_family_tree, TreeFamilySpec};

    #[test]
    fn start_equal_to_target_takes_zero_steps() {
        let g = TreeGraph::path(4).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let s = sample_hitting_time(&c, 2, 2, &MCConfig::new(1, 50)).unwrap();
        assert!(s.samples.iter().all(|x| x.tau == 0));
    }

    #[test]
    fn path_of_four_non_lazy_mean_is_sixteen() {
        let g = TreeGraph::path(4).unwrap();
        let c = ChainOperator::non_lazy(&g).unwrap();
        let exact = hitting_moments(&c, &[0]).unwrap();
        assert_eq!(exact.mean_at(4), 16.0);
        let s = sample_hitting_time(&c, 4, 0, &MCConfig::new(11, 100_000).with_cap_from_mean(16.0)).unwrap();
        assert_eq!(s.truncations, 0);
        assert!(s.tau.mean_z(16.0).abs() < 3.0, "{:?}", s.tau);
        assert!(s.tau.variance_z(exact.variance_at(4).unwrap()).abs() < 3.0);
    }

    #[test]
    fn decomposition_identities_hold_per_replicate() {
        let g = build_family_tree(&TreeFamilySpec::canonical(1)).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let s = sample_hitting_time(&c, g.path_len() as usize, 0, &MCConfig::new(3, 500)).unwrap();
        assert_eq!(s.identity_violations, 0);
        assert!(s.samples.iter().all(|x| x.identities_hold() && x.local_times[1] >= 1));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let g = build_family_tree(&TreeFamilySpec::canonical(1)).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let cfg = MCConfig::new(99, 200);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_hitting_time(&c, g.path_len() as usize, 0, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn path_local_times_fit_the_exact_law() {
        let cfg = MCConfig::new(5, 20_000);
        for site in [1, 3, 4] {
            let s = sample_path_local_times(4, site, PathBoundary::Hold, &cfg).unwrap();
            assert!(s.fit.passes(0.001), "site {site}: {:?}", s.fit);
            assert_eq!(s.counts[0], 0);
        }
    }

    #[test]
    fn excursions_on_three_vertices() {
        let cfg = MCConfig::new(8, 20_000);
        let plain = ExcursionConvention { lazy: false, leaf_self_loops: false, context: RootContext::Isolated };
        let s = excursion_sampler(3, plain, &cfg).unwrap();
        assert_eq!(s.exact_mean, 2.0);
        assert_eq!(s.odd_lengths, 0);
        assert!(s.mean_z().abs() < 3.0 && s.second_moment_z().abs() < 3.0);
        let lazy = ExcursionConvention { lazy: true, context: RootContext::InSitu, ..plain };
        let l = excursion_sampler(3, lazy, &cfg).unwrap();
        assert!(l.mean_z().abs() < 3.0);
    }

    #[test]
    fn two_vertex_coupling_tail_is_geometric() {
        // Coalescence needs one walk to move and the other to hold: probability 1/2 per step.
        let g = TreeGraph::path(1).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let grid: Vec<u64> = (0..8).collect();
        let s = simulate_coupling(&c, 0, &MCConfig::new(4, 40_000), &grid).unwrap();
        assert_eq!(s.divergences, 0);
        // Y_0 = X_0 with probability 1/2, so P(tau > t) = (1/2)^(t+1).
        for p in &s.tail {
            let exact = 0.5f64.powi(p.t as i32 + 1);
            assert!((p.probability - exact).abs() <= 3.0 * p.standard_error.max(1e-3), "{p:?}");
        }
    }

    #[test]
    fn coupled_marginals_are_lazy_walks() {
        let g = build_family_tree(&TreeFamilySpec::canonical(1)).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let counts = coupling_transition_counts(&c, g.path_len() as usize, &MCConfig::new(21, 400)).unwrap();
        assert!(TransitionCounts::worst_fit(&counts.x, &c, 200) > 1e-4);
        assert!(TransitionCounts::worst_fit(&counts.y, &c, 200) > 1e-4);
    }

    #[test]
    fn coupling_phases_are_ordered() {
        let g = build_family_tree(&TreeFamilySpec::canonical(1)).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let s = simulate_coupling(&c, g.path_len() as usize, &MCConfig::new(2, 300), &[0, 10, 100]).unwrap();
        assert_eq!(s.truncations, 0);
        assert!(s.samples.iter().all(|x| x.hit_origin <= x.level_match && x.level_match <= x.coalescence));
    }
}
