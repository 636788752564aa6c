//! Relaxation time, bottleneck ratios and exact Poincaré constants.
//!
//! Dense eigensolves handle small chains. Larger graphs with perfect trees are
//! split into symmetry sectors (validated against the dense spectrum of a small
//! member of the same family); anything else falls back to deflated power
//! iteration. Best Poincaré constants with grounded vertices are reciprocals of
//! Dirichlet eigenvalues: `sup ||h||^2 / E(h, h) = 1 / (1 - lambda_max(P_U))`,
//! with `P_U` the walk restricted to the ungrounded states and both sides
//! measured in `L^2(pi)`.

use std::collections::BTreeMap;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{ChainOperator, TestFunction, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::linalg::{symmetric_eigenvalues, symmetrize};
use crate::mixing::SpectralDecomposition;
use crate::sectors::{self, Grounding, SectorModel};
use crate::stats::CompensatedSum;
use crate::topology::{build_family_tree, TreeFamilySpec, TreeGraph, TreeMode};

pub const POWER_MAX_ITERATIONS: u64 = 1_000_000;
/// Convergence on successive Rayleigh quotients.
pub const POWER_INCREMENT_TOLERANCE: f64 = 1e-12;
/// Convergence on `||A f - mu f||_pi`; its square bounds the eigenvalue error
/// up to the (unknown) separation from the rest of the spectrum.
pub const POWER_RESIDUAL_TOLERANCE: f64 = 1e-5;
/// Largest family member used to validate sector spectra densely.
pub const SECTOR_VALIDATION_LIMIT: u64 = 2_000;
/// Largest allowed eigenvalue disagreement between sectors and a dense solve.
pub const SECTOR_AGREEMENT: f64 = 1e-8;
const POWER_START_SEED: u64 = 0x7072_6c6d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralMethod {
    Dense,
    PowerIteration,
    Quotient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub states: u64,
    pub laziness: f64,
    pub lambda_2: f64,
    /// Smallest eigenvalue, when the method produces it.
    pub lambda_min: Option<f64>,
    pub lambda_star: f64,
    pub t_rel: f64,
    /// Set name to `Phi(S)`.
    pub bottleneck: BTreeMap<String, f64>,
    pub method: SpectralMethod,
    pub iterations: Option<u64>,
    pub residual: Option<f64>,
    pub sector_validation: Option<SectorValidation>,
}

impl SpectralReport {
    fn new(states: u64, laziness: f64, lambda_2: f64, lambda_min: Option<f64>, method: SpectralMethod) -> Result<Self> {
        let lambda_star = if laziness >= 0.5 {
            lambda_2
        } else {
            let low = lambda_min.ok_or_else(|| Error::Precondition("non-lazy chain needs the smallest eigenvalue".into()))?;
            lambda_2.abs().max(low.abs())
        };
        Ok(Self {
            states,
            laziness,
            lambda_2,
            lambda_min,
            lambda_star,
            t_rel: 1.0 / (1.0 - lambda_star),
            bottleneck: BTreeMap::new(),
            method,
            iterations: None,
            residual: None,
            sector_validation: None,
        })
    }

    /// Report from a full descending spectrum.
    pub fn from_dense_eigenvalues(values: &[f64], laziness: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Precondition("relaxation time needs at least two states".into()));
        }
        Self::new(values.len() as u64, laziness, values[1], values.last().copied(), SpectralMethod::Dense)
    }

    /// `t_rel >= 1 / (2 Phi)` for every recorded set, up to `1e-8` relative.
    pub fn cheeger_consistent(&self) -> bool {
        self.bottleneck.values().all(|&phi| phi <= 0.0 || self.t_rel >= (1.0 - 1e-8) / (2.0 * phi))
    }

    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.lambda_2
    }
}

/// Dense solve up to [`DENSE_LIMIT`] states, deflated power iteration beyond.
pub fn relaxation_time<G: Adjacency>(chain: &ChainOperator<'_, G>) -> Result<SpectralReport> {
    if chain.state_count() <= DENSE_LIMIT {
        dense_relaxation(chain)
    } else {
        power_relaxation(chain)
    }
}

pub fn dense_relaxation<G: Adjacency>(chain: &ChainOperator<'_, G>) -> Result<SpectralReport> {
    let pi = chain.stationary_distribution()?;
    let values = symmetric_eigenvalues(&symmetrize(&chain.to_dense()?, pi.values())?)?;
    SpectralReport::from_dense_eigenvalues(&values, chain.laziness())
}

/// Relaxation time on the family graph, with the origin-tree bottleneck
/// recorded. Chooses dense, sector or power-iteration methods by size.
pub fn relaxation_time_tree(chain: &ChainOperator<'_, TreeGraph>) -> Result<SpectralReport> {
    let g = chain.graph();
    let mut report = if chain.state_count() <= DENSE_LIMIT {
        dense_relaxation(chain)?
    } else {
        match sector_relaxation(chain) {
            Ok(r) => r,
            Err(e) => {
                log::info!("sector method unavailable ({e}); using power iteration");
                power_relaxation(chain)?
            }
        }
    };
    if g.origin_slot().is_some() {
        let (name, phi) = origin_bottleneck(chain)?;
        report.bottleneck.insert(name, phi);
    }
    Ok(report)
}

fn sector_relaxation(chain: &ChainOperator<'_, TreeGraph>) -> Result<SpectralReport> {
    let g = chain.graph();
    let spec = g.spec().ok_or_else(|| Error::Unsupported("sector validation needs a family spec".into()))?;
    if spec.mode != TreeMode::Perfect {
        return Err(Error::Unsupported("sector method needs perfect trees".into()));
    }
    let validation = validate_sectors_on_family(spec, chain.laziness())?;
    if !validation.passed {
        return Err(Error::Unsupported(format!(
            "sector spectrum disagrees with the dense one by {:e}",
            validation.max_eigenvalue_error
        )));
    }
    let model = SectorModel::new(chain)?;
    let spectrum = model.spectrum(&Grounding::default())?;
    let (second, smallest) = sectors::second_and_smallest(&spectrum)
        .ok_or_else(|| Error::Precondition("relaxation time needs at least two states".into()))?;
    let mut report = SpectralReport::new(g.vertex_count_u64(), chain.laziness(), second, Some(smallest), SpectralMethod::Quotient)?;
    report.sector_validation = Some(validation);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorValidation {
    /// Family member the check ran on.
    pub k: Option<u32>,
    pub states: u64,
    pub max_eigenvalue_error: f64,
    pub passed: bool,
}

/// Compares the multiset of sector eigenvalues with a dense eigensolve.
pub fn validate_sectors(chain: &ChainOperator<'_, TreeGraph>) -> Result<SectorValidation> {
    let pi = chain.stationary_distribution()?;
    let dense = symmetric_eigenvalues(&symmetrize(&chain.to_dense()?, pi.values())?)?;
    validate_sectors_against(chain, &dense)
}

/// As [`validate_sectors`], against an already computed descending spectrum.
pub fn validate_sectors_against(chain: &ChainOperator<'_, TreeGraph>, dense: &[f64]) -> Result<SectorValidation> {
    let n = chain.state_count();
    let spectrum = SectorModel::new(chain)?.spectrum(&Grounding::default())?;
    let split = sectors::expand(&spectrum, n as u64)?;
    let max_eigenvalue_error = if split.len() == dense.len() {
        split.iter().zip(dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    Ok(SectorValidation {
        k: chain.graph().spec().map(|s| s.k),
        states: n as u64,
        max_eigenvalue_error,
        passed: max_eigenvalue_error <= SECTOR_AGREEMENT,
    })
}

/// Runs [`validate_sectors`] on the largest member of the family (same
/// schedule, exponent and loops) that fits [`SECTOR_VALIDATION_LIMIT`].
fn validate_sectors_on_family(spec: &TreeFamilySpec, laziness: f64) -> Result<SectorValidation> {
    let mut k = spec.k;
    while k >= 1 {
        let small = TreeFamilySpec { k, ..spec.clone() };
        if let Ok(g) = build_family_tree(&small) {
            if g.vertex_count_u64() <= SECTOR_VALIDATION_LIMIT {
                return validate_sectors(&ChainOperator::new(&g, laziness)?);
            }
        }
        k -= 1;
    }
    Err(Error::Unsupported("no family member small enough to validate sectors".into()))
}

#[derive(Clone, Copy, Debug)]
struct PowerOutcome {
    eigenvalue: f64,
    iterations: u64,
    residual: f64,
}

/// Top eigenvalue of `A = (I + sign P) / 2` (or of `P` itself for lazy chains
/// and `sign = 1`) on the `pi`-orthogonal complement of the constants.
fn deflated_power<G: Adjacency>(chain: &ChainOperator<'_, G>, sign: f64) -> Result<PowerOutcome> {
    let n = chain.state_count();
    let pi: Vec<f64> = (0..n).map(|x| chain.pi(x)).collect();
    let plain = sign > 0.0 && chain.laziness() >= 0.5;
    let apply = |f: &[f64]| -> Result<Vec<f64>> {
        let pf = chain.apply(f)?;
        Ok(if plain { pf } else { f.iter().zip(pf).map(|(a, b)| 0.5 * (a + sign * b)).collect() })
    };
    let dot = |a: &[f64], b: &[f64]| {
        let mut s = CompensatedSum::new();
        for i in 0..n {
            s.add(pi[i] * a[i] * b[i]);
        }
        s.value()
    };
    let deflate_and_normalize = |f: &mut Vec<f64>| -> Result<()> {
        let mean = dot(f, &vec![1.0; n]);
        f.iter_mut().for_each(|x| *x -= mean);
        let norm = dot(f, f).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NoConvergence { iterations: 0, residual: f64::NAN });
        }
        f.iter_mut().for_each(|x| *x /= norm);
        Ok(())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_START_SEED);
    let mut f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    deflate_and_normalize(&mut f)?;
    let mut previous = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_MAX_ITERATIONS {
        let mut af = apply(&f)?;
        let mu = dot(&f, &af);
        let r: Vec<f64> = af.iter().zip(&f).map(|(a, b)| a - mu * b).collect();
        residual = dot(&r, &r).sqrt();
        if (mu - previous).abs() < POWER_INCREMENT_TOLERANCE && residual < POWER_RESIDUAL_TOLERANCE {
            let eigenvalue = if plain { mu } else { sign * (2.0 * mu - 1.0) };
            return Ok(PowerOutcome { eigenvalue, iterations: it, residual });
        }
        previous = mu;
        deflate_and_normalize(&mut af)?;
        f = af;
    }
    Err(Error::NoConvergence { iterations: POWER_MAX_ITERATIONS as usize, residual })
}

/// Deflated power iteration for `lambda_2` (and `lambda_min` for chains with
/// laziness below 1/2).
pub fn power_relaxation<G: Adjacency>(chain: &ChainOperator<'_, G>) -> Result<SpectralReport> {
    let top = deflated_power(chain, 1.0)?;
    let (low, iterations, residual) = if chain.laziness() >= 0.5 {
        (None, top.iterations, top.residual)
    } else {
        let bottom = deflated_power(chain, -1.0)?;
        (Some(bottom.eigenvalue), top.iterations + bottom.iterations, top.residual.max(bottom.residual))
    };
    let mut report =
        SpectralReport::new(chain.state_count() as u64, chain.laziness(), top.eigenvalue, low, SpectralMethod::PowerIteration)?;
    report.iterations = Some(iterations);
    report.residual = Some(residual);
    Ok(report)
}

/// `Phi(S) = sum_{x in S, y not in S} pi(x) P(x, y) / pi(S)`, for `0 < pi(S) <= 1/2`.
pub fn bottleneck_ratio<G: Adjacency>(chain: &ChainOperator<'_, G>, set: &[bool]) -> Result<f64> {
    if set.len() != chain.state_count() {
        return Err(Error::Dimension { left: set.len(), right: chain.state_count() });
    }
    let mut mass = CompensatedSum::new();
    let mut flow = CompensatedSum::new();
    for x in (0..set.len()).filter(|&x| set[x]) {
        let pi = chain.pi(x);
        mass.add(pi);
        chain.for_each_transition(x, |y, p| {
            if !set[y] {
                flow.add(pi * p);
            }
        });
    }
    let mass = mass.value();
    if mass <= 0.0 {
        return Err(Error::Precondition("bottleneck set has zero stationary mass".into()));
    }
    if mass > 0.5 + 1e-12 {
        return Err(Error::Precondition(format!("bottleneck set has stationary mass {mass} > 1/2; pass its complement")));
    }
    Ok(flow.value() / mass)
}

/// `Phi` of the origin tree, or of its complement when the tree carries more
/// than half the stationary mass. Returns the set's name with the ratio.
pub fn origin_bottleneck(chain: &ChainOperator<'_, TreeGraph>) -> Result<(String, f64)> {
    let g = chain.graph();
    let slot = g.origin_slot().ok_or_else(|| Error::Precondition("graph has no origin tree".into()))?;
    let mut mask = g.region_mask(slot);
    let mass: f64 = g.region_ids(slot).map(|x| chain.pi(x)).sum();
    let name = g.tree(slot).name.clone();
    if mass <= 0.5 {
        Ok((name, bottleneck_ratio(chain, &mask)?))
    } else {
        mask.iter_mut().for_each(|b| *b = !*b);
        Ok((format!("{name}^c"), bottleneck_ratio(chain, &mask)?))
    }
}

fn pi_norm_squared<G: Adjacency>(chain: &ChainOperator<'_, G>, f: &[f64]) -> f64 {
    let mut s = CompensatedSum::new();
    for (x, &v) in f.iter().enumerate() {
        s.add(chain.pi(x) * v * v);
    }
    s.value()
}

/// `||f||_pi^2 / E(f, f)` for `f` vanishing on `grounded`; `0` for `f = 0`.
pub fn grounded_rayleigh_quotient<G: Adjacency>(
    chain: &ChainOperator<'_, G>,
    f: &TestFunction,
    grounded: &[bool],
) -> Result<f64> {
    if grounded.len() != f.len() {
        return Err(Error::Dimension { left: grounded.len(), right: f.len() });
    }
    if let Some(x) = (0..f.len()).find(|&x| grounded[x] && f.values[x] != 0.0) {
        return Err(Error::Precondition(format!("test function is non-zero at grounded state {x}")));
    }
    let norm = pi_norm_squared(chain, &f.values);
    if norm == 0.0 {
        return Ok(0.0);
    }
    let energy = chain.dirichlet_form(f, f)?;
    if energy <= 0.0 {
        return Err(Error::Precondition("test function has zero energy".into()));
    }
    Ok(norm / energy)
}

/// Largest eigenvalue of the walk restricted to the ungrounded states, dense.
fn dense_grounded_top<G: Adjacency>(chain: &ChainOperator<'_, G>, grounded: &[bool]) -> Result<f64> {
    let free: Vec<usize> = (0..chain.state_count()).filter(|&x| !grounded[x]).collect();
    let mut index = vec![usize::MAX; chain.state_count()];
    for (i, &x) in free.iter().enumerate() {
        index[x] = i;
    }
    if free.len() > DENSE_LIMIT {
        return Err(Error::MemoryBudget { needed: free.len() as u64, budget: DENSE_LIMIT as u64 });
    }
    let mut p = Mat::<f64>::zeros(free.len(), free.len());
    for (i, &x) in free.iter().enumerate() {
        chain.for_each_transition(x, |y, q| {
            if index[y] != usize::MAX {
                p[(i, index[y])] += q;
            }
        });
    }
    let pi: Vec<f64> = free.iter().map(|&x| chain.pi(x)).collect();
    let values = symmetric_eigenvalues(&symmetrize(&p, &pi)?)?;
    values.first().copied().ok_or_else(|| Error::Precondition("every state is grounded".into()))
}

/// Random test functions of a few shapes, zero on `grounded`.
fn random_function(rng: &mut ChaCha8Rng, len: usize, grounded: &[bool], shape: usize, level: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut walk = 0.0;
    let slope = rng.random_range(-1.0..1.0);
    (0..len)
        .map(|x| {
            let v = match shape % 3 {
                0 => rng.random_range(-1.0..1.0),
                1 => {
                    walk += rng.random_range(-1.0..1.0);
                    walk
                }
                _ => slope * level(x) + 0.1 * rng.random_range(-1.0..1.0),
            };
            if grounded[x] {
                0.0
            } else {
                v
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineCheckReport {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    /// Largest `sum f^2 / (n^2 sum (f(l) - f(l-1))^2)` over the random functions.
    pub max_random_ratio: f64,
    /// The same ratio for `f(k) = k`.
    pub linear_ratio: f64,
    /// The same ratio for the Dirichlet maximizer, i.e. `exact_sup / n^2`.
    pub extremal_ratio: f64,
    pub exact_sup: f64,
    pub failures: usize,
    pub passes: bool,
}

/// `sum_{k=1}^n f(k)^2 / (n^2 sum_{l=1}^n (f(l) - f(l-1))^2)` with `f(0) = 0`.
fn line_ratio(f: &[f64]) -> f64 {
    let n = f.len();
    let lhs: f64 = f.iter().map(|x| x * x).sum();
    let mut rhs = 0.0;
    let mut prev = 0.0;
    for &x in f {
        rhs += (x - prev) * (x - prev);
        prev = x;
    }
    if lhs == 0.0 {
        0.0
    } else {
        lhs / ((n * n) as f64 * rhs)
    }
}

/// Checks the segment inequality on random functions, the linear function and
/// the exact maximizer (lowest eigenvector of the grounded segment Laplacian).
pub fn poincare_line_check(n: usize, trials: usize, seed: u64) -> Result<LineCheckReport> {
    if n == 0 {
        return Err(Error::Precondition("segment length must be at least 1".into()));
    }
    // Energy matrix of f(1..n): tridiagonal, free at n.
    let lap = Mat::<f64>::from_fn(n, n, |i, j| {
        if i == j {
            if i + 1 == n {
                1.0
            } else {
                2.0
            }
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        }
    });
    let (values, vectors) = crate::linalg::symmetric_eigen(&lap)?;
    let lowest = n - 1;
    let exact_sup = 1.0 / values[lowest];
    let maximizer: Vec<f64> = (0..n).map(|i| vectors[(i, lowest)]).collect();
    let extremal_ratio = line_ratio(&maximizer);
    let linear: Vec<f64> = (1..=n).map(|k| k as f64).collect();
    let linear_ratio = line_ratio(&linear);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free = vec![false; n];
    let mut max_random_ratio = 0.0f64;
    let mut failures = 0;
    for trial in 0..trials {
        let f = random_function(&mut rng, n, &free, trial, |x| (x + 1) as f64);
        let r = line_ratio(&f);
        max_random_ratio = max_random_ratio.max(r);
        if r > 1.0 + 1e-12 {
            failures += 1;
        }
    }
    let passes = failures == 0 && extremal_ratio <= 1.0 + 1e-12 && linear_ratio <= 1.0;
    Ok(LineCheckReport { n, trials, seed, max_random_ratio, linear_ratio, extremal_ratio, exact_sup, failures, passes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareRow {
    pub size: u64,
    pub exact_sup: f64,
    pub sup_over_size: f64,
    /// Dense Dirichlet solve, when small enough to run.
    pub dense_sup: Option<f64>,
    pub trials: usize,
    /// Largest random Rayleigh quotient divided by `exact_sup`.
    pub max_random_over_sup: f64,
}

impl PoincareRow {
    fn randoms_dominated(&self) -> bool {
        self.max_random_over_sup <= 1.0 + 1e-9
    }

    fn dense_agrees(&self) -> bool {
        self.dense_sup.map_or(true, |d| (d - self.exact_sup).abs() <= 1e-8 * self.exact_sup)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub rows: Vec<PoincareRow>,
    /// `max(sup/size) / min(sup/size)`.
    pub spread: f64,
    pub band: f64,
    pub passes: bool,
}

impl PoincareReport {
    fn from_rows(rows: Vec<PoincareRow>, band: f64, bound: Option<f64>) -> Self {
        let hi = rows.iter().map(|r| r.sup_over_size).fold(0.0, f64::max);
        let lo = rows.iter().map(|r| r.sup_over_size).fold(f64::INFINITY, f64::min);
        let spread = if rows.is_empty() { 1.0 } else { hi / lo };
        let passes = spread <= band
            && rows.iter().all(|r| r.randoms_dominated() && r.dense_agrees())
            && bound.map_or(true, |b| hi <= b);
        Self { rows, spread, band, passes }
    }

    /// CSV with columns `size,exact_sup,sup_over_size`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "size,exact_sup,sup_over_size")?;
        for r in &self.rows {
            writeln!(out, "{},{:.17e},{:.17e}", r.size, r.exact_sup, r.sup_over_size)?;
        }
        Ok(())
    }
}

/// Band on `sup / size` across sizes.
pub const POINCARE_BAND: f64 = 16.0;
/// Bound on `sup / N` for the complement of the origin tree.
pub const COMPLEMENT_BOUND: f64 = 64.0;

/// Exact best constants `sup_{g(root) = 0} ||g||^2 / E(g, g)` for the non-lazy
/// walk on perfect binary trees of the given sizes.
pub fn poincare_tree_check(sizes: &[u64], trials: usize, seed: u64) -> Result<PoincareReport> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &m in sizes {
        if m < 3 || (m + 1) & m != 0 {
            return Err(Error::Precondition(format!("tree size {m} is not 2^d - 1 with d >= 2")));
        }
        let g = TreeGraph::binary_tree(m, TreeMode::Perfect, false)?;
        let chain = ChainOperator::non_lazy(&g)?;
        let grounding = Grounding { path: vec![0], trees: vec![] };
        let spectrum = SectorModel::new(&chain)?.spectrum(&grounding)?;
        let top = sectors::largest(&spectrum).ok_or_else(|| Error::Precondition("every state is grounded".into()))?;
        let exact_sup = 1.0 / (1.0 - top);
        let mut grounded = vec![false; g.vertex_count()];
        grounded[0] = true;
        let dense_sup = if g.vertex_count() <= 2048 { Some(1.0 / (1.0 - dense_grounded_top(&chain, &grounded)?)) } else { None };
        let max_random = random_grounded_ratios(&chain, &grounded, trials, seed ^ m)?;
        rows.push(PoincareRow {
            size: m,
            exact_sup,
            sup_over_size: exact_sup / m as f64,
            dense_sup,
            trials,
            max_random_over_sup: max_random / exact_sup,
        });
    }
    Ok(PoincareReport::from_rows(rows, POINCARE_BAND, None))
}

fn random_grounded_ratios<G: Adjacency + DepthHint>(
    chain: &ChainOperator<'_, G>,
    grounded: &[bool],
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.state_count();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let f = random_function(&mut rng, n, grounded, trial, |x| chain.graph().depth_hint(x));
        worst = worst.max(grounded_rayleigh_quotient(chain, &TestFunction::new(f)?, grounded)?);
    }
    Ok(worst)
}

/// A coarse coordinate for smooth random test functions.
trait DepthHint {
    fn depth_hint(&self, v: usize) -> f64;
}

impl DepthHint for TreeGraph {
    fn depth_hint(&self, v: usize) -> f64 {
        if self.is_path_vertex(v) {
            -(v as f64) / (self.path_len().max(1) as f64)
        } else {
            self.tree_depth(v) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplementReport {
    pub k: u32,
    pub mass: u64,
    pub states: u64,
    pub row: PoincareRow,
    pub passes: bool,
}

/// Exact `sup ||h||^2 / E(h, h)` over `h` vanishing on the origin tree, for
/// the lazy walk on the family graph.
pub fn complement_poincare_check(spec: &TreeFamilySpec, trials: usize, seed: u64) -> Result<ComplementReport> {
    let g = build_family_tree(spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let slot = g.origin_slot().ok_or_else(|| Error::Precondition("graph has no origin tree".into()))?;
    let grounded = g.region_mask(slot);
    let dense_top = if g.vertex_count() <= DENSE_LIMIT { Some(dense_grounded_top(&chain, &grounded)?) } else { None };
    let top = match SectorModel::new(&chain) {
        Ok(model) => {
            let grounding = Grounding { path: vec![g.tree(slot).root_position], trees: vec![slot] };
            sectors::largest(&model.spectrum(&grounding)?).ok_or_else(|| Error::Precondition("every state is grounded".into()))?
        }
        Err(e) => dense_top.ok_or(e)?,
    };
    let exact_sup = 1.0 / (1.0 - top);
    let mass = spec.mass()?;
    let max_random = random_grounded_ratios(&chain, &grounded, trials, seed)?;
    let row = PoincareRow {
        size: mass,
        exact_sup,
        sup_over_size: exact_sup / mass as f64,
        dense_sup: dense_top.map(|t| 1.0 / (1.0 - t)),
        trials,
        max_random_over_sup: max_random / exact_sup,
    };
    let passes = row.sup_over_size <= COMPLEMENT_BOUND && row.randoms_dominated() && row.dense_agrees();
    Ok(ComplementReport { k: spec.k, mass, states: g.vertex_count_u64(), row, passes })
}

/// Combines per-k complement reports into a band check on `sup / N`.
pub fn complement_band(reports: &[ComplementReport]) -> PoincareReport {
    PoincareReport::from_rows(reports.iter().map(|r| r.row.clone()).collect(), POINCARE_BAND, Some(COMPLEMENT_BOUND))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    pub lambda_2: f64,
    /// `1 / (1 - lambda_2)`.
    pub inverse_gap: f64,
    /// `Var_pi(f) / E(f, f)` at the second eigenvector.
    pub rayleigh_sup: f64,
    pub relative_error: f64,
    pub trials: usize,
    /// Largest `Var_pi(f) / (E(f, f) / (1 - lambda_2))` over random `f`.
    pub max_random_ratio: f64,
    pub min_energy: f64,
    pub passes: bool,
}

/// Tolerance on `1/(1 - lambda_2)` against the Rayleigh quotient at the maximizer.
pub const VARIATIONAL_TOLERANCE: f64 = 1e-8;

pub fn variational_gap_check<G: Adjacency>(chain: &ChainOperator<'_, G>, trials: usize, seed: u64) -> Result<VariationalReport> {
    let decomposition = SpectralDecomposition::from_chain(chain)?;
    variational_gap_check_with(chain, &decomposition, trials, seed)
}

/// As [`variational_gap_check`], reusing an existing decomposition of `chain`.
pub fn variational_gap_check_with<G: Adjacency>(
    chain: &ChainOperator<'_, G>,
    decomposition: &SpectralDecomposition,
    trials: usize,
    seed: u64,
) -> Result<VariationalReport> {
    let n = chain.state_count();
    if decomposition.len() != n || n < 2 {
        return Err(Error::Dimension { left: decomposition.len(), right: n });
    }
    let lambda_2 = decomposition.eigenvalues()[1];
    let inverse_gap = 1.0 / (1.0 - lambda_2);
    let pi = decomposition.pi();
    let maximizer: Vec<f64> = (0..n).map(|x| decomposition.vectors()[(x, 1)] / pi[x].sqrt()).collect();
    let f = TestFunction::new(maximizer)?;
    let rayleigh_sup = chain.variance_under_pi(&f)? / chain.dirichlet_form(&f, &f)?;
    let relative_error = (rayleigh_sup - inverse_gap).abs() / inverse_gap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free = vec![false; n];
    let mut max_random_ratio = 0.0f64;
    let mut min_energy = f64::INFINITY;
    for trial in 0..trials {
        let f = TestFunction::new(random_function(&mut rng, n, &free, trial, |x| x as f64 / n as f64))?;
        let energy = chain.dirichlet_form(&f, &f)?;
        min_energy = min_energy.min(energy);
        if energy > 0.0 {
            max_random_ratio = max_random_ratio.max(chain.variance_under_pi(&f)? / (inverse_gap * energy));
        }
    }
    let passes = relative_error <= VARIATIONAL_TOLERANCE && min_energy >= 0.0 && max_random_ratio <= 1.0 + 1e-9;
    Ok(VariationalReport {
        lambda_2,
        inverse_gap,
        rayleigh_sup,
        relative_error,
        trials,
        max_random_ratio,
        min_energy: if trials == 0 { 0.0 } else { min_energy },
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeListGraph;

    #[test]
    fn single_lazy_edge() {
        let g = EdgeListGraph::path(1);
        let c = ChainOperator::lazy(&g).unwrap();
        let r = relaxation_time(&c).unwrap();
        assert!(r.lambda_2.abs() < 1e-15);
        assert!((r.t_rel - 1.0).abs() < 1e-14);
        assert_eq!(r.method, SpectralMethod::Dense);
        // Edge flow pi(0) P(0, 1) = 1/4, divided by pi(S) = 1/2.
        let phi = bottleneck_ratio(&c, &[true, false]).unwrap();
        assert!((phi - 0.5).abs() < 1e-15);
        let v = variational_gap_check(&c, 10, 1).unwrap();
        assert!((v.rayleigh_sup - 1.0).abs() < 1e-12 && v.passes);
    }

    #[test]
    fn three_path_power_iteration_matches_dense() {
        let g = EdgeListGraph::path(2);
        let c = ChainOperator::lazy(&g).unwrap();
        let dense = dense_relaxation(&c).unwrap();
        let power = power_relaxation(&c).unwrap();
        // Lazy spectrum of the 3-path is {1, 1/2, 0}.
        assert!((dense.lambda_2 - 0.5).abs() < 1e-12);
        assert!((power.lambda_2 - dense.lambda_2).abs() < 1e-10);
        let v = variational_gap_check(&c, 100, 3).unwrap();
        assert!(v.relative_error < 1e-10);
    }

    #[test]
    fn non_lazy_path_reports_both_ends_of_the_spectrum() {
        let g = EdgeListGraph::path(5);
        let c = ChainOperator::non_lazy(&g).unwrap();
        let dense = dense_relaxation(&c).unwrap();
        // Non-lazy SRW on a path is bipartite: lambda_min = -1.
        assert!((dense.lambda_min.unwrap() + 1.0).abs() < 1e-12);
        assert!(dense.t_rel > 1e10 || dense.t_rel.is_infinite());
    }

    #[test]
    fn bottleneck_of_isolated_component_is_zero() {
        let g = EdgeListGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        assert_eq!(bottleneck_ratio(&c, &[true, true, false, false]).unwrap(), 0.0);
        assert!(bottleneck_ratio(&c, &[true, true, true, false]).is_err());
    }

    #[test]
    fn line_check_small_cases() {
        let r = poincare_line_check(64, 1000, 7).unwrap();
        assert!(r.passes);
        assert!(r.max_random_ratio <= r.extremal_ratio + 1e-12);
        // f(k) = k: (n+1)(2n+1) / (6 n^2).
        let n = 64.0;
        assert!((r.linear_ratio - (n + 1.0) * (2.0 * n + 1.0) / (6.0 * n * n)).abs() < 1e-14);
        // Grounded segment Laplacian: lowest eigenvalue 4 sin^2(pi / (2 (2n + 1))).
        let lowest = 4.0 * (std::f64::consts::PI / (2.0 * (2.0 * n + 1.0))).sin().powi(2);
        assert!((r.exact_sup * lowest - 1.0).abs() < 1e-10);
        assert_eq!(line_ratio(&[0.0; 5]), 0.0);
        assert!(poincare_line_check(0, 1, 1).is_err());
    }

    #[test]
    fn tree_check_three_vertices_matches_two_by_two_solve() {
        // Root grounded; both leaves only step to the root, so P_U = 0 and sup = 1.
        let r = poincare_tree_check(&[3], 50, 1).unwrap();
        assert!((r.rows[0].exact_sup - 1.0).abs() < 1e-12);
        assert!((r.rows[0].dense_sup.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tree_check_rejects_non_perfect_sizes_and_ungrounded_functions() {
        assert!(poincare_tree_check(&[10], 1, 1).is_err());
        let g = TreeGraph::binary_tree(7, TreeMode::Perfect, false).unwrap();
        let c = ChainOperator::non_lazy(&g).unwrap();
        let mut grounded = vec![false; 7];
        grounded[0] = true;
        let constant = TestFunction::constant(7, 1.0);
        assert!(matches!(grounded_rayleigh_quotient(&c, &constant, &grounded), Err(Error::Precondition(_))));
        assert_eq!(grounded_rayleigh_quotient(&c, &TestFunction::constant(7, 0.0), &grounded).unwrap(), 0.0);
    }

    #[test]
    fn sector_spectrum_matches_dense_on_small_family() {
        for spec in [TreeFamilySpec::canonical(1), TreeFamilySpec::geometric(1, 4), TreeFamilySpec::canonical(1).with_leaf_self_loops(true)] {
            let g = build_family_tree(&spec).unwrap();
            for laziness in [0.0, 0.5] {
                let c = ChainOperator::new(&g, laziness).unwrap();
                let v = validate_sectors(&c).unwrap();
                assert!(v.passed, "{spec:?} {laziness}: {}", v.max_eigenvalue_error);
            }
        }
    }

    #[test]
    fn grounded_sectors_match_dense_dirichlet_problem() {
        let g = build_family_tree(&TreeFamilySpec::canonical(1)).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let slot = g.origin_slot().unwrap();
        let grounded = g.region_mask(slot);
        let dense = dense_grounded_top(&c, &grounded).unwrap();
        let grounding = Grounding { path: vec![0], trees: vec![slot] };
        let split = sectors::largest(&SectorModel::new(&c).unwrap().spectrum(&grounding).unwrap()).unwrap();
        assert!((dense - split).abs() < 1e-12);
    }

    #[test]
    fn tree_sups_grow_linearly() {
        let r = poincare_tree_check(&[7, 15, 31, 63], 200, 5).unwrap();
        assert!(r.spread <= 4.0, "{r:?}");
        assert!(r.passes);
    }
}
