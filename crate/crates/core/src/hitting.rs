//! Exact hitting-time moments on trees, excursion moments and local-time laws.
//!
//! On a tree with a connected target set every vertex has a unique parent on
//! its way to the target, and the expected value of an additive functional
//! `sum_{s < tau} r(X_s)` satisfies
//!
//! `u(v) = u(parent(v)) + sum_{w in subtree(v)} deg(w) r(w) / (1 - laziness)`.
//!
//! `r = 1` gives the mean hitting time and `r = 2h - 1` the second moment.
//! All sums have non-negative terms, so the computation is stable in O(states).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::chain::ChainOperator;
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::linalg::solve_tridiagonal;
use crate::topology::{TreeGraph, TreeMode};

/// Largest acceptable relative first-step residual.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct HittingMoments {
    pub target: Vec<usize>,
    pub mean: Vec<f64>,
    pub second_moment: Option<Vec<f64>>,
    /// Largest relative residual of the first-step equations.
    pub max_residual: f64,
}

impl HittingMoments {
    pub fn mean_at(&self, x: usize) -> f64 {
        self.mean[x]
    }

    pub fn second_moment_at(&self, x: usize) -> Option<f64> {
        self.second_moment.as_ref().map(|u| u[x])
    }

    pub fn variance_at(&self, x: usize) -> Option<f64> {
        self.second_moment_at(x).map(|u| (u - self.mean[x] * self.mean[x]).max(0.0))
    }

    /// CSV with columns `start,mean,variance` for the given starts.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, starts: &[(String, usize)]) -> Result<()> {
        writeln!(out, "start,mean,variance")?;
        for (label, x) in starts {
            let var = self.variance_at(*x).map_or(String::new(), |v| format!("{v:e}"));
            writeln!(out, "{label},{:e},{var}", self.mean[*x])?;
        }
        Ok(())
    }
}

struct TargetForest {
    in_target: Vec<bool>,
    /// Non-target vertices in BFS order from the target.
    order: Vec<u32>,
    parent: Vec<u32>,
}

fn target_forest<G: Adjacency>(graph: &G, target: &[usize]) -> Result<TargetForest> {
    let n = graph.vertex_count();
    if target.is_empty() {
        return Err(Error::Precondition("hitting target is empty".into()));
    }
    if n > u32::MAX as usize {
        return Err(Error::Unsupported(format!("{n} states exceed the solver's index range")));
    }
    if graph.edge_count() + 1 != n as u64 {
        return Err(Error::Precondition("tree solver requires an acyclic graph".into()));
    }
    let mut in_target = vec![false; n];
    for &t in target {
        if t >= n {
            return Err(Error::Addressing(format!("target state {t} outside 0..{n}")));
        }
        in_target[t] = true;
    }
    let target_size = in_target.iter().filter(|&&b| b).count();
    let distinct: std::collections::BTreeSet<usize> = target.iter().copied().collect();
    let mut inner = 0usize;
    for &t in &distinct {
        graph.for_each_neighbor(t, |y, _| {
            if y != t && in_target[y] {
                inner += 1;
            }
        });
    }
    if inner / 2 + 1 != target_size {
        return Err(Error::Precondition("tree solver requires a connected target set".into()));
    }
    let mut parent = vec![u32::MAX; n];
    let mut seen = in_target.clone();
    let mut order = Vec::with_capacity(n - target_size);
    let mut queue: VecDeque<usize> = distinct.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        graph.for_each_neighbor(v, |y, _| {
            if !seen[y] {
                seen[y] = true;
                parent[y] = v as u32;
                order.push(y as u32);
                queue.push_back(y);
            }
        });
    }
    if order.len() + target_size != n {
        return Err(Error::Disconnected { reached: order.len() + target_size, total: n });
    }
    Ok(TargetForest { in_target, order, parent })
}

/// Accumulates `u(v) = u(parent) + subtree_sum(deg * reward) / (1 - laziness)`.
fn accumulate<G: Adjacency>(chain: &ChainOperator<'_, G>, forest: &TargetForest, reward: impl Fn(usize) -> f64) -> Vec<f64> {
    let n = chain.state_count();
    let mut sub = vec![0.0f64; n];
    for &v in forest.order.iter().rev() {
        let v = v as usize;
        sub[v] += chain.degree(v) as f64 * reward(v);
        let p = forest.parent[v] as usize;
        if !forest.in_target[p] {
            sub[p] += sub[v];
        }
    }
    let scale = 1.0 / (1.0 - chain.laziness());
    let mut u = vec![0.0f64; n];
    for &v in &forest.order {
        let v = v as usize;
        u[v] = u[forest.parent[v] as usize] + sub[v] * scale;
    }
    u
}

/// Largest relative residual of `u(x) = r(x) + sum_y P(x,y) u(y)` off the target.
fn first_step_residual<G: Adjacency>(
    chain: &ChainOperator<'_, G>,
    forest: &TargetForest,
    u: &[f64],
    reward: impl Fn(usize) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &x in &forest.order {
        let x = x as usize;
        let mut acc = reward(x);
        chain.for_each_transition(x, |y, p| acc += p * u[y]);
        let scale = u[x].abs().max(1.0);
        worst = worst.max((u[x] - acc).abs() / scale);
    }
    worst
}

/// Expected hitting times of `target` from every state.
pub fn hitting_mean<G: Adjacency>(chain: &ChainOperator<'_, G>, target: &[usize]) -> Result<HittingMoments> {
    let forest = target_forest(chain.graph(), target)?;
    let mean = accumulate(chain, &forest, |_| 1.0);
    let residual = first_step_residual(chain, &forest, &mean, |_| 1.0);
    if residual > RESIDUAL_TOLERANCE {
        return Err(Error::Solver { residual });
    }
    Ok(HittingMoments { target: target.to_vec(), mean, second_moment: None, max_residual: residual })
}

/// Mean and second moment of the hitting time of `target` from every state.
pub fn hitting_moments<G: Adjacency>(chain: &ChainOperator<'_, G>, target: &[usize]) -> Result<HittingMoments> {
    let forest = target_forest(chain.graph(), target)?;
    let mean = accumulate(chain, &forest, |_| 1.0);
    let r1 = first_step_residual(chain, &forest, &mean, |_| 1.0);
    let second = accumulate(chain, &forest, |v| 2.0 * mean[v] - 1.0);
    let r2 = first_step_residual(chain, &forest, &second, |v| 2.0 * mean[v] - 1.0);
    let residual = r1.max(r2);
    if residual > RESIDUAL_TOLERANCE {
        return Err(Error::Solver { residual });
    }
    Ok(HittingMoments { target: target.to_vec(), mean, second_moment: Some(second), max_residual: residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub start: usize,
    pub mean_non_lazy: f64,
    pub variance_non_lazy: f64,
    pub mean_lazy: f64,
    pub variance_lazy: f64,
    /// `|E_lazy - 2 E| / (2 E)`.
    pub mean_discrepancy: f64,
    /// `|Var_lazy - (4 Var + 2 E)| / (4 Var + 2 E)`.
    pub variance_discrepancy: f64,
}

impl TransferReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.mean_discrepancy <= tolerance && self.variance_discrepancy <= tolerance
    }
}

/// Compares hitting moments of the non-lazy walk with those of the `(P+I)/2` walk.
pub fn laziness_transfer_check<G: Adjacency>(
    non_lazy: &ChainOperator<'_, G>,
    target: &[usize],
    start: usize,
) -> Result<TransferReport> {
    if non_lazy.laziness() != 0.0 {
        return Err(Error::Precondition("transfer check needs the non-lazy chain".into()));
    }
    let lazy = ChainOperator::lazy(non_lazy.graph())?;
    let a = hitting_moments(non_lazy, target)?;
    let b = hitting_moments(&lazy, target)?;
    let (e, v) = (a.mean_at(start), a.variance_at(start).expect("second moment"));
    let (el, vl) = (b.mean_at(start), b.variance_at(start).expect("second moment"));
    let rel = |x: f64, y: f64| if y == 0.0 { x.abs() } else { (x - y).abs() / y.abs() };
    Ok(TransferReport {
        start,
        mean_non_lazy: e,
        variance_non_lazy: v,
        mean_lazy: el,
        variance_lazy: vl,
        mean_discrepancy: rel(el, 2.0 * e),
        variance_discrepancy: rel(vl, 4.0 * v + 2.0 * e),
    })
}

/// Where the tree's root sits while the excursion is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootContext {
    /// The tree alone; the excursion is the return time to the root.
    Isolated,
    /// The root is a degree-4 path vertex; the excursion starts with a forced
    /// step into a uniformly chosen child and ends at the return to the root.
    InSitu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExcursionConvention {
    pub lazy: bool,
    pub leaf_self_loops: bool,
    pub context: RootContext,
}

impl ExcursionConvention {
    pub fn all() -> Vec<ExcursionConvention> {
        let mut out = Vec::new();
        for context in [RootContext::Isolated, RootContext::InSitu] {
            for leaf_self_loops in [false, true] {
                for lazy in [false, true] {
                    out.push(ExcursionConvention { lazy, leaf_self_loops, context });
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            if self.lazy { "lazy" } else { "non_lazy" },
            if self.leaf_self_loops { "loops" } else { "no_loops" },
            match self.context {
                RootContext::Isolated => "isolated",
                RootContext::InSitu => "in_situ",
            }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcursionMoments {
    pub size: u64,
    pub convention: ExcursionConvention,
    pub mean: f64,
    pub second_moment: f64,
    /// `(3n - 1) / 2`.
    pub reference_mean: f64,
    pub matches_reference: bool,
}

/// Exact excursion moments for a complete binary tree on `size` vertices.
pub fn excursion_moments(size: u64, convention: ExcursionConvention) -> Result<ExcursionMoments> {
    if size < 3 {
        return Err(Error::Precondition(format!("excursion tree needs at least 3 vertices, got {size}")));
    }
    let g = TreeGraph::binary_tree(size, TreeMode::ExactSize, convention.leaf_self_loops)?;
    let chain = ChainOperator::new(&g, if convention.lazy { 0.5 } else { 0.0 })?;
    let root = 0usize;
    let m = hitting_moments(&chain, &[root])?;
    let h = &m.mean;
    let u = m.second_moment.as_ref().expect("second moment");
    let (mean, second_moment) = match convention.context {
        RootContext::Isolated => {
            let (mut e, mut e2) = (0.0, 0.0);
            chain.for_each_transition(root, |y, p| {
                e += p * (1.0 + h[y]);
                e2 += p * (1.0 + 2.0 * h[y] + u[y]);
            });
            (e, e2)
        }
        RootContext::InSitu => {
            let children: Vec<usize> = g.neighbor_list(root).iter().map(|&(y, _)| y).filter(|&y| y != root).collect();
            let w = 1.0 / children.len() as f64;
            let e = children.iter().map(|&c| w * (1.0 + h[c])).sum();
            let e2 = children.iter().map(|&c| w * (1.0 + 2.0 * h[c] + u[c])).sum();
            (e, e2)
        }
    };
    let reference_mean = (3.0 * size as f64 - 1.0) / 2.0;
    Ok(ExcursionMoments {
        size,
        convention,
        mean,
        second_moment,
        reference_mean,
        matches_reference: (mean - reference_mean).abs() <= 1e-9 * reference_mean,
    })
}

/// Endpoint behaviour of the path `[0, n]` at `n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathBoundary {
    /// `P(n, n) = P(n, n-1) = 1/2`: the far end behaves like an interior
    /// vertex whose right-hand side immediately returns.
    #[default]
    Hold,
    /// `P(n, n-1) = 1`.
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeReport {
    pub path_length: u64,
    pub site: u64,
    pub boundary: PathBoundary,
    /// `P_n(site is visited before 0)`.
    pub reach_probability: f64,
    /// Escape probability per visit: `P_site(hit 0 before returning)`.
    pub escape_probability: f64,
    /// `1 / (2 site)`.
    pub reference_parameter: f64,
    /// `(m, exact P(L = m), Geometric(1/(2 site)) pmf at m)`, `m >= 0`.
    pub pmf: Vec<(u64, f64, f64)>,
    pub max_pmf_error: f64,
    pub mean: f64,
}

/// Harmonic function on `[0, n]` for the non-lazy path walk with the given
/// Dirichlet values, computed by a tridiagonal solve.
fn path_harmonic(n: u64, boundary: PathBoundary, fixed: &[(u64, f64)]) -> Result<Vec<f64>> {
    let len = n as usize + 1;
    let (mut lower, mut diag, mut upper, mut rhs) = (vec![0.0; len], vec![1.0; len], vec![0.0; len], vec![0.0; len]);
    for x in 0..len {
        if let Some(&(_, v)) = fixed.iter().find(|(s, _)| *s as usize == x) {
            rhs[x] = v;
            continue;
        }
        // x - sum_y P(x, y) h(y) = 0
        if x as u64 == n {
            match boundary {
                PathBoundary::Hold => {
                    diag[x] = 0.5;
                    lower[x] = -0.5;
                }
                PathBoundary::Reflect => lower[x] = -1.0,
            }
        } else {
            lower[x] = -0.5;
            upper[x] = -0.5;
        }
    }
    solve_tridiagonal(&lower, &diag, &upper, &rhs)
}

/// Exact law of the number of visits to `site` before hitting 0, starting at
/// `n`, for the non-lazy path walk. The start counts as a visit when `site = n`.
pub fn local_time_law(n: u64, site: u64, boundary: PathBoundary) -> Result<LocalTimeReport> {
    if n < 1 || site < 1 || site > n {
        return Err(Error::Precondition(format!("need 1 <= site <= n, got site {site}, n {n}")));
    }
    let reach = path_harmonic(n, boundary, &[(0, 0.0), (site, 1.0)])?;
    let escape = path_harmonic(n, boundary, &[(0, 1.0), (site, 0.0)])?;
    let s = site as usize;
    let q = if site == n {
        match boundary {
            PathBoundary::Hold => 0.5 * escape[s - 1],
            PathBoundary::Reflect => escape[s - 1],
        }
    } else {
        0.5 * escape[s - 1] + 0.5 * escape[s + 1]
    };
    let a = reach[n as usize];
    let p = 1.0 / (2.0 * site as f64);
    let mut pmf = vec![(0, 1.0 - a, 0.0)];
    let mut exact = a * q;
    let mut geo = p;
    let mut m = 1u64;
    while (exact > 1e-16 || geo > 1e-16) && m <= 1_000_000 {
        pmf.push((m, exact, geo));
        exact *= 1.0 - q;
        geo *= 1.0 - p;
        m += 1;
    }
    let max_pmf_error = pmf.iter().map(|&(_, e, g)| (e - g).abs()).fold(0.0, f64::max);
    Ok(LocalTimeReport {
        path_length: n,
        site,
        boundary,
        reach_probability: a,
        escape_probability: q,
        reference_parameter: p,
        pmf,
        max_pmf_error,
        mean: a / q,
    })
}
