//! The (lazy) simple random walk as a row-stochastic operator.
//!
//! With laziness `l`, the walk holds with probability `l` and otherwise moves
//! to a neighbor chosen proportionally to edge weight, so
//! `P(x, y) = l [x = y] + (1 - l) w(x, y) / deg(x)`. The default `l = 1/2`
//! gives `(P + I) / 2`.

use std::io::Write;

use faer::Mat;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::stats::{compensated_sum, CompensatedSum};

pub const DEFAULT_LAZINESS: f64 = 0.5;
/// Sequential powering renormalizes the total mass this often.
pub const RENORMALIZE_EVERY: u64 = 10_000;
/// Largest state count for which `to_dense` will allocate.
pub const DENSE_LIMIT: usize = 12_000;

const PAR_CHUNK: usize = 1 << 14;

/// A probability distribution over the states `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    /// Checks non-negativity and unit total mass (within `1e-12`).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Precondition(format!("mass {} at state {i} is not a probability", values[i])));
        }
        let total = compensated_sum(values.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!("total mass {total} differs from 1")));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn point_mass(len: usize, state: usize) -> Result<Self> {
        if state >= len {
            return Err(Error::Addressing(format!("state {state} outside 0..{len}")));
        }
        let mut values = vec![0.0; len];
        values[state] = 1.0;
        Ok(Self { values })
    }

    pub fn uniform(len: usize) -> Self {
        Self { values: vec![1.0 / len as f64; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.values.iter().copied())
    }

    /// Mass of the states where `mask` is true.
    pub fn mass_of(&self, mask: &[bool]) -> f64 {
        compensated_sum(self.values.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x))
    }

    pub fn max_abs_diff(&self, other: &ProbVector) -> Result<f64> {
        check_dims(self.len(), other.len())?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// CSV with columns `state,region,mass`.
    pub fn write_csv<G: Adjacency, W: Write>(&self, graph: &G, mut out: W) -> Result<()> {
        check_dims(self.len(), graph.vertex_count())?;
        writeln!(out, "state,region,mass")?;
        for (i, x) in self.values.iter().enumerate() {
            writeln!(out, "{i},{},{x:e}", graph.region_name(i))?;
        }
        Ok(())
    }
}

/// A real function on the states.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    pub values: Vec<f64>,
}

impl TestFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Precondition(format!("test function is not finite at state {i}")));
        }
        Ok(Self { values })
    }

    pub fn constant(len: usize, c: f64) -> Self {
        Self { values: vec![c; len] }
    }

    pub fn indicator(len: usize, state: usize) -> Self {
        let mut values = vec![0.0; len];
        values[state] = 1.0;
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::Dimension { left, right })
    }
}

/// Total-variation distance `(1/2) sum |mu - nu|`.
pub fn tv_distance(mu: &ProbVector, nu: &ProbVector) -> Result<f64> {
    check_dims(mu.len(), nu.len())?;
    Ok(0.5 * compensated_sum(mu.values.iter().zip(&nu.values).map(|(a, b)| (a - b).abs())))
}

/// Lazy simple random walk on a weighted graph.
pub struct ChainOperator<'g, G: Adjacency> {
    graph: &'g G,
    laziness: f64,
    degrees: Vec<u32>,
    total_degree: u64,
}

impl<'g, G: Adjacency> ChainOperator<'g, G> {
    pub fn new(graph: &'g G, laziness: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&laziness) {
            return Err(Error::Precondition(format!("laziness {laziness} outside [0, 1)")));
        }
        let n = graph.vertex_count();
        let mut degrees = vec![0u32; n];
        degrees.par_chunks_mut(PAR_CHUNK).enumerate().for_each(|(c, chunk)| {
            for (i, d) in chunk.iter_mut().enumerate() {
                *d = graph.degree(c * PAR_CHUNK + i) as u32;
            }
        });
        if n > 1 && degrees.contains(&0) {
            let isolated = degrees.iter().filter(|&&d| d == 0).count();
            return Err(Error::Disconnected { reached: n - isolated, total: n });
        }
        let total_degree = degrees.iter().map(|&d| d as u64).sum();
        Ok(Self { graph, laziness, degrees, total_degree })
    }

    /// The default `(P + I) / 2` walk.
    pub fn lazy(graph: &'g G) -> Result<Self> {
        Self::new(graph, DEFAULT_LAZINESS)
    }

    pub fn non_lazy(graph: &'g G) -> Result<Self> {
        Self::new(graph, 0.0)
    }

    pub fn graph(&self) -> &'g G {
        self.graph
    }

    pub fn laziness(&self) -> f64 {
        self.laziness
    }

    pub fn state_count(&self) -> usize {
        self.degrees.len()
    }

    pub fn degree(&self, v: usize) -> u64 {
        self.degrees[v] as u64
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn total_degree(&self) -> u64 {
        self.total_degree
    }

    /// `pi(v) = deg(v) / sum deg`, without the connectivity check.
    pub fn pi(&self, v: usize) -> f64 {
        self.degrees[v] as f64 / self.total_degree as f64
    }

    /// Calls `f(y, P(x, y))` for every `y` with `P(x, y) > 0`; the holding
    /// probability (laziness plus any self-loop) is reported first.
    pub fn for_each_transition<F: FnMut(usize, f64)>(&self, x: usize, mut f: F) {
        let move_scale = (1.0 - self.laziness) / self.degrees[x] as f64;
        let mut hold = self.laziness;
        self.graph.for_each_neighbor(x, |y, w| {
            if y == x {
                hold += move_scale * w as f64;
            }
        });
        if hold > 0.0 {
            f(x, hold);
        }
        self.graph.for_each_neighbor(x, |y, w| {
            if y != x {
                f(y, move_scale * w as f64);
            }
        });
    }

    pub fn transition_probability(&self, x: usize, y: usize) -> f64 {
        let mut p = 0.0;
        self.for_each_transition(x, |z, q| {
            if z == y {
                p += q;
            }
        });
        p
    }

    /// Degree-proportional stationary distribution; fails on disconnected graphs.
    pub fn stationary_distribution(&self) -> Result<ProbVector> {
        self.graph.ensure_connected()?;
        let total = self.total_degree as f64;
        Ok(ProbVector::from_raw(self.degrees.iter().map(|&d| d as f64 / total).collect()))
    }

    /// One step `mu P`. Each output entry is accumulated in a fixed neighbor
    /// order, so results do not depend on the thread count.
    pub fn step(&self, mu: &ProbVector) -> Result<ProbVector> {
        check_dims(mu.len(), self.state_count())?;
        let mut scaled = vec![0.0; mu.len()];
        scaled.par_chunks_mut(PAR_CHUNK).enumerate().for_each(|(c, chunk)| {
            for (i, s) in chunk.iter_mut().enumerate() {
                let v = c * PAR_CHUNK + i;
                *s = mu.values[v] / self.degrees[v] as f64;
            }
        });
        let move_weight = 1.0 - self.laziness;
        let mut out = vec![0.0; mu.len()];
        out.par_chunks_mut(PAR_CHUNK).enumerate().for_each(|(c, chunk)| {
            for (i, o) in chunk.iter_mut().enumerate() {
                let u = c * PAR_CHUNK + i;
                let mut acc = 0.0;
                self.graph.for_each_neighbor(u, |v, w| acc += w as f64 * scaled[v]);
                *o = self.laziness * mu.values[u] + move_weight * acc;
            }
        });
        Ok(ProbVector::from_raw(out))
    }

    /// `mu P^t` by sequential stepping, renormalizing every
    /// [`RENORMALIZE_EVERY`] steps.
    pub fn step_distribution(&self, mu: &ProbVector, t: u64) -> Result<ProbVector> {
        check_dims(mu.len(), self.state_count())?;
        let mut cur = mu.clone();
        for s in 1..=t {
            cur = self.step(&cur)?;
            if s % RENORMALIZE_EVERY == 0 {
                let total = cur.total_mass();
                if total != 1.0 {
                    log::debug!("renormalizing after {s} steps (mass drift {:e})", total - 1.0);
                    cur.values.iter_mut().for_each(|x| *x /= total);
                }
            }
        }
        Ok(cur)
    }

    /// `(P f)(x) = sum_y P(x, y) f(y)`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_dims(f.len(), self.state_count())?;
        let mut out = vec![0.0; f.len()];
        let move_weight = 1.0 - self.laziness;
        out.par_chunks_mut(PAR_CHUNK).enumerate().for_each(|(c, chunk)| {
            for (i, o) in chunk.iter_mut().enumerate() {
                let x = c * PAR_CHUNK + i;
                let mut acc = 0.0;
                self.graph.for_each_neighbor(x, |y, w| acc += w as f64 * f[y]);
                *o = self.laziness * f[x] + move_weight * acc / self.degrees[x] as f64;
            }
        });
        Ok(out)
    }

    /// `E(f, g) = (1/2) sum_{x,y} pi(x) P(x,y) (f(x) - f(y)) (g(x) - g(y))`.
    pub fn dirichlet_form(&self, f: &TestFunction, g: &TestFunction) -> Result<f64> {
        check_dims(f.len(), self.state_count())?;
        check_dims(g.len(), self.state_count())?;
        let mut sum = CompensatedSum::new();
        for x in 0..self.state_count() {
            self.graph.for_each_neighbor(x, |y, w| {
                if y != x {
                    sum.add(w as f64 * (f.values[x] - f.values[y]) * (g.values[x] - g.values[y]));
                }
            });
        }
        Ok(0.5 * (1.0 - self.laziness) * sum.value() / self.total_degree as f64)
    }

    /// `Var_pi(f) = sum pi f^2 - (sum pi f)^2`, computed in centered form.
    pub fn variance_under_pi(&self, f: &TestFunction) -> Result<f64> {
        check_dims(f.len(), self.state_count())?;
        let total = self.total_degree as f64;
        let mean = compensated_sum((0..f.len()).map(|x| self.degrees[x] as f64 * f.values[x])) / total;
        let var = compensated_sum((0..f.len()).map(|x| {
            let d = f.values[x] - mean;
            self.degrees[x] as f64 * d * d
        })) / total;
        Ok(var.max(0.0))
    }

    /// Largest `|1 - sum_y P(x, y)|` over all rows.
    pub fn row_sum_defect(&self) -> f64 {
        (0..self.state_count())
            .map(|x| {
                let mut s = 0.0;
                self.for_each_transition(x, |_, p| s += p);
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest `|pi(x) P(x, y) - pi(y) P(y, x)|` over all edges.
    pub fn reversibility_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.state_count() {
            self.for_each_transition(x, |y, p| {
                let back = self.transition_probability(y, x);
                worst = worst.max((self.pi(x) * p - self.pi(y) * back).abs());
            });
        }
        worst
    }

    /// Dense transition matrix (row-major semantics: entry `(x, y)` is `P(x, y)`).
    pub fn to_dense(&self) -> Result<Mat<f64>> {
        let n = self.state_count();
        if n > DENSE_LIMIT {
            return Err(Error::MemoryBudget { needed: n as u64, budget: DENSE_LIMIT as u64 });
        }
        let mut m = Mat::<f64>::zeros(n, n);
        for x in 0..n {
            self.for_each_transition(x, |y, p| m[(x, y)] += p);
        }
        Ok(m)
    }
}
