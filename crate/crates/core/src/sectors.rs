//! Spectrum of the walk on a path with perfect binary trees attached, split
//! into invariant subspaces.
//!
//! Functions that depend only on (tree, depth) form the symmetric sector, a
//! chain on path positions and tree levels. For a tree vertex `v` at depth `d`,
//! functions that are `+phi(level)` below one child of `v`, `-phi(level)` below
//! the other and zero elsewhere form an invariant subspace on which the walk
//! acts as the symmetric chain restricted to levels `d+1..D` of that tree (the
//! step to `v` is lost). There are `2^d` such subspaces per depth, and together
//! with the symmetric sector they span every function on the graph.
//!
//! Grounding a set of path vertices or whole trees (Dirichlet conditions)
//! restricts the symmetric sector the same way and drops the antisymmetric
//! sectors of grounded trees.

use faer::Mat;

use crate::chain::ChainOperator;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::topology::TreeGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SectorKind {
    Symmetric,
    Antisymmetric { slot: u32, depth: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct SectorEigen {
    pub value: f64,
    pub multiplicity: u64,
    pub kind: SectorKind,
}

/// Vertices held at zero.
#[derive(Clone, Debug, Default)]
pub(crate) struct Grounding {
    pub path: Vec<u64>,
    pub trees: Vec<u32>,
}

/// Symmetrized depth quotient of a perfect-tree graph.
#[derive(Clone, Debug)]
pub(crate) struct SectorModel {
    path_len: u64,
    /// First quotient index of each tree's level 1, and its depth.
    tree_levels: Vec<(usize, u32)>,
    /// `sqrt(w) Q sqrt(w)^{-1}` with `w = (vertex count) * degree`.
    symmetrized: Mat<f64>,
}

impl SectorModel {
    pub fn new(chain: &ChainOperator<'_, TreeGraph>) -> Result<Self> {
        let g = chain.graph();
        if g.trees().iter().any(|t| !t.is_perfect()) {
            return Err(Error::Unsupported("symmetry sectors need perfect trees".into()));
        }
        let path_states = g.path_len() as usize + 1;
        let mut tree_levels = Vec::with_capacity(g.trees().len());
        let mut size = path_states;
        for t in g.trees() {
            tree_levels.push((size, t.depth));
            size += t.depth as usize;
        }
        // Quotient state of a global id.
        let state_of = |id: usize| -> usize {
            match g.tree_coordinates(id) {
                None => id,
                Some((slot, h)) => tree_levels[slot as usize].0 + (63 - h.leading_zeros()) as usize - 1,
            }
        };
        let mut representative = vec![0usize; size];
        let mut counts = vec![1u64; size];
        for (p, r) in representative.iter_mut().enumerate().take(path_states) {
            *r = p;
        }
        for (slot, &(first, depth)) in tree_levels.iter().enumerate() {
            for d in 1..=depth {
                representative[first + d as usize - 1] = g.heap_id(slot as u32, 1u64 << d);
                counts[first + d as usize - 1] = 1u64 << d;
            }
        }
        let mut q = Mat::<f64>::zeros(size, size);
        for (i, &x) in representative.iter().enumerate() {
            chain.for_each_transition(x, |y, p| q[(i, state_of(y))] += p);
        }
        let weight: Vec<f64> = (0..size).map(|i| counts[i] as f64 * chain.degree(representative[i]) as f64).collect();
        let root: Vec<f64> = weight.iter().map(|w| w.sqrt()).collect();
        let s = Mat::<f64>::from_fn(size, size, |i, j| if q[(i, j)] == 0.0 { 0.0 } else { root[i] * q[(i, j)] / root[j] });
        let symmetrized = Mat::<f64>::from_fn(size, size, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
        Ok(Self { path_len: g.path_len(), tree_levels, symmetrized })
    }

    /// Symmetric-sector state indices that survive the grounding.
    fn free_states(&self, grounding: &Grounding) -> Vec<usize> {
        let mut free: Vec<usize> = (0..=self.path_len).filter(|p| !grounding.path.contains(p)).map(|p| p as usize).collect();
        for (slot, &(first, depth)) in self.tree_levels.iter().enumerate() {
            if !grounding.trees.contains(&(slot as u32)) {
                free.extend(first..first + depth as usize);
            }
        }
        free
    }

    fn principal(&self, states: &[usize]) -> Mat<f64> {
        Mat::<f64>::from_fn(states.len(), states.len(), |i, j| self.symmetrized[(states[i], states[j])])
    }

    /// Every eigenvalue with its multiplicity and sector.
    pub fn spectrum(&self, grounding: &Grounding) -> Result<Vec<SectorEigen>> {
        let mut out = Vec::new();
        let free = self.free_states(grounding);
        if !free.is_empty() {
            let (values, _) = symmetric_eigen(&self.principal(&free))?;
            out.extend(values.into_iter().map(|value| SectorEigen { value, multiplicity: 1, kind: SectorKind::Symmetric }));
        }
        for (slot, &(first, depth)) in self.tree_levels.iter().enumerate() {
            if grounding.trees.contains(&(slot as u32)) {
                continue;
            }
            for d in 0..depth {
                let states: Vec<usize> = (first + d as usize..first + depth as usize).collect();
                let (values, _) = symmetric_eigen(&self.principal(&states))?;
                out.extend(values.into_iter().map(|value| SectorEigen {
                    value,
                    multiplicity: 1u64 << d,
                    kind: SectorKind::Antisymmetric { slot: slot as u32, depth: d },
                }));
            }
        }
        Ok(out)
    }
}

/// Largest eigenvalue after removing one copy of the top symmetric eigenvalue
/// (the constant mode), and the smallest eigenvalue.
pub(crate) fn second_and_smallest(spectrum: &[SectorEigen]) -> Option<(f64, f64)> {
    let top = spectrum
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == SectorKind::Symmetric)
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))?
        .0;
    let mut second = f64::NEG_INFINITY;
    let mut smallest = f64::INFINITY;
    for (i, e) in spectrum.iter().enumerate() {
        smallest = smallest.min(e.value);
        if i != top || e.multiplicity > 1 {
            second = second.max(e.value);
        }
    }
    second.is_finite().then_some((second, smallest))
}

pub(crate) fn largest(spectrum: &[SectorEigen]) -> Option<f64> {
    spectrum.iter().map(|e| e.value).max_by(f64::total_cmp)
}

/// All eigenvalues with multiplicity, descending; refuses beyond `limit` values.
pub(crate) fn expand(spectrum: &[SectorEigen], limit: u64) -> Result<Vec<f64>> {
    let total: u64 = spectrum.iter().map(|e| e.multiplicity).sum();
    if total > limit {
        return Err(Error::MemoryBudget { needed: total, budget: limit });
    }
    let mut out = Vec::with_capacity(total as usize);
    for e in spectrum {
        out.extend(std::iter::repeat(e.value).take(e.multiplicity as usize));
    }
    out.sort_by(|a, b| b.total_cmp(a));
    Ok(out)
}
