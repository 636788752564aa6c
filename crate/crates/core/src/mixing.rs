//! Exact total-variation profiles, mixing times and cutoff diagnostics.
//!
//! A reversible chain with stationary law `pi` is symmetrized to
//! `S = D^{1/2} P D^{-1/2}`; with orthonormal eigenpairs `(lambda_i, phi_i)`,
//!
//! `P^t(s, y) - pi(y) = sqrt(pi(y) / pi(s)) sum_{i >= 1} lambda_i^t phi_i(s) phi_i(y)`,
//!
//! so `d(t)` is available at any `t` without stepping. Large trees are handled
//! through the lumped chain of each start, which has the same `d(t)`.

use std::io::Write;
use std::sync::Arc;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::ChainOperator;
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::linalg::{symmetric_eigen, symmetrize};
use crate::lumping::{coarsest_lumpable_partition, quotient_chain};
use crate::stats::CompensatedSum;
use crate::topology::{TreeFamilySpec, TreeGraph, VertexRef};

pub const DEFAULT_EPS_GRID: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];
/// Tolerance on the top eigenvalue being 1.
const TOP_EIGENVALUE_TOLERANCE: f64 = 1e-9;
/// Modes whose weight `|lambda^t phi(s)|` falls below this (relative to
/// `sqrt(pi(s))`) are dropped from the expansion.
const MODE_CUTOFF: f64 = 1e-18;

/// Full eigendecomposition of a symmetrized reversible chain.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    eigenvalues: Vec<f64>,
    vectors: Mat<f64>,
    pi: Vec<f64>,
}

impl SpectralDecomposition {
    /// Decomposes a dense reversible transition matrix with stationary law `pi`.
    pub fn from_dense(p: &Mat<f64>, pi: &[f64]) -> Result<Self> {
        let s = symmetrize(p, pi)?;
        let (eigenvalues, mut vectors) = symmetric_eigen(&s)?;
        let n = pi.len();
        if (eigenvalues[0] - 1.0).abs() > TOP_EIGENVALUE_TOLERANCE {
            return Err(Error::Eigen(format!("top eigenvalue {} is not 1", eigenvalues[0])));
        }
        if eigenvalues.iter().any(|&l| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&l)) {
            return Err(Error::Eigen("eigenvalue outside [-1, 1]".into()));
        }
        // Pin the top mode to the exact sqrt(pi) and project it out of the rest,
        // which removes the slow-mode contamination an ill-separated top
        // eigenvalue would otherwise leave behind.
        let total: f64 = pi.iter().sum();
        let root: Vec<f64> = pi.iter().map(|x| (x / total).sqrt()).collect();
        for r in 0..n {
            vectors[(r, 0)] = root[r];
        }
        for c in 1..n {
            let dot: f64 = (0..n).map(|r| vectors[(r, c)] * root[r]).sum();
            if dot != 0.0 {
                let mut norm = 0.0;
                for r in 0..n {
                    vectors[(r, c)] -= dot * root[r];
                    norm += vectors[(r, c)] * vectors[(r, c)];
                }
                let norm = norm.sqrt();
                for r in 0..n {
                    vectors[(r, c)] /= norm;
                }
            }
        }
        Ok(Self { eigenvalues, vectors, pi: pi.iter().map(|x| x / total).collect() })
    }

    pub fn from_chain<G: Adjacency>(chain: &ChainOperator<'_, G>) -> Result<Self> {
        let pi = chain.stationary_distribution()?;
        Self::from_dense(&chain.to_dense()?, pi.values())
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Descending eigenvalues.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors of the symmetrized chain (columns).
    pub fn vectors(&self) -> &Mat<f64> {
        &self.vectors
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// `max |U diag(lambda) U^T - S|` against a symmetrized matrix.
    pub fn reconstruction_error(&self, symmetrized: &Mat<f64>) -> f64 {
        crate::linalg::sequential_kernels();
        let n = self.len();
        let scaled = Mat::<f64>::from_fn(n, n, |r, c| self.vectors[(r, c)] * self.eigenvalues[c]);
        let rebuilt = &scaled * self.vectors.transpose();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((rebuilt[(i, j)] - symmetrized[(i, j)]).abs());
            }
        }
        worst
    }

    /// Mode weights `lambda_i^t phi_i(s)` for `i >= 1`, with negligible modes dropped.
    fn active_weights(&self, start: usize, t: u64) -> Vec<(usize, f64)> {
        let floor = MODE_CUTOFF * self.pi[start].sqrt();
        (1..self.len())
            .filter_map(|i| {
                let w = eigenvalue_power(self.eigenvalues[i], t) * self.vectors[(start, i)];
                (w.abs() > floor).then_some((i, w))
            })
            .collect()
    }

    /// `P^t(start, y) - pi(y)` for every `y`.
    pub fn deviation(&self, start: usize, t: u64) -> Vec<f64> {
        let weights = self.active_weights(start, t);
        let scale = 1.0 / self.pi[start].sqrt();
        (0..self.len())
            .map(|y| {
                let mut acc = CompensatedSum::new();
                for &(i, w) in &weights {
                    acc.add(w * self.vectors[(y, i)]);
                }
                self.pi[y].sqrt() * scale * acc.value()
            })
            .collect()
    }

    /// `d_start(t) = || P^t(start, .) - pi ||_TV`.
    pub fn distance(&self, start: usize, t: u64) -> f64 {
        if t == 0 {
            return 1.0 - self.pi[start];
        }
        let dev = self.deviation(start, t);
        let mut acc = CompensatedSum::new();
        for x in dev {
            acc.add(x.abs());
        }
        (0.5 * acc.value()).min(1.0)
    }

    /// `d_x(t)` for every start `x` at once.
    pub fn distance_from_every_start(&self, t: u64) -> Vec<f64> {
        crate::linalg::sequential_kernels();
        let n = self.len();
        let active: Vec<usize> = (1..n).filter(|&i| eigenvalue_power(self.eigenvalues[i], t).abs() > 1e-17).collect();
        let m = active.len();
        let left = Mat::<f64>::from_fn(n, m, |r, c| self.vectors[(r, active[c])] * eigenvalue_power(self.eigenvalues[active[c]], t));
        let right = Mat::<f64>::from_fn(n, m, |r, c| self.vectors[(r, active[c])]);
        let kernel = &left * right.transpose();
        (0..n)
            .into_par_iter()
            .map(|x| {
                let scale = 1.0 / self.pi[x].sqrt();
                let mut acc = CompensatedSum::new();
                for y in 0..n {
                    acc.add((self.pi[y].sqrt() * scale * kernel[(x, y)]).abs());
                }
                if t == 0 {
                    1.0 - self.pi[x]
                } else {
                    (0.5 * acc.value()).min(1.0)
                }
            })
            .collect()
    }
}

/// `lambda^t` for `t` up to `2^63`, accurate for `lambda` near 1.
pub fn eigenvalue_power(lambda: f64, t: u64) -> f64 {
    if t == 0 {
        return 1.0;
    }
    if lambda == 0.0 {
        return 0.0;
    }
    let magnitude = (t as f64 * (lambda.abs() - 1.0).ln_1p()).exp();
    if lambda < 0.0 && t % 2 == 1 {
        -magnitude
    } else {
        magnitude
    }
}

/// One start together with the decomposition that contains it.
#[derive(Clone, Debug)]
pub struct StartDecomposition {
    pub label: String,
    pub decomposition: Arc<SpectralDecomposition>,
    pub index: usize,
}

/// Worst case of `d_x(t)` over a fixed set of starts.
#[derive(Clone, Debug)]
pub struct WorstCaseProfile {
    pub starts: Vec<StartDecomposition>,
}

impl WorstCaseProfile {
    /// One dense decomposition shared by all starts.
    pub fn from_decomposition(decomposition: Arc<SpectralDecomposition>, starts: Vec<(String, usize)>) -> Self {
        let starts = starts
            .into_iter()
            .map(|(label, index)| StartDecomposition { label, decomposition: decomposition.clone(), index })
            .collect();
        Self { starts }
    }

    /// Full-chain decomposition (small graphs only).
    pub fn from_full_chain(chain: &ChainOperator<'_, TreeGraph>, starts: &[VertexRef]) -> Result<Self> {
        let g = chain.graph();
        let d = Arc::new(SpectralDecomposition::from_chain(chain)?);
        let starts = starts.iter().map(|&v| Ok((g.describe(v), g.encode(v)?))).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_decomposition(d, starts))
    }

    /// One lumped chain and decomposition per start (perfect trees, any size).
    pub fn from_quotients(chain: &ChainOperator<'_, TreeGraph>, starts: &[VertexRef]) -> Result<Self> {
        let g = chain.graph();
        let starts = starts
            .par_iter()
            .map(|&v| {
                let partition = coarsest_lumpable_partition(chain, v)?;
                let q = quotient_chain(chain, partition)?;
                let d = SpectralDecomposition::from_dense(q.transition(), q.pi())?;
                Ok(StartDecomposition { label: g.describe(v), decomposition: Arc::new(d), index: q.start_class() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { starts })
    }

    pub fn distances(&self, t: u64) -> Vec<f64> {
        self.starts.par_iter().map(|s| s.decomposition.distance(s.index, t)).collect()
    }

    pub fn distance(&self, t: u64) -> f64 {
        self.distances(t).into_iter().fold(0.0, f64::max)
    }

    /// Label of the start attaining the worst case at `t`.
    pub fn worst_start(&self, t: u64) -> (String, f64) {
        let d = self.distances(t);
        let (i, v) = d.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        (self.starts[i].label.clone(), v)
    }

    /// Per-start profiles on a time grid, each with its own mixing-time table.
    pub fn profiles(&self, t_grid: &[u64], eps_grid: &[f64]) -> Result<Vec<MixingProfile>> {
        if t_grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        self.starts
            .iter()
            .map(|s| {
                let single = WorstCaseProfile { starts: vec![s.clone()] };
                let samples = t_grid.iter().map(|&t| (t, s.decomposition.distance(s.index, t))).collect();
                let tmix_table = eps_grid.iter().map(|&e| Ok((e, mixing_time(&single, e)?))).collect::<Result<_>>()?;
                Ok(MixingProfile { start: s.label.clone(), samples, tmix_table })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    pub start: String,
    /// `(t, d(t))`.
    pub samples: Vec<(u64, f64)>,
    /// `(eps, t_mix(eps))`.
    pub tmix_table: Vec<(f64, u64)>,
}

impl MixingProfile {
    /// CSV with columns `start,t,d`.
    pub fn write_csv<W: Write>(profiles: &[MixingProfile], mut out: W) -> Result<()> {
        writeln!(out, "start,t,d")?;
        for p in profiles {
            for &(t, d) in &p.samples {
                writeln!(out, "{},{t},{d:.17e}", p.start)?;
            }
        }
        Ok(())
    }
}

/// Smallest `t` with worst-case `d(t) <= eps`, by doubling then bisection.
pub fn mixing_time(profile: &WorstCaseProfile, eps: f64) -> Result<u64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Epsilon(eps));
    }
    if profile.distance(0) <= eps {
        return Ok(0);
    }
    let mut lo = 0u64;
    let mut hi = 1u64;
    while profile.distance(hi) > eps {
        lo = hi;
        hi = hi.checked_mul(2).filter(|&h| h <= 1 << 62).ok_or(Error::NoConvergence { iterations: 62, residual: eps })?;
    }
    // Invariant: d(lo) > eps >= d(hi).
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if profile.distance(mid) <= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffRow {
    pub k: u32,
    pub mass: u64,
    pub eps: f64,
    pub tmix: u64,
    /// `t_mix(eps) / t_mix(1 - eps)` for `eps <= 1/2`.
    pub ratio: Option<f64>,
    pub window: Option<u64>,
    pub window_over_mass_sqrt_k: Option<f64>,
    pub window_over_tmix_quarter: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffReport {
    pub rows: Vec<CutoffRow>,
    /// `(k, message)` for specs that could not be analyzed.
    pub failures: Vec<(u32, String)>,
}

impl CutoffReport {
    pub fn row(&self, k: u32, eps: f64) -> Option<&CutoffRow> {
        self.rows.iter().find(|r| r.k == k && (r.eps - eps).abs() < 1e-12)
    }

    /// CSV with columns `k,N,eps,tmix,ratio,window,window_over_Nsqrtk,window_over_tmix`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,N,eps,tmix,ratio,window,window_over_Nsqrtk,window_over_tmix")?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.12e}"));
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.k,
                r.mass,
                r.eps,
                r.tmix,
                opt(r.ratio),
                r.window.map_or(String::new(), |w| w.to_string()),
                opt(r.window_over_mass_sqrt_k),
                opt(r.window_over_tmix_quarter)
            )?;
        }
        Ok(())
    }
}

/// Exact mixing times over an eps grid for every spec; failing specs are
/// recorded and the rest still reported.
pub fn cutoff_report(specs: &[TreeFamilySpec], eps_grid: &[f64]) -> CutoffReport {
    let mut report = CutoffReport::default();
    for spec in specs {
        match cutoff_rows(spec, eps_grid) {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => report.failures.push((spec.k, e.to_string())),
        }
    }
    report
}

fn cutoff_rows(spec: &TreeFamilySpec, eps_grid: &[f64]) -> Result<Vec<CutoffRow>> {
    if eps_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let g = crate::topology::build_family_tree(spec)?;
    let chain = ChainOperator::lazy(&g)?;
    let profile = WorstCaseProfile::from_quotients(&chain, &g.canonical_starts())?;
    let mass = spec.mass()?;
    let mut needed: Vec<f64> = eps_grid.to_vec();
    for &e in eps_grid {
        needed.push(1.0 - e);
    }
    needed.push(0.25);
    let mut table: Vec<(f64, u64)> = Vec::new();
    for e in needed {
        if !table.iter().any(|&(x, _)| (x - e).abs() < 1e-12) {
            table.push((e, mixing_time(&profile, e)?));
        }
    }
    let lookup = |e: f64| table.iter().find(|&&(x, _)| (x - e).abs() < 1e-12).map(|&(_, t)| t).expect("computed");
    let quarter = lookup(0.25) as f64;
    let scale = mass as f64 * (spec.k as f64).sqrt();
    Ok(eps_grid
        .iter()
        .map(|&eps| {
            let tmix = lookup(eps);
            let (ratio, window) = if eps <= 0.5 {
                let other = lookup(1.0 - eps);
                (Some(tmix as f64 / other as f64), Some(tmix.saturating_sub(other)))
            } else {
                (None, None)
            };
            CutoffRow {
                k: spec.k,
                mass,
                eps,
                tmix,
                ratio,
                window,
                window_over_mass_sqrt_k: window.map(|w| w as f64 / scale),
                window_over_tmix_quarter: window.map(|w| w as f64 / quarter),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{tv_distance, ProbVector};
    use crate::graph::EdgeListGraph;
    use crate::topology::TreeMode;

    #[test]
    fn single_lazy_edge() {
        let g = EdgeListGraph::path(1);
        let c = ChainOperator::lazy(&g).unwrap();
        let d = Arc::new(SpectralDecomposition::from_chain(&c).unwrap());
        assert!((d.eigenvalues()[0] - 1.0).abs() < 1e-15 && d.eigenvalues()[1].abs() < 1e-15);
        assert_eq!(d.distance(0, 0), 0.5);
        assert!(d.distance(0, 1) < 1e-15);
        let w = WorstCaseProfile::from_decomposition(d, vec![("a".into(), 0), ("b".into(), 1)]);
        assert_eq!(mixing_time(&w, 0.25).unwrap(), 1);
        assert_eq!(mixing_time(&w, 0.5).unwrap(), 0);
        assert!(matches!(mixing_time(&w, 1.0), Err(Error::Epsilon(_))));
        assert!(matches!(mixing_time(&w, 0.0), Err(Error::Epsilon(_))));
    }

    #[test]
    fn three_path_eigenvalues_match_closed_form() {
        // Lazy walk on {0,1,2}: non-lazy spectrum {1, 0, -1}, so lazy {1, 1/2, 0}.
        let g = EdgeListGraph::path(2);
        let c = ChainOperator::lazy(&g).unwrap();
        let d = SpectralDecomposition::from_chain(&c).unwrap();
        for (a, b) in d.eigenvalues().iter().zip([1.0, 0.5, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let pi = c.stationary_distribution().unwrap();
        let s = symmetrize(&c.to_dense().unwrap(), pi.values()).unwrap();
        assert!(d.reconstruction_error(&s) < 1e-10);
    }

    #[test]
    fn spectral_distance_matches_sequential_powering() {
        let g = TreeGraph::binary_tree(63, TreeMode::Perfect, true).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let d = SpectralDecomposition::from_chain(&c).unwrap();
        let pi = c.stationary_distribution().unwrap();
        for start in [0usize, 5, 62] {
            let mut mu = ProbVector::point_mass(63, start).unwrap();
            for t in 0..=400u64 {
                if t % 37 == 0 {
                    let exact = tv_distance(&mu, &pi).unwrap();
                    assert!((d.distance(start, t) - exact).abs() < 1e-10, "start {start} t {t}");
                }
                mu = c.step(&mu).unwrap();
            }
        }
        let every = d.distance_from_every_start(100);
        for x in [0usize, 5, 62] {
            assert!((every[x] - d.distance(x, 100)).abs() < 1e-12);
        }
    }

    #[test]
    fn eigenvalue_powers() {
        assert_eq!(eigenvalue_power(0.0, 0), 1.0);
        assert_eq!(eigenvalue_power(0.0, 3), 0.0);
        assert!((eigenvalue_power(-0.5, 3) + 0.125).abs() < 1e-16);
        let near = 1.0 - 1e-12;
        let expected = (-1e-12f64 * 1e12).exp();
        assert!((eigenvalue_power(near, 1_000_000_000_000) - expected).abs() < 1e-3);
        assert!(eigenvalue_power(0.9, 1 << 62) == 0.0);
    }

    #[test]
    fn mixing_time_is_exact_threshold() {
        let g = TreeGraph::binary_tree(31, TreeMode::Perfect, false).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let w = WorstCaseProfile::from_full_chain(&c, &g.canonical_starts()).unwrap();
        for eps in DEFAULT_EPS_GRID {
            let t = mixing_time(&w, eps).unwrap();
            assert!(w.distance(t) <= eps);
            if t > 0 {
                assert!(w.distance(t - 1) > eps);
            }
        }
        let ts: Vec<u64> = DEFAULT_EPS_GRID.iter().map(|&e| mixing_time(&w, e).unwrap()).collect();
        assert!(ts.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn quotient_and_full_profiles_agree() {
        let spec = TreeFamilySpec { alpha: crate::topology::MassExponent { num: 2, den: 1 }, ..TreeFamilySpec::canonical(2) };
        let g = crate::topology::build_family_tree(&spec).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let starts = g.canonical_starts();
        let full = WorstCaseProfile::from_full_chain(&c, &starts).unwrap();
        let lumped = WorstCaseProfile::from_quotients(&c, &starts).unwrap();
        for t in [0u64, 1, 10, 100, 1000, 5000] {
            let a = full.distances(t);
            let b = lumped.distances(t);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10, "t {t}: {x} vs {y}");
            }
        }
        assert_eq!(mixing_time(&full, 0.25).unwrap(), mixing_time(&lumped, 0.25).unwrap());
    }

    #[test]
    fn profile_invariants() {
        let g = TreeGraph::binary_tree(15, TreeMode::Perfect, false).unwrap();
        let c = ChainOperator::lazy(&g).unwrap();
        let w = WorstCaseProfile::from_full_chain(&c, &[VertexRef::path(0)]).unwrap();
        let grid: Vec<u64> = (0..200).collect();
        let p = &w.profiles(&grid, &[0.25]).unwrap()[0];
        let pi0 = c.pi(0);
        assert!((p.samples[0].1 - (1.0 - pi0)).abs() < 1e-15);
        assert!(p.samples.windows(2).all(|s| s[1].1 <= s[0].1 + 1e-12));
        let (eps, t) = p.tmix_table[0];
        assert!(p.samples[t as usize].1 <= eps && p.samples[t as usize - 1].1 > eps);
        assert!(matches!(w.profiles(&[], &[0.25]), Err(Error::EmptyGrid)));
    }

    #[test]
    fn cutoff_report_rows_and_csv() {
        let spec = TreeFamilySpec { alpha: crate::topology::MassExponent { num: 2, den: 1 }, ..TreeFamilySpec::canonical(2) };
        let report = cutoff_report(&[spec, TreeFamilySpec::canonical(2).with_mode(TreeMode::ExactSize)], &DEFAULT_EPS_GRID);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.rows.len(), DEFAULT_EPS_GRID.len());
        for r in &report.rows {
            if let (Some(ratio), Some(_)) = (r.ratio, r.window) {
                assert!(ratio >= 1.0);
                if r.eps >= 0.25 {
                    assert!(r.window_over_tmix_quarter.unwrap() < 1.0);
                }
            }
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,N,eps,tmix,ratio,window,window_over_Nsqrtk,window_over_tmix\n2,256,0.01,"));
    }
}
