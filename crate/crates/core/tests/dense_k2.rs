//! Cross-checks on the k = 2 member against one dense eigendecomposition and
//! dense linear solves of the full 5387-state chain.

use std::sync::{Arc, OnceLock};

use faer::Mat;
use treemix::hitting::hitting_moments;
use treemix::linalg::solve_dense;
use treemix::mixing::{mixing_time, SpectralDecomposition, WorstCaseProfile};
use treemix::spectral::{relaxation_time_tree, validate_sectors_against, SpectralMethod};
use treemix::{build_family_tree, ChainOperator, TreeFamilySpec, TreeGraph};

fn k2() -> &'static TreeGraph {
    static G: OnceLock<TreeGraph> = OnceLock::new();
    G.get_or_init(|| build_family_tree(&TreeFamilySpec::canonical(2)).unwrap())
}

fn dense() -> Arc<SpectralDecomposition> {
    static D: OnceLock<Arc<SpectralDecomposition>> = OnceLock::new();
    D.get_or_init(|| Arc::new(SpectralDecomposition::from_chain(&ChainOperator::lazy(k2()).unwrap()).unwrap())).clone()
}

#[test]
fn sector_spectrum_matches_full_dense_spectrum() {
    let chain = ChainOperator::lazy(k2()).unwrap();
    let v = validate_sectors_against(&chain, dense().eigenvalues()).unwrap();
    assert_eq!(v.states, 5387);
    assert!(v.passed && v.max_eigenvalue_error < 1e-8, "{v:?}");
}

#[test]
fn lumped_profiles_match_dense_profiles() {
    let g = k2();
    let chain = ChainOperator::lazy(g).unwrap();
    let starts = g.canonical_starts();
    let lumped = WorstCaseProfile::from_quotients(&chain, &starts).unwrap();
    let ids = starts.iter().map(|&v| (g.describe(v), g.encode(v).unwrap())).collect();
    let full = WorstCaseProfile::from_decomposition(dense(), ids);
    for t in [0u64, 1, 7, 100, 1000, 10_000, 40_000, 100_000] {
        let (a, b) = (lumped.distances(t), full.distances(t));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "t = {t}: {x} vs {y}");
        }
    }
    for eps in [0.1, 0.25, 0.9] {
        assert_eq!(mixing_time(&lumped, eps).unwrap(), mixing_time(&full, eps).unwrap());
    }
}

#[test]
fn tree_solve_matches_dense_hitting_solve() {
    let g = k2();
    let chain = ChainOperator::lazy(g).unwrap();
    let fast = hitting_moments(&chain, &[0]).unwrap();
    // (I - P) h = 1 off the target, h(0) = 0, as one dense system on states 1..n.
    let p = chain.to_dense().unwrap();
    let n = chain.state_count() - 1;
    let a = Mat::<f64>::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - p[(i + 1, j + 1)]);
    let h = solve_dense(&a, &vec![1.0; n]).unwrap();
    let worst = (0..n).map(|i| (h[i] - fast.mean_at(i + 1)).abs() / h[i]).fold(0.0, f64::max);
    assert!(worst < 1e-9, "relative error {worst:e}");
    // Second moments: (I - P) u = 1 + 2 P h off the target.
    let ph: Vec<f64> = (0..n).map(|i| (0..n).map(|j| p[(i + 1, j + 1)] * h[j]).sum()).collect();
    let u = solve_dense(&a, &ph.iter().map(|x| 1.0 + 2.0 * x).collect::<Vec<_>>()).unwrap();
    let far = g.path_len() as usize;
    let second = fast.second_moment_at(far).unwrap();
    assert!((u[far - 1] - second).abs() / second < 1e-9);
}

#[test]
fn relaxation_time_uses_dense_route_and_agrees_with_decomposition() {
    let chain = ChainOperator::lazy(k2()).unwrap();
    let r = relaxation_time_tree(&chain).unwrap();
    assert_eq!(r.method, SpectralMethod::Dense);
    let values = dense().eigenvalues().to_vec();
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    assert!((r.lambda_2 - sorted[1]).abs() < 1e-12);
    assert!(r.cheeger_consistent());
}
