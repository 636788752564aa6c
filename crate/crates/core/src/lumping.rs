//! Exact lumping of the walk into a quotient chain.
//!
//! For tree-family graphs with perfect trees the symmetry classes are known in
//! closed form: path vertices are singletons, a tree that does not contain the
//! start vertex is split by depth, and the tree containing the start is split
//! by (depth, depth of the meeting point with the start's ancestral line).
//! That partition is equitable, so the coarsest lumpable partition with the
//! start as a singleton is a coarsening of it and can be found by refinement
//! on the small structural quotient. Every result is certified against the
//! full graph (exhaustively up to [`EXHAUSTIVE_CERTIFICATE_LIMIT`] states,
//! on a deterministic sample above that).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{ChainOperator, ProbVector};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::stats::Fraction;
use crate::topology::{TreeGraph, TreeMode, VertexRef};

pub const EXHAUSTIVE_CERTIFICATE_LIMIT: u64 = 25_000_000;
pub const CERTIFICATE_SAMPLE: usize = 200_000;
const CERTIFICATE_SEED: u64 = 0x6c75_6d70;

/// Exact one-step move fractions `W(x, C) / deg(x)` from a class, sorted by target class.
pub type ExactRow = Vec<(u32, Fraction)>;

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub checked_states: u64,
    pub exhaustive: bool,
}

#[derive(Clone, Debug)]
enum ClassLookup {
    Table(Vec<u32>),
    Structural(Box<StructuralLookup>),
}

/// A partition of the states with the start vertex as a singleton.
#[derive(Clone, Debug)]
pub struct Partition {
    lookup: ClassLookup,
    sizes: Vec<u64>,
    pi_mass: Vec<f64>,
    representatives: Vec<usize>,
    start: usize,
    rows: Option<Vec<ExactRow>>,
    certificate: Option<Certificate>,
}

impl Partition {
    /// Uncertified partition from explicit labels; classes are renumbered by
    /// their smallest member.
    pub fn from_labels<G: Adjacency>(chain: &ChainOperator<'_, G>, labels: &[u32], start: usize) -> Result<Self> {
        let n = chain.state_count();
        if labels.len() != n {
            return Err(Error::Dimension { left: labels.len(), right: n });
        }
        if start >= n {
            return Err(Error::Addressing(format!("start {start} outside 0..{n}")));
        }
        let mut renumber: HashMap<u32, u32> = HashMap::new();
        let mut table = Vec::with_capacity(n);
        let mut representatives = Vec::new();
        for (x, &l) in labels.iter().enumerate() {
            let next = renumber.len() as u32;
            let c = *renumber.entry(l).or_insert_with(|| {
                representatives.push(x);
                next
            });
            table.push(c);
        }
        let k = representatives.len();
        let mut sizes = vec![0u64; k];
        let mut degree_mass = vec![0u64; k];
        for (x, &c) in table.iter().enumerate() {
            sizes[c as usize] += 1;
            degree_mass[c as usize] += chain.degree(x);
        }
        if sizes[table[start] as usize] != 1 {
            return Err(Error::Precondition("the start vertex must be a singleton class".into()));
        }
        let total = chain.total_degree() as f64;
        Ok(Self {
            lookup: ClassLookup::Table(table),
            sizes,
            pi_mass: degree_mass.iter().map(|&d| d as f64 / total).collect(),
            representatives,
            start,
            rows: None,
            certificate: None,
        })
    }

    /// Every state its own class.
    pub fn singletons<G: Adjacency>(chain: &ChainOperator<'_, G>, start: usize) -> Result<Self> {
        let labels: Vec<u32> = (0..chain.state_count() as u32).collect();
        Self::from_labels(chain, &labels, start)
    }

    pub fn class_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn class_of(&self, state: usize) -> usize {
        match &self.lookup {
            ClassLookup::Table(t) => t[state] as usize,
            ClassLookup::Structural(s) => s.final_class(state),
        }
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn pi_mass(&self) -> &[f64] {
        &self.pi_mass
    }

    /// Smallest state id in each class.
    pub fn representatives(&self) -> &[usize] {
        &self.representatives
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn start_class(&self) -> usize {
        self.class_of(self.start)
    }

    pub fn is_certified(&self) -> bool {
        self.certificate.is_some()
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.certificate.as_ref()
    }

    pub fn exact_rows(&self) -> Option<&[ExactRow]> {
        self.rows.as_deref()
    }

    /// Checks the lumpability condition on every state and records the exact
    /// class-level move fractions.
    pub fn certify<G: Adjacency>(&mut self, chain: &ChainOperator<'_, G>) -> Result<()> {
        let n = chain.state_count();
        let mut rows: Vec<Option<ExactRow>> = vec![None; self.class_count()];
        for x in 0..n {
            let row = exact_row(chain.graph(), x, chain.degree(x), |y| self.class_of(y) as u32);
            let c = self.class_of(x);
            match &rows[c] {
                None => rows[c] = Some(row),
                Some(existing) if *existing == row => {}
                Some(_) => {
                    return Err(Error::Precondition(format!(
                        "partition is not lumpable: state {x} disagrees with state {} in class {c}",
                        self.representatives[c]
                    )))
                }
            }
        }
        self.rows = Some(rows.into_iter().map(|r| r.expect("classes are non-empty")).collect());
        self.certificate = Some(Certificate { checked_states: n as u64, exhaustive: true });
        Ok(())
    }
}

/// Aggregated `(class, W(x, class) / deg(x))`, sorted by class.
fn exact_row<G: Adjacency>(graph: &G, x: usize, degree: u64, class: impl Fn(usize) -> u32) -> ExactRow {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    graph.for_each_neighbor(x, |y, w| *counts.entry(class(y)).or_default() += w as u64);
    counts.into_iter().map(|(c, w)| (c, Fraction::new(w, degree))).collect()
}

/// Coarsest lumpable partition of an arbitrary graph, by refinement over all
/// states. Suitable for small graphs; used as an oracle for the structural
/// construction.
pub fn coarsest_partition_by_refinement<G: Adjacency>(chain: &ChainOperator<'_, G>, start: usize) -> Result<Partition> {
    let n = chain.state_count();
    if start >= n {
        return Err(Error::Addressing(format!("start {start} outside 0..{n}")));
    }
    let mut labels: Vec<u32> = (0..n).map(|x| u32::from(x != start)).collect();
    let mut count = if n > 1 { 2 } else { 1 };
    loop {
        let mut ids: HashMap<(u32, ExactRow), u32> = HashMap::new();
        let mut next = Vec::with_capacity(n);
        for x in 0..n {
            let row = exact_row(chain.graph(), x, chain.degree(x), |y| labels[y]);
            let fresh = ids.len() as u32;
            next.push(*ids.entry((labels[x], row)).or_insert(fresh));
        }
        let new_count = ids.len();
        labels = next;
        if new_count == count {
            break;
        }
        count = new_count;
    }
    let mut p = Partition::from_labels(chain, &labels, start)?;
    p.certify(chain)?;
    Ok(p)
}

/// Closed-form structural classes of a perfect tree-family graph.
#[derive(Clone, Debug)]
struct StructuralLookup {
    path_len: u64,
    /// `(offset, depth, base index)` per tree slot.
    trees: Vec<TreeInfo>,
    start_tree: Option<StartTree>,
    /// Structural class -> final class.
    merge: Vec<u32>,
    structural_count: usize,
}

#[derive(Clone, Debug)]
struct TreeInfo {
    offset: u64,
    depth: u32,
    base: usize,
}

#[derive(Clone, Debug)]
struct StartTree {
    slot: usize,
    heap: u64,
    depth: u32,
    /// `depth_offset[d]` = index of `(d, 0)` relative to the tree's base.
    depth_offset: Vec<usize>,
}

impl StructuralLookup {
    fn new(g: &TreeGraph, start: usize) -> Self {
        let start_coords = g.tree_coordinates(start);
        let mut base = g.path_len() as usize + 1;
        let mut trees = Vec::new();
        let mut start_tree = None;
        for (slot, t) in g.trees().iter().enumerate() {
            trees.push(TreeInfo { offset: t.offset, depth: t.depth, base });
            match start_coords {
                Some((s, heap)) if s as usize == slot => {
                    let sd = 63 - heap.leading_zeros();
                    let mut depth_offset = vec![0usize; t.depth as usize + 1];
                    let mut acc = 0;
                    for d in 1..=t.depth {
                        depth_offset[d as usize] = acc;
                        acc += d.min(sd) as usize + 1;
                    }
                    start_tree = Some(StartTree { slot, heap, depth: sd, depth_offset });
                    base += acc;
                }
                _ => base += t.depth as usize,
            }
        }
        StructuralLookup { path_len: g.path_len(), trees, start_tree, merge: Vec::new(), structural_count: base }
    }

    fn structural_class(&self, id: usize) -> usize {
        let id64 = id as u64;
        if id64 <= self.path_len {
            return id;
        }
        let slot = self.trees.partition_point(|t| t.offset <= id64) - 1;
        let t = &self.trees[slot];
        let h = id64 - t.offset + 2;
        let d = 63 - h.leading_zeros();
        match &self.start_tree {
            Some(st) if st.slot == slot => {
                let common = d.min(st.depth);
                let a = h >> (d - common);
                let b = st.heap >> (st.depth - common);
                let m = common - (64 - (a ^ b).leading_zeros());
                t.base + st.depth_offset[d as usize] + m as usize
            }
            _ => t.base + d as usize - 1,
        }
    }

    fn final_class(&self, id: usize) -> usize {
        self.merge[self.structural_class(id)] as usize
    }

    /// `(representative id, size)` for every structural class.
    fn members(&self, g: &TreeGraph) -> Vec<(usize, u64)> {
        let mut out = vec![(0usize, 0u64); self.structural_count];
        for p in 0..=self.path_len as usize {
            out[p] = (p, 1);
        }
        for (slot, t) in self.trees.iter().enumerate() {
            match &self.start_tree {
                Some(st) if st.slot == slot => {
                    for d in 1..=t.depth {
                        for m in 0..=d.min(st.depth) {
                            let idx = t.base + st.depth_offset[d as usize] + m as usize;
                            out[idx] = if m == d {
                                (g.heap_id(slot as u32, st.heap >> (st.depth - d)), 1)
                            } else if m == st.depth {
                                // Descendants of the start itself.
                                (g.heap_id(slot as u32, st.heap << (d - m)), 1u64 << (d - m))
                            } else {
                                let branch = (st.heap >> (st.depth - m - 1)) ^ 1;
                                (g.heap_id(slot as u32, branch << (d - m - 1)), 1u64 << (d - m - 1))
                            };
                        }
                    }
                }
                _ => {
                    for d in 1..=t.depth {
                        out[t.base + d as usize - 1] = (g.heap_id(slot as u32, 1u64 << d), 1u64 << d);
                    }
                }
            }
        }
        out
    }
}

/// Coarsest lumpable partition of a perfect tree-family walk with `start` as a singleton.
pub fn coarsest_lumpable_partition(chain: &ChainOperator<'_, TreeGraph>, start: VertexRef) -> Result<Partition> {
    build_structural_partition(chain, start, true)
}

/// The closed-form symmetry partition itself, without coarsening.
pub fn structural_partition(chain: &ChainOperator<'_, TreeGraph>, start: VertexRef) -> Result<Partition> {
    build_structural_partition(chain, start, false)
}

fn build_structural_partition(chain: &ChainOperator<'_, TreeGraph>, start: VertexRef, coarsen: bool) -> Result<Partition> {
    let g = chain.graph();
    if g.mode() == TreeMode::ExactSize && g.trees().iter().any(|t| !t.is_perfect()) {
        return Err(Error::LumpingUnavailable(
            "exact_size trees are not symmetric; use the full chain or Monte Carlo".into(),
        ));
    }
    let start_id = g.encode(start)?;
    let mut lookup = StructuralLookup::new(g, start_id);
    let members = lookup.members(g);
    let count = lookup.structural_count;

    // Exact rows on the structural quotient, read off one representative each.
    lookup.merge = (0..count as u32).collect();
    let structural_rows: Vec<(u64, ExactRow)> = members
        .iter()
        .map(|&(rep, _)| {
            let deg = chain.degree(rep);
            (deg, exact_row(g, rep, deg, |y| lookup.structural_class(y) as u32))
        })
        .collect();

    let start_structural = lookup.structural_class(start_id);
    let labels = if coarsen {
        refine_quotient(&structural_rows, start_structural)
    } else {
        (0..count as u32).collect()
    };

    // Number final classes by their smallest member id.
    let label_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut min_rep = vec![usize::MAX; label_count];
    for (q, &l) in labels.iter().enumerate() {
        min_rep[l as usize] = min_rep[l as usize].min(members[q].0);
    }
    let mut order: Vec<usize> = (0..label_count).collect();
    order.sort_by_key(|&l| min_rep[l]);
    let mut rank = vec![0u32; label_count];
    for (i, &l) in order.iter().enumerate() {
        rank[l] = i as u32;
    }
    lookup.merge = labels.iter().map(|&l| rank[l as usize]).collect();

    let total = chain.total_degree() as f64;
    let mut sizes = vec![0u64; label_count];
    let mut degree_mass = vec![0u64; label_count];
    let mut rows: Vec<Option<ExactRow>> = vec![None; label_count];
    for (q, &(rep, size)) in members.iter().enumerate() {
        let c = lookup.merge[q] as usize;
        sizes[c] += size;
        degree_mass[c] += size * structural_rows[q].0;
        let mut agg: BTreeMap<u32, u64> = BTreeMap::new();
        let deg = structural_rows[q].0;
        g.for_each_neighbor(rep, |y, w| *agg.entry(lookup.final_class(y) as u32).or_default() += w as u64);
        let row: ExactRow = agg.into_iter().map(|(c, w)| (c, Fraction::new(w, deg))).collect();
        match &rows[c] {
            None => rows[c] = Some(row),
            Some(r) if *r == row => {}
            Some(_) => return Err(Error::Precondition(format!("refinement produced a non-lumpable class {c}"))),
        }
    }
    let rows: Vec<ExactRow> = rows.into_iter().map(|r| r.expect("non-empty")).collect();
    let representatives: Vec<usize> = order.iter().map(|&l| min_rep[l]).collect();
    let lookup = lookup;
    let certificate = certify_structural(chain, &lookup, &rows, &sizes, &representatives, start_id)?;
    Ok(Partition {
        lookup: ClassLookup::Structural(Box::new(lookup)),
        sizes,
        pi_mass: degree_mass.iter().map(|&d| d as f64 / total).collect(),
        representatives,
        start: start_id,
        rows: Some(rows),
        certificate: Some(certificate),
    })
}

/// Coarsest stable labelling of the structural quotient from `{start}, {rest}`.
fn refine_quotient(rows: &[(u64, ExactRow)], start: usize) -> Vec<u32> {
    let n = rows.len();
    let mut labels: Vec<u32> = (0..n).map(|q| u32::from(q != start)).collect();
    let mut count = if n > 1 { 2 } else { 1 };
    loop {
        let mut ids: HashMap<(u32, Vec<(u32, Fraction)>), u32> = HashMap::new();
        let mut next = Vec::with_capacity(n);
        for (q, (deg, row)) in rows.iter().enumerate() {
            let mut agg: BTreeMap<u32, Fraction> = BTreeMap::new();
            for &(t, f) in row {
                let e = agg.entry(labels[t as usize]).or_insert(Fraction::new(0, 1));
                // Fractions in a row share the vertex degree as denominator before reduction.
                let num = e.num * (deg / e.den) + f.num * (deg / f.den);
                *e = Fraction::new(num, *deg);
            }
            let sig = (labels[q], agg.into_iter().collect());
            let fresh = ids.len() as u32;
            next.push(*ids.entry(sig).or_insert(fresh));
        }
        labels = next;
        if ids.len() == count {
            return labels;
        }
        count = ids.len();
    }
}

fn certify_structural(
    chain: &ChainOperator<'_, TreeGraph>,
    lookup: &StructuralLookup,
    rows: &[ExactRow],
    sizes: &[u64],
    representatives: &[usize],
    start: usize,
) -> Result<Certificate> {
    let g = chain.graph();
    let n = g.vertex_count_u64();
    let check = |x: usize| -> std::result::Result<usize, usize> {
        let c = lookup.final_class(x);
        let mut deg = 0u64;
        g.for_each_neighbor(x, |_, w| deg += w as u64);
        let row = exact_row(g, x, deg, |y| lookup.final_class(y) as u32);
        if row == rows[c] {
            Ok(c)
        } else {
            Err(x)
        }
    };
    let exhaustive = n <= EXHAUSTIVE_CERTIFICATE_LIMIT;
    let states: Vec<usize> = if exhaustive {
        Vec::new()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(CERTIFICATE_SEED);
        let mut s: Vec<usize> = (0..CERTIFICATE_SAMPLE).map(|_| rng.random_range(0..n) as usize).collect();
        s.extend_from_slice(representatives);
        s.push(start);
        g.for_each_neighbor(start, |y, _| s.push(y));
        s
    };
    let fail = |x: usize| {
        Error::Precondition(format!("lumpability certificate failed at state {x} ({})", g.describe(g.decode(x).expect("valid"))))
    };
    if exhaustive {
        const CHUNK: usize = 1 << 16;
        let chunks = (n as usize).div_ceil(CHUNK);
        let counted = (0..chunks)
            .into_par_iter()
            .map(|ci| {
                let mut local = vec![0u64; sizes.len()];
                for x in ci * CHUNK..((ci + 1) * CHUNK).min(n as usize) {
                    local[check(x)?] += 1;
                }
                Ok(local)
            })
            .try_reduce(
                || vec![0u64; sizes.len()],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    Ok(a)
                },
            )
            .map_err(fail)?;
        if counted != sizes {
            return Err(Error::Precondition("class sizes disagree with the enumeration".into()));
        }
        Ok(Certificate { checked_states: n, exhaustive: true })
    } else {
        states.par_iter().try_for_each(|&x| check(x).map(|_| ())).map_err(fail)?;
        Ok(Certificate { checked_states: states.len() as u64, exhaustive: false })
    }
}

/// Lumped chain over the classes of a certified partition.
#[derive(Clone, Debug)]
pub struct QuotientChain {
    transition: Mat<f64>,
    pi: Vec<f64>,
    partition: Partition,
    laziness: f64,
}

pub fn quotient_chain<G: Adjacency>(chain: &ChainOperator<'_, G>, partition: Partition) -> Result<QuotientChain> {
    let rows = match (&partition.rows, &partition.certificate) {
        (Some(r), Some(_)) => r,
        _ => return Err(Error::Precondition("partition has not been certified as lumpable".into())),
    };
    let k = partition.class_count();
    let laziness = chain.laziness();
    let mut transition = Mat::<f64>::zeros(k, k);
    for (c, row) in rows.iter().enumerate() {
        transition[(c, c)] += laziness;
        for &(t, f) in row {
            transition[(c, t as usize)] += (1.0 - laziness) * f.as_f64();
        }
    }
    let pi = partition.pi_mass.clone();
    Ok(QuotientChain { transition, pi, partition, laziness })
}

impl QuotientChain {
    pub fn transition(&self) -> &Mat<f64> {
        &self.transition
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn laziness(&self) -> f64 {
        self.laziness
    }

    pub fn class_count(&self) -> usize {
        self.pi.len()
    }

    pub fn start_class(&self) -> usize {
        self.partition.start_class()
    }

    pub fn row_sum_defect(&self) -> f64 {
        (0..self.class_count())
            .map(|c| ((0..self.class_count()).map(|d| self.transition[(c, d)]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|pi(C) Q(C, D) - pi(D) Q(D, C)|`.
    pub fn reversibility_defect(&self) -> f64 {
        let k = self.class_count();
        let mut worst = 0.0f64;
        for c in 0..k {
            for d in 0..c {
                worst = worst.max((self.pi[c] * self.transition[(c, d)] - self.pi[d] * self.transition[(d, c)]).abs());
            }
        }
        worst
    }

    /// `q P_quotient`.
    pub fn step(&self, q: &[f64]) -> Vec<f64> {
        let k = self.class_count();
        let mut out = vec![0.0; k];
        for c in 0..k {
            if q[c] == 0.0 {
                continue;
            }
            for (d, o) in out.iter_mut().enumerate() {
                let p = self.transition[(c, d)];
                if p != 0.0 {
                    *o += q[c] * p;
                }
            }
        }
        out
    }

    /// Class distribution after `t` steps from the start class.
    pub fn distribution_from_start(&self, t: u64) -> Vec<f64> {
        let mut q = vec![0.0; self.class_count()];
        q[self.start_class()] = 1.0;
        for _ in 0..t {
            q = self.step(&q);
        }
        q
    }

    /// Full-state distribution `x -> q(C(x)) pi(x) / pi(C(x))`.
    pub fn lift<G: Adjacency>(&self, chain: &ChainOperator<'_, G>, q: &[f64]) -> Result<ProbVector> {
        if q.len() != self.class_count() {
            return Err(Error::Dimension { left: q.len(), right: self.class_count() });
        }
        let n = chain.state_count();
        let values = (0..n)
            .map(|x| {
                let c = self.partition.class_of(x);
                q[c] * chain.pi(x) / self.pi[c]
            })
            .collect();
        Ok(ProbVector::from_raw(values))
    }

    /// CSV with columns `class,representative,size,pi_mass`.
    pub fn write_classes_csv<W: Write>(&self, mut out: W, describe: impl Fn(usize) -> String) -> Result<()> {
        writeln!(out, "class,representative,size,pi_mass")?;
        for c in 0..self.class_count() {
            writeln!(
                out,
                "{c},{},{},{:e}",
                describe(self.partition.representatives[c]),
                self.partition.sizes[c],
                self.pi[c]
            )?;
        }
        Ok(())
    }

    /// Row-major text matrix, one row per line, space separated.
    pub fn write_matrix<W: Write>(&self, mut out: W) -> Result<()> {
        let k = self.class_count();
        for c in 0..k {
            let line: Vec<String> = (0..k).map(|d| format!("{:e}", self.transition[(c, d)])).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LumpingValidation {
    /// `(t, L-infinity error)` pairs.
    pub errors: Vec<(u64, f64)>,
    pub max_error: f64,
}

/// Compares lifted quotient distributions with full-chain powering from the start.
pub fn validate_lumping<G: Adjacency>(
    chain: &ChainOperator<'_, G>,
    quotient: &QuotientChain,
    t_list: &[u64],
) -> Result<LumpingValidation> {
    let mut times = t_list.to_vec();
    times.sort_unstable();
    let n = chain.state_count();
    let mut full = ProbVector::point_mass(n, quotient.partition.start)?;
    let mut q = vec![0.0; quotient.class_count()];
    q[quotient.start_class()] = 1.0;
    let mut now = 0u64;
    let mut errors = Vec::new();
    for &t in &times {
        while now < t {
            full = chain.step(&full)?;
            q = quotient.step(&q);
            now += 1;
        }
        let lifted = quotient.lift(chain, &q)?;
        errors.push((t, lifted.max_abs_diff(&full)?));
    }
    let max_error = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(LumpingValidation { errors, max_error })
}
