//! The tree family: a path `[0, n_k]`, a large binary tree `T0` rooted at path
//! vertex 0, and binary trees `Tj` rooted at path vertex `n_j`.
//!
//! Vertices are never stored. Each one has a global id in `[0, vertex_count)`:
//!
//! * path position `i` has id `i` (so tree roots are path vertices),
//! * heap index `h >= 2` of tree slot `s` has id `offset[s] + h - 2`.
//!
//! Tree regions use array-style heap indexing (root 1, children `2h`, `2h+1`),
//! so neighbors are pure arithmetic. Below a size threshold a CSR copy of the
//! adjacency is materialized for faster sweeps.

use std::fmt;
use std::str::FromStr;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;

pub const DEFAULT_MATERIALIZE_THRESHOLD: u64 = 1_000_000;
pub const MAX_DEGREE: usize = 4;
const NO_TREE: u32 = u32::MAX;
/// Ids must fit comfortably in memory-indexable ranges even in implicit mode.
const MAX_VERTICES: u64 = 1 << 40;

pub type NeighborList = ArrayVec<(usize, u32), MAX_DEGREE>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSchedule {
    /// `n_j = 2^(2^j)`
    DoublyExponential,
    /// `n_j = base^j`
    Geometric { base: u64 },
}

impl LevelSchedule {
    pub fn level(&self, j: u32) -> Option<u64> {
        match *self {
            LevelSchedule::DoublyExponential => {
                let exponent = 1u64.checked_shl(j)?;
                if exponent >= 63 {
                    None
                } else {
                    Some(1u64 << exponent)
                }
            }
            LevelSchedule::Geometric { base } => base.checked_pow(j),
        }
    }
}

/// Positive rational exponent `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MassExponent {
    pub num: u32,
    pub den: u32,
}

impl MassExponent {
    pub const CUBE: MassExponent = MassExponent { num: 3, den: 1 };

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for MassExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for MassExponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("alpha must be a positive rational like 3 or 5/2, got {s:?}"));
        let (num, den) = match s.trim().split_once('/') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        if num == 0 || den == 0 {
            return Err(bad());
        }
        let g = num_integer::gcd(num, den);
        Ok(MassExponent { num: num / g, den: den / g })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeMode {
    /// Sizes rounded down to `2^(d+1) - 1`; enables exact symmetry lumping.
    Perfect,
    /// Left-filled complete binary trees with exactly the requested size.
    ExactSize,
}

impl fmt::Display for TreeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TreeMode::Perfect => "perfect",
            TreeMode::ExactSize => "exact_size",
        })
    }
}

impl FromStr for TreeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "perfect" => Ok(TreeMode::Perfect),
            "exact" | "exact_size" | "exact-size" => Ok(TreeMode::ExactSize),
            other => Err(Error::InvalidSpec(format!("unknown tree mode {other:?}"))),
        }
    }
}

/// Parameters of one member of the tree family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeFamilySpec {
    pub k: u32,
    pub schedule: LevelSchedule,
    pub alpha: MassExponent,
    /// First attached level; `None` means `ceil(k / 2)`.
    pub attach_lo: Option<u32>,
    pub mode: TreeMode,
    pub leaf_self_loops: bool,
}

impl TreeFamilySpec {
    /// The canonical member: `n_j = 2^(2^j)`, `N = n_k^3`, perfect trees.
    pub fn canonical(k: u32) -> Self {
        Self {
            k,
            schedule: LevelSchedule::DoublyExponential,
            alpha: MassExponent::CUBE,
            attach_lo: None,
            mode: TreeMode::Perfect,
            leaf_self_loops: false,
        }
    }

    pub fn geometric(k: u32, base: u64) -> Self {
        Self { schedule: LevelSchedule::Geometric { base }, ..Self::canonical(k) }
    }

    pub fn with_mode(mut self, mode: TreeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_leaf_self_loops(mut self, on: bool) -> Self {
        self.leaf_self_loops = on;
        self
    }

    pub fn attach_lo(&self) -> u32 {
        self.attach_lo.unwrap_or(self.k.div_ceil(2))
    }

    /// `(j, n_j)` for every attached level.
    pub fn levels(&self) -> Result<Vec<(u32, u64)>> {
        if self.k < 1 {
            return Err(Error::InvalidSpec("k must be at least 1".into()));
        }
        if let LevelSchedule::Geometric { base } = self.schedule {
            if base < 2 {
                return Err(Error::InvalidSpec(format!("level base must be >= 2, got {base}")));
            }
        }
        let lo = self.attach_lo();
        if lo < 1 || lo > self.k {
            return Err(Error::InvalidSpec(format!("attach_lo {lo} outside [1, k={}]", self.k)));
        }
        let mut out = Vec::new();
        for j in lo..=self.k {
            let n = self
                .schedule
                .level(j)
                .ok_or_else(|| Error::InvalidSpec(format!("level n_{j} overflows")))?;
            if let Some(&(_, prev)) = out.last() {
                if n <= prev {
                    return Err(Error::InvalidSpec("levels must be strictly increasing".into()));
                }
            }
            out.push((j, n));
        }
        Ok(out)
    }

    pub fn path_length(&self) -> Result<u64> {
        Ok(self.levels()?.last().expect("k >= attach_lo").1)
    }

    /// `N = floor(n_k ^ alpha)`.
    pub fn mass(&self) -> Result<u64> {
        let nk = self.path_length()?;
        let power = (nk as u128)
            .checked_pow(self.alpha.num)
            .filter(|&p| p < (1u128 << 100))
            .ok_or_else(|| Error::InvalidSpec("n_k^alpha overflows".into()))?;
        let n = integer_root(power, self.alpha.den);
        if n >= MAX_VERTICES as u128 {
            return Err(Error::InvalidSpec(format!("N = {n} is too large")));
        }
        let n = n as u64;
        if n < nk {
            return Err(Error::InvalidSpec(format!("N = {n} is smaller than n_k = {nk}")));
        }
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        self.mass().map(|_| ())
    }

    /// Plain-text `key = value` form.
    pub fn to_config(&self) -> String {
        let mut s = format!("k = {}\n", self.k);
        if let LevelSchedule::Geometric { base } = self.schedule {
            s.push_str(&format!("base = {base}\n"));
        }
        s.push_str(&format!("alpha = {}\n", self.alpha));
        if let Some(lo) = self.attach_lo {
            s.push_str(&format!("attach_lo = {lo}\n"));
        }
        s.push_str(&format!("mode = {}\n", self.mode));
        s.push_str(&format!("leaf_self_loops = {}\n", self.leaf_self_loops));
        s
    }

    /// Parses the `key = value` form; missing keys take their defaults except `k`.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut spec = Self::canonical(0);
        let mut have_k = false;
        for (key, value, line) in parse_config_lines(text)? {
            let err = |message: String| Error::Config { line, message };
            match key.as_str() {
                "k" => {
                    spec.k = value.parse().map_err(|_| err(format!("bad k {value:?}")))?;
                    have_k = true;
                }
                "base" => {
                    let base = value.parse().map_err(|_| err(format!("bad base {value:?}")))?;
                    spec.schedule = LevelSchedule::Geometric { base };
                }
                "alpha" => spec.alpha = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "attach_lo" => {
                    spec.attach_lo = Some(value.parse().map_err(|_| err(format!("bad attach_lo {value:?}")))?)
                }
                "mode" => spec.mode = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "leaf_self_loops" => {
                    spec.leaf_self_loops = value.parse().map_err(|_| err(format!("bad boolean {value:?}")))?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if !have_k {
            return Err(Error::Config { line: 0, message: "missing key k".into() });
        }
        Ok(spec)
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_config_lines(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn integer_root(x: u128, den: u32) -> u128 {
    if den == 1 {
        return x;
    }
    let mut r = (x as f64).powf(1.0 / den as f64).round() as u128;
    let pow = |r: u128| r.checked_pow(den);
    while pow(r).map_or(true, |p| p > x) {
        r -= 1;
    }
    while pow(r + 1).is_some_and(|p| p <= x) {
        r += 1;
    }
    r
}

/// Largest perfect-binary-tree size `2^(d+1) - 1` not exceeding `m`.
pub fn perfect_size_at_most(m: u64) -> u64 {
    assert!(m >= 1);
    let d = 63 - (m + 1).leading_zeros();
    (1u64 << d) - 1
}

fn heap_depth(h: u64) -> u32 {
    63 - h.leading_zeros()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Path,
    /// `T0`, rooted at path vertex 0.
    Origin,
    /// `Tj`, rooted at path vertex `n_j`.
    Attached { level: u32 },
    /// A tree in a hand-assembled graph.
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionId {
    Path,
    Tree(u32),
}

/// Region-tagged vertex address. Tree roots are always addressed as path
/// vertices; `Tree(s)` refs use heap indices `>= 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexRef {
    pub region: RegionId,
    pub index: u64,
}

impl VertexRef {
    pub fn path(position: u64) -> Self {
        Self { region: RegionId::Path, index: position }
    }

    pub fn tree(slot: u32, heap: u64) -> Self {
        Self { region: RegionId::Tree(slot), index: heap }
    }
}

impl fmt::Display for VertexRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.region {
            RegionId::Path => write!(f, "path:{}", self.index),
            RegionId::Tree(s) => write!(f, "tree{}:{}", s, self.index),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRegion {
    pub name: String,
    pub kind: RegionKind,
    pub root_position: u64,
    pub requested_size: u64,
    /// Actual vertex count, root included.
    pub size: u64,
    /// Global id of heap index 2.
    pub offset: u64,
    /// Depth of the deepest vertex (root has depth 0).
    pub depth: u32,
}

impl TreeRegion {
    /// True if heap index `h` has no children.
    pub fn is_leaf(&self, h: u64) -> bool {
        2 * h > self.size
    }

    pub fn is_perfect(&self) -> bool {
        self.size == perfect_size_at_most(self.size)
    }
}

/// Tree to hang on the path when assembling a graph by hand.
#[derive(Clone, Debug)]
pub struct TreeRequest {
    pub name: String,
    pub kind: RegionKind,
    pub position: u64,
    pub size: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    /// Build a CSR adjacency copy when `vertex_count` is at most this.
    pub materialize_threshold: u64,
    /// Require the CSR copy; fails when `vertex_count` exceeds the budget.
    pub require_materialized: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { materialize_threshold: DEFAULT_MATERIALIZE_THRESHOLD, require_materialized: false }
    }
}

#[derive(Clone, Debug)]
struct Csr {
    starts: Vec<u32>,
    targets: Vec<u32>,
    weights: Vec<u8>,
}

/// Immutable tree graph with implicit adjacency.
#[derive(Clone, Debug)]
pub struct TreeGraph {
    path_len: u64,
    trees: Vec<TreeRegion>,
    root_at: Vec<u32>,
    leaf_self_loops: bool,
    mode: TreeMode,
    vertex_count: u64,
    spec: Option<TreeFamilySpec>,
    csr: Option<Csr>,
}

/// Builds the family member described by `spec` with default options.
pub fn build_family_tree(spec: &TreeFamilySpec) -> Result<TreeGraph> {
    build_family_tree_with(spec, BuildOptions::default())
}

pub fn build_family_tree_with(spec: &TreeFamilySpec, options: BuildOptions) -> Result<TreeGraph> {
    let levels = spec.levels()?;
    let mass = spec.mass()?;
    let path_len = levels.last().expect("non-empty").1;
    let mut requests = vec![TreeRequest { name: "T0".into(), kind: RegionKind::Origin, position: 0, size: mass }];
    for &(j, nj) in &levels {
        requests.push(TreeRequest {
            name: format!("T{j}"),
            kind: RegionKind::Attached { level: j },
            position: nj,
            size: (mass / nj).max(1),
        });
    }
    let mut g = TreeGraph::assemble(path_len, &requests, spec.mode, spec.leaf_self_loops, options)?;
    g.spec = Some(spec.clone());
    Ok(g)
}

impl TreeGraph {
    pub fn assemble(
        path_len: u64,
        requests: &[TreeRequest],
        mode: TreeMode,
        leaf_self_loops: bool,
        options: BuildOptions,
    ) -> Result<Self> {
        if path_len >= (1 << 26) {
            return Err(Error::InvalidSpec(format!("path length {path_len} is too large")));
        }
        let mut root_at = vec![NO_TREE; path_len as usize + 1];
        let mut trees = Vec::with_capacity(requests.len());
        let mut offset = path_len + 1;
        for (slot, req) in requests.iter().enumerate() {
            if req.position > path_len {
                return Err(Error::InvalidSpec(format!("{} attached beyond the path end", req.name)));
            }
            if req.size < 1 {
                return Err(Error::InvalidSpec(format!("{} must have at least one vertex", req.name)));
            }
            if root_at[req.position as usize] != NO_TREE {
                return Err(Error::InvalidSpec(format!("two trees attached at position {}", req.position)));
            }
            root_at[req.position as usize] = slot as u32;
            let size = match mode {
                TreeMode::Perfect => perfect_size_at_most(req.size),
                TreeMode::ExactSize => req.size,
            };
            trees.push(TreeRegion {
                name: req.name.clone(),
                kind: req.kind,
                root_position: req.position,
                requested_size: req.size,
                size,
                offset,
                depth: heap_depth(size),
            });
            offset = offset
                .checked_add(size - 1)
                .filter(|&o| o <= MAX_VERTICES)
                .ok_or_else(|| Error::InvalidSpec("vertex count overflows".into()))?;
        }
        let mut g = TreeGraph {
            path_len,
            trees,
            root_at,
            leaf_self_loops,
            mode,
            vertex_count: offset,
            spec: None,
            csr: None,
        };
        if options.require_materialized && g.vertex_count > options.materialize_threshold {
            return Err(Error::MemoryBudget { needed: g.vertex_count, budget: options.materialize_threshold });
        }
        if g.vertex_count <= options.materialize_threshold && g.vertex_count < u32::MAX as u64 {
            g.csr = Some(g.build_csr());
        }
        Ok(g)
    }

    /// Bare path `[0, n]`.
    pub fn path(n: u64) -> Result<Self> {
        Self::assemble(n, &[], TreeMode::Perfect, false, BuildOptions::default())
    }

    /// A single binary tree of (requested) size `m`, rooted at path vertex 0.
    pub fn binary_tree(m: u64, mode: TreeMode, leaf_self_loops: bool) -> Result<Self> {
        let req = TreeRequest { name: "T".into(), kind: RegionKind::Other, position: 0, size: m };
        Self::assemble(0, &[req], mode, leaf_self_loops, BuildOptions::default())
    }

    fn build_csr(&self) -> Csr {
        let n = self.vertex_count as usize;
        let mut starts = Vec::with_capacity(n + 1);
        let mut targets = Vec::with_capacity(2 * n);
        let mut weights = Vec::with_capacity(2 * n);
        starts.push(0u32);
        for v in 0..n {
            for (u, w) in self.implicit_neighbors(v) {
                targets.push(u as u32);
                weights.push(w as u8);
            }
            starts.push(targets.len() as u32);
        }
        Csr { starts, targets, weights }
    }

    pub fn spec(&self) -> Option<&TreeFamilySpec> {
        self.spec.as_ref()
    }

    pub fn mode(&self) -> TreeMode {
        self.mode
    }

    pub fn leaf_self_loops(&self) -> bool {
        self.leaf_self_loops
    }

    pub fn path_len(&self) -> u64 {
        self.path_len
    }

    pub fn trees(&self) -> &[TreeRegion] {
        &self.trees
    }

    pub fn tree(&self, slot: u32) -> &TreeRegion {
        &self.trees[slot as usize]
    }

    pub fn is_materialized(&self) -> bool {
        self.csr.is_some()
    }

    pub fn vertex_count_u64(&self) -> u64 {
        self.vertex_count
    }

    /// Slot of the tree rooted at path position `p`, if any.
    pub fn tree_rooted_at(&self, p: u64) -> Option<u32> {
        self.root_at.get(p as usize).copied().filter(|&s| s != NO_TREE)
    }

    /// Slot of the origin tree `T0` (the tree rooted at path vertex 0).
    pub fn origin_slot(&self) -> Option<u32> {
        self.tree_rooted_at(0)
    }

    /// Closed-form vertex count: path vertices plus non-root tree vertices.
    pub fn closed_form_vertex_count(&self) -> u64 {
        self.path_len + 1 + self.trees.iter().map(|t| t.size - 1).sum::<u64>()
    }

    pub fn is_path_vertex(&self, id: usize) -> bool {
        (id as u64) <= self.path_len
    }

    /// Tree slot containing a non-path vertex id.
    fn slot_of(&self, id: u64) -> usize {
        debug_assert!(id > self.path_len && id < self.vertex_count);
        self.trees.partition_point(|t| t.offset <= id) - 1
    }

    /// Region of a global id; path vertices (tree roots included) report `Path`.
    pub fn region_of(&self, id: usize) -> RegionId {
        if self.is_path_vertex(id) {
            RegionId::Path
        } else {
            RegionId::Tree(self.slot_of(id as u64) as u32)
        }
    }

    /// Tree slot and heap index of a non-path vertex.
    pub fn tree_coordinates(&self, id: usize) -> Option<(u32, u64)> {
        if self.is_path_vertex(id) || id as u64 >= self.vertex_count {
            return None;
        }
        let slot = self.slot_of(id as u64);
        Some((slot as u32, id as u64 - self.trees[slot].offset + 2))
    }

    /// Id of heap index `h` in tree `slot` (heap 1 maps to the root's path vertex).
    pub fn heap_id(&self, slot: u32, h: u64) -> usize {
        let t = &self.trees[slot as usize];
        if h == 1 {
            t.root_position as usize
        } else {
            (t.offset + h - 2) as usize
        }
    }

    pub fn encode(&self, v: VertexRef) -> Result<usize> {
        match v.region {
            RegionId::Path if v.index <= self.path_len => Ok(v.index as usize),
            RegionId::Tree(s) if (s as usize) < self.trees.len() => {
                let t = &self.trees[s as usize];
                if v.index >= 1 && v.index <= t.size {
                    Ok(self.heap_id(s, v.index))
                } else {
                    Err(Error::Addressing(format!("{v}: heap index outside [1, {}]", t.size)))
                }
            }
            _ => Err(Error::Addressing(format!("{v} is not in this graph"))),
        }
    }

    pub fn decode(&self, id: usize) -> Result<VertexRef> {
        if id as u64 >= self.vertex_count {
            return Err(Error::Addressing(format!("id {id} >= vertex count {}", self.vertex_count)));
        }
        Ok(match self.tree_coordinates(id) {
            Some((s, h)) => VertexRef::tree(s, h),
            None => VertexRef::path(id as u64),
        })
    }

    /// Human-readable vertex label such as `T1:5` or `path:16`.
    pub fn describe(&self, v: VertexRef) -> String {
        match v.region {
            RegionId::Path => format!("path:{}", v.index),
            RegionId::Tree(s) => match self.trees.get(s as usize) {
                Some(t) => format!("{}:{}", t.name, v.index),
                None => v.to_string(),
            },
        }
    }

    /// Depth within the vertex's own tree (path vertices have depth 0).
    pub fn tree_depth(&self, id: usize) -> u32 {
        self.tree_coordinates(id).map_or(0, |(_, h)| heap_depth(h))
    }

    fn implicit_neighbors(&self, v: usize) -> NeighborList {
        let mut out = NeighborList::new();
        let id = v as u64;
        if id <= self.path_len {
            if id > 0 {
                out.push((v - 1, 1));
            }
            if id < self.path_len {
                out.push((v + 1, 1));
            }
            let slot = self.root_at[v];
            if slot != NO_TREE {
                let t = &self.trees[slot as usize];
                for c in [2u64, 3] {
                    if c <= t.size {
                        out.push(((t.offset + c - 2) as usize, 1));
                    }
                }
            }
        } else {
            let slot = self.slot_of(id);
            let t = &self.trees[slot];
            let h = id - t.offset + 2;
            let parent = h / 2;
            let pid = if parent == 1 { t.root_position } else { t.offset + parent - 2 };
            out.push((pid as usize, 1));
            let c = 2 * h;
            if c <= t.size {
                out.push(((t.offset + c - 2) as usize, 1));
                if c < t.size {
                    out.push(((t.offset + c - 1) as usize, 1));
                }
            } else if self.leaf_self_loops {
                out.push((v, 2));
            }
        }
        out
    }

    /// Neighbors of a global id with edge weights, in deterministic order:
    /// path vertices list left, right, then tree children; tree vertices list
    /// parent, children, then the self-loop.
    pub fn neighbor_list(&self, v: usize) -> NeighborList {
        match &self.csr {
            Some(csr) => {
                let (a, b) = (csr.starts[v] as usize, csr.starts[v + 1] as usize);
                (a..b).map(|e| (csr.targets[e] as usize, csr.weights[e] as u32)).collect()
            }
            None => self.implicit_neighbors(v),
        }
    }

    /// Graph neighbors of `v` as vertex refs.
    pub fn neighbors(&self, v: VertexRef) -> Result<Vec<VertexRef>> {
        let id = self.encode(v)?;
        self.neighbor_list(id).iter().map(|&(u, _)| self.decode(u)).collect()
    }

    /// Candidate worst-case starts: the far path end, every region root and
    /// one deepest (leftmost) leaf per tree region, without duplicates.
    pub fn canonical_starts(&self) -> Vec<VertexRef> {
        let mut out = vec![VertexRef::path(self.path_len), VertexRef::path(0)];
        for t in &self.trees {
            out.push(VertexRef::path(t.root_position));
        }
        for (s, t) in self.trees.iter().enumerate() {
            if t.depth >= 1 {
                out.push(VertexRef::tree(s as u32, 1u64 << t.depth));
            }
        }
        let mut seen = std::collections::HashSet::new();
        out.retain(|v| seen.insert(*v));
        out
    }

    /// All ids of a tree region, root included.
    pub fn region_ids(&self, slot: u32) -> impl Iterator<Item = usize> + '_ {
        let t = &self.trees[slot as usize];
        std::iter::once(t.root_position as usize).chain((t.offset..t.offset + t.size - 1).map(|i| i as usize))
    }

    /// Membership mask of a tree region (root included).
    pub fn region_mask(&self, slot: u32) -> Vec<bool> {
        let mut mask = vec![false; self.vertex_count as usize];
        for id in self.region_ids(slot) {
            mask[id] = true;
        }
        mask
    }

    /// Membership mask of the subtree below heap index `h` of tree `slot`.
    pub fn subtree_mask(&self, slot: u32, h: u64) -> Vec<bool> {
        let t = &self.trees[slot as usize];
        let mut mask = vec![false; self.vertex_count as usize];
        let mut lo = h;
        let mut hi = h;
        while lo <= t.size {
            for x in lo..=hi.min(t.size) {
                mask[self.heap_id(slot, x)] = true;
            }
            lo *= 2;
            hi = 2 * hi + 1;
        }
        mask
    }

    pub fn summary(&self) -> TreeSummary {
        let mut regions = vec![RegionSummary {
            name: "path".into(),
            requested_size: self.path_len + 1,
            actual_size: self.path_len + 1,
            root_position: 0,
            depth: 0,
        }];
        regions.extend(self.trees.iter().map(|t| RegionSummary {
            name: t.name.clone(),
            requested_size: t.requested_size,
            actual_size: t.size,
            root_position: t.root_position,
            depth: t.depth,
        }));
        TreeSummary {
            spec: self.spec.clone(),
            mode: self.mode,
            leaf_self_loops: self.leaf_self_loops,
            levels: self.spec.as_ref().and_then(|s| s.levels().ok()).unwrap_or_default(),
            mass: self.spec.as_ref().and_then(|s| s.mass().ok()),
            vertex_count: self.vertex_count,
            edge_count: self.vertex_count - 1,
            materialized: self.is_materialized(),
            regions,
        }
    }
}

impl Adjacency for TreeGraph {
    fn vertex_count(&self) -> usize {
        self.vertex_count as usize
    }

    #[inline]
    fn for_each_neighbor<F: FnMut(usize, u32)>(&self, v: usize, mut f: F) {
        match &self.csr {
            Some(csr) => {
                for e in csr.starts[v] as usize..csr.starts[v + 1] as usize {
                    f(csr.targets[e] as usize, csr.weights[e] as u32);
                }
            }
            None => {
                for (u, w) in self.implicit_neighbors(v) {
                    f(u, w);
                }
            }
        }
    }

    fn edge_count(&self) -> u64 {
        self.vertex_count - 1
    }

    fn region_name(&self, v: usize) -> String {
        match self.region_of(v) {
            RegionId::Path => "path".to_string(),
            RegionId::Tree(s) => self.trees[s as usize].name.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub name: String,
    pub requested_size: u64,
    pub actual_size: u64,
    pub root_position: u64,
    pub depth: u32,
}

/// JSON-exportable description of a built graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub spec: Option<TreeFamilySpec>,
    pub mode: TreeMode,
    pub leaf_self_loops: bool,
    /// `(j, n_j)` pairs.
    pub levels: Vec<(u32, u64)>,
    /// `N`.
    pub mass: Option<u64>,
    pub vertex_count: u64,
    pub edge_count: u64,
    pub materialized: bool,
    pub regions: Vec<RegionSummary>,
}
