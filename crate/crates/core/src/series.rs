//! Diagrammatic expansion of the excitation density `n_q`.
//!
//! The order-`n` term is a sum over sign patterns `xi` (which half of the
//! generator sits at each vertex) and over contraction maps that send every
//! annihilating leg to a creating leg of the same species. Each c-vertex
//! (one `c` factor of a generator vertex) carries one particle leg and one
//! hole leg, so the contraction lines decompose into loops. Every loop shares
//! a single patch index and its momentum sum reduces to a count of closed
//! walks through pair lists.
//!
//! Legs are addressed by slot ids `4 * vertex + rank` with ranks
//! `p = 0, h = 1, p' = 2, h' = 3`. Vertex 0 is the number operator at `q`;
//! generator vertices are `1..=n`. The slot id order is the ordering used by
//! the sign rule.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{build_s, FockOracle};
use crate::kernel::{build_all, KMatrixBundle, Potential};
use crate::lattice::{FermiSystem, Momentum};
use crate::numeric::{
    binomial, exp_tail, factorial, factorial_u128, neumaier_sum, next_permutation, nth_permutation, pairwise_sum,
};
use crate::patches::{PatchId, PatchScheme};

/// Orders above this need `allow_large_orders` for the full expansion.
pub const EXACT_ORDER_LIMIT: usize = 6;

/// Candidate count above which the bosonized expansion needs `allow_large_orders`.
pub const BOSONIZED_CANDIDATE_LIMIT: u128 = 50_000_000;

/// Patch masks are `u128`.
pub const MAX_PATCHES: usize = 128;

const NONE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QSide {
    Outside,
    Inside,
}

impl QSide {
    pub fn of(sys: &FermiSystem, q: Momentum) -> Self {
        if sys.in_fermi_ball(q) {
            QSide::Inside
        } else {
            QSide::Outside
        }
    }

    /// Species of the two legs of the number-operator vertex.
    pub fn species(self) -> Species {
        match self {
            QSide::Outside => Species::Particle,
            QSide::Inside => Species::Hole,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Particle,
    Hole,
}

impl Species {
    pub fn other(self) -> Self {
        match self {
            Species::Particle => Species::Hole,
            Species::Hole => Species::Particle,
        }
    }

    fn rank(self, primed: bool) -> usize {
        match self {
            Species::Particle => 2 * primed as usize,
            Species::Hole => 1 + 2 * primed as usize,
        }
    }

    fn of_rank(rank: usize) -> Self {
        if rank.is_multiple_of(2) {
            Species::Particle
        } else {
            Species::Hole
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExactTruncated,
    BosonizedSeries,
    BosonizedClosed,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::ExactTruncated, Method::BosonizedSeries, Method::BosonizedClosed, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::ExactTruncated => "exact-truncated",
            Method::BosonizedSeries => "bosonized-series",
            Method::BosonizedClosed => "bosonized-closed",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// `+1` places `S_+` at a vertex, `-1` places `S_-`.
pub type SignPattern = Vec<i8>;

/// All sign patterns of length `n` with as many `+1` as `-1`, in
/// lexicographic order (`-1 < +1`). Other patterns have zero vacuum
/// expectation by particle-number counting.
pub fn enumerate_sign_patterns(n: usize) -> Result<Vec<SignPattern>> {
    if !n.is_multiple_of(2) {
        return Err(Error::OddOrder(n));
    }
    if n == 0 {
        return Err(Error::InvalidParameter { field: "n", reason: "order must be at least 2".into() });
    }
    Ok(sign_patterns(n))
}

fn sign_patterns(n: usize) -> Vec<SignPattern> {
    let mut out = Vec::new();
    for bits in 0u64..(1u64 << n) {
        if bits.count_ones() as usize == n / 2 {
            // bit n-1-j set means xi_j = +1, which yields lexicographic order
            out.push((0..n).map(|j| if bits >> (n - 1 - j) & 1 == 1 { 1 } else { -1 }).collect());
        }
    }
    out
}

pub fn slot(vertex: usize, rank: usize) -> usize {
    4 * vertex + rank
}

fn vertex_of(s: usize) -> usize {
    s / 4
}

fn cv_of(s: usize) -> usize {
    2 * (s / 4 - 1) + (s % 4) / 2
}

/// Creating and annihilating slots of each species for a given sign pattern.
#[derive(Clone, Debug)]
pub struct Layout {
    pub n: usize,
    pub side: QSide,
    pub xi: SignPattern,
    /// Indexed by species (particle, hole), in slot-id order.
    pub annihilators: [Vec<usize>; 2],
    pub creators: [Vec<usize>; 2],
}

fn sp(s: Species) -> usize {
    match s {
        Species::Particle => 0,
        Species::Hole => 1,
    }
}

impl Layout {
    pub fn new(side: QSide, xi: &[i8]) -> Self {
        let n = xi.len();
        let x = side.species();
        let mut annihilators: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let mut creators: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        creators[sp(x)].push(slot(0, x.rank(false)));
        annihilators[sp(x)].push(slot(0, x.rank(true)));
        for (j, &e) in xi.iter().enumerate() {
            for rank in 0..4 {
                let s = slot(j + 1, rank);
                let bucket = if e > 0 { &mut creators } else { &mut annihilators };
                bucket[rank % 2].push(s);
            }
        }
        for v in annihilators.iter_mut().chain(creators.iter_mut()) {
            v.sort_unstable();
        }
        Layout { n, side, xi: xi.to_vec(), annihilators, creators }
    }

    pub fn slot_count(&self) -> usize {
        4 * (self.n + 1)
    }

    /// Number of contraction maps before the admissibility filter.
    pub fn candidate_count(&self) -> u128 {
        factorial_u128(self.annihilators[0].len() as u64) * factorial_u128(self.annihilators[1].len() as u64)
    }
}

/// A contraction map: `map[a]` is the creating slot contracted with the
/// annihilating slot `a`; creating and unused slots hold `usize::MAX`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContractionPair {
    pub map: Vec<usize>,
}

impl ContractionPair {
    fn from_perms(layout: &Layout, perms: [&[usize]; 2]) -> Self {
        let mut map = vec![NONE; layout.slot_count()];
        fill_map(layout, perms, &mut map);
        ContractionPair { map }
    }

    /// Undirected partner of each used slot.
    pub fn partners(&self) -> Vec<usize> {
        let mut partner = vec![NONE; self.map.len()];
        for (a, &c) in self.map.iter().enumerate() {
            if c != NONE {
                partner[a] = c;
                partner[c] = a;
            }
        }
        partner
    }
}

fn fill_map(layout: &Layout, perms: [&[usize]; 2], map: &mut [usize]) {
    for s in 0..2 {
        for (i, &a) in layout.annihilators[s].iter().enumerate() {
            map[a] = layout.creators[s][perms[s][i]];
        }
    }
}

/// The admissible contraction maps for a sign pattern, in the order of
/// [`enumerate_all_contraction_pairs`].
pub fn enumerate_contraction_pairs(xi: &[i8], side: QSide) -> Vec<ContractionPair> {
    let layout = Layout::new(side, xi);
    enumerate_all_contraction_pairs(&layout).into_iter().filter(|p| admissible(&layout, p)).collect()
}

/// Every species-preserving contraction map (admissible or not), in
/// lexicographic order of the particle permutation, then the hole one.
pub fn enumerate_all_contraction_pairs(layout: &Layout) -> Vec<ContractionPair> {
    let mut out = Vec::new();
    let la = layout.annihilators[0].len();
    let lb = layout.annihilators[1].len();
    crate::numeric::for_each_permutation(la, |pp| {
        crate::numeric::for_each_permutation(lb, |ph| {
            out.push(ContractionPair::from_perms(layout, [pp, ph]));
        });
    });
    out
}

/// Admissibility: an `S_+` vertex `j` must receive a line from an annihilating
/// leg of an earlier vertex (the number operator counts as vertex 0), and an
/// `S_-` vertex `j` must send a line to a creating leg of an earlier vertex.
pub fn admissible(layout: &Layout, pair: &ContractionPair) -> bool {
    admissible_map(layout, &pair.map, &mut vec![NONE; layout.n + 1])
}

fn admissible_map(layout: &Layout, map: &[usize], best: &mut [usize]) -> bool {
    // best[v]: for S_+ vertices the smallest source vertex, for S_- the smallest target
    best.fill(NONE);
    for (a, &c) in map.iter().enumerate() {
        if c == NONE {
            continue;
        }
        let (va, vc) = (vertex_of(a), vertex_of(c));
        if vc > 0 && best[vc] > va {
            best[vc] = va;
        }
        if va > 0 && best[va] > vc {
            best[va] = vc;
        }
    }
    // a vertex of the other kind never appears in its own entry above, except
    // through its own slots; both conditions read "reached from below"
    for j in 1..=layout.n {
        if best[j] == NONE || best[j] >= j {
            return false;
        }
    }
    // each entry mixes sources (for creators) and targets (for annihilators)
    // of the same vertex; since a vertex is all-creating or all-annihilating
    // only one kind ever lands in it
    true
}

fn inversion_sign(legs: &[usize], image: impl Fn(usize) -> usize) -> i32 {
    let mut inv = 0usize;
    for (i, &a) in legs.iter().enumerate() {
        for &b in &legs[i + 1..] {
            if image(b) < image(a) {
                inv += 1;
            }
        }
    }
    if inv.is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Sign from the inversion count of the contraction map: pairs of
/// annihilating legs `a < a'` (slot order, both species together) whose
/// images are in the opposite order. The number-operator vertex is spliced
/// out first: the line into `a*_q` is joined to the line out of `a_q`.
pub fn contraction_sign(layout: &Layout, pair: &ContractionPair) -> i32 {
    let x = layout.side.species();
    let q_creator = slot(0, x.rank(false));
    let q_target = pair.map[slot(0, x.rank(true))];
    let legs: Vec<usize> = (4..pair.map.len()).filter(|&a| pair.map[a] != NONE).collect();
    inversion_sign(&legs, |a| if pair.map[a] == q_creator { q_target } else { pair.map[a] })
}

/// The same inversion count with the number-operator legs kept in place.
pub fn contraction_sign_unspliced(pair: &ContractionPair) -> i32 {
    let legs: Vec<usize> = (0..pair.map.len()).filter(|&a| pair.map[a] != NONE).collect();
    inversion_sign(&legs, |a| pair.map[a])
}

/// Sign of the full contraction of the operator string
/// `S_-` vertices (descending), `a*_q a_q`, `S_+` vertices (ascending),
/// each generator vertex written in its natural leg order. Zero when a line
/// runs from a creating leg to a later annihilating leg.
pub fn wick_sign(layout: &Layout, pair: &ContractionPair) -> i32 {
    let mut pos = vec![NONE; layout.slot_count()];
    let mut at = 0;
    for j in (1..=layout.n).rev() {
        if layout.xi[j - 1] < 0 {
            for rank in [3, 2, 1, 0] {
                pos[slot(j, rank)] = at;
                at += 1;
            }
        }
    }
    let x = layout.side.species();
    pos[slot(0, x.rank(false))] = at;
    pos[slot(0, x.rank(true))] = at + 1;
    at += 2;
    for j in 1..=layout.n {
        if layout.xi[j - 1] > 0 {
            for rank in 0..4 {
                pos[slot(j, rank)] = at;
                at += 1;
            }
        }
    }
    let mut intervals = Vec::new();
    for (a, &c) in pair.map.iter().enumerate() {
        if c == NONE {
            continue;
        }
        if pos[a] > pos[c] {
            return 0;
        }
        intervals.push((pos[a], pos[c]));
    }
    let mut crossings = 0usize;
    for (i, &(a, b)) in intervals.iter().enumerate() {
        for &(c, d) in &intervals[i + 1..] {
            if (a < c && c < b && b < d) || (c < a && a < d && d < b) {
                crossings += 1;
            }
        }
    }
    if crossings.is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// One c-vertex visited by a loop, entered through the leg of species `enter`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LoopNode {
    pub vertex: usize,
    pub primed: bool,
    pub enter: Species,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DiagramLoop {
    /// The loop through the number-operator vertex.
    pub through_q: bool,
    pub nodes: Vec<LoopNode>,
}

/// Decomposes the contraction lines into loops. The loop through `q` comes
/// first; the others are ordered by their smallest c-vertex.
pub fn loop_decomposition(layout: &Layout, pair: &ContractionPair) -> Vec<DiagramLoop> {
    let partner = pair.partners();
    let mut seen = vec![false; 2 * layout.n];
    let mut loops = Vec::new();
    let x = layout.side.species();

    let mut nodes = Vec::new();
    let mut t = partner[slot(0, x.rank(false))];
    while t != NONE && vertex_of(t) != 0 {
        let node = LoopNode { vertex: vertex_of(t), primed: t % 4 >= 2, enter: Species::of_rank(t % 4) };
        seen[cv_of(t)] = true;
        nodes.push(node);
        t = partner[slot(node.vertex, node.enter.other().rank(node.primed))];
    }
    loops.push(DiagramLoop { through_q: true, nodes });

    for start in 0..2 * layout.n {
        if seen[start] {
            continue;
        }
        let mut nodes = Vec::new();
        let mut node = LoopNode { vertex: start / 2 + 1, primed: start % 2 == 1, enter: Species::Particle };
        loop {
            seen[2 * (node.vertex - 1) + node.primed as usize] = true;
            nodes.push(node);
            let t = partner[slot(node.vertex, node.enter.other().rank(node.primed))];
            node = LoopNode { vertex: vertex_of(t), primed: t % 4 >= 2, enter: Species::of_rank(t % 4) };
            if 2 * (node.vertex - 1) + node.primed as usize == start {
                break;
            }
        }
        loops.push(DiagramLoop { through_q: false, nodes });
    }
    loops
}

/// Histogram of loop lengths (c-vertices per loop).
pub fn loop_histogram(loops: &[DiagramLoop]) -> BTreeMap<usize, u64> {
    let mut h = BTreeMap::new();
    for l in loops {
        *h.entry(l.nodes.len()).or_insert(0) += 1;
    }
    h
}

/// The bosonization restriction on an admissible map. Writing `X` for the
/// species of the `q` legs and `Y` for the other one: whenever the `X` leg
/// of c-vertex `a` is contracted with the `X` leg of c-vertex `b`, the `Y`
/// legs of `a` and `b` are contracted too, and the same holds for the two
/// c-vertices joined through `q`.
pub fn bosonized_filter(layout: &Layout, pair: &ContractionPair) -> bool {
    if !admissible(layout, pair) {
        return false;
    }
    let x = layout.side.species();
    let q_creator = slot(0, x.rank(false));
    let q_target = pair.map[slot(0, x.rank(true))];
    let twin = |s: usize| s ^ 1;
    for &a in &layout.annihilators[sp(x)] {
        if vertex_of(a) == 0 {
            continue;
        }
        let mut t = pair.map[a];
        if t == q_creator {
            t = q_target;
        }
        if vertex_of(t) == 0 || pair.map[twin(a)] != twin(t) {
            return false;
        }
    }
    true
}

/// `true` iff every loop, the one through `q` included, visits exactly two
/// c-vertices.
pub fn all_loops_have_length_two(loops: &[DiagramLoop]) -> bool {
    loops.iter().all(|l| l.nodes.len() == 2)
}

/// Completes a contraction map of the `q` species to the unique map of the
/// other species for which every loop has length two. `None` when the `q`
/// line closes on itself.
fn bosonized_completion(layout: &Layout, x_perm: &[usize], y_perm: &mut [usize], y_index: &[usize]) -> bool {
    let x = sp(layout.side.species());
    let anni = &layout.annihilators[x];
    let crea = &layout.creators[x];
    let q_creator = crea[0];
    let q_annihilator = anni[0];
    let q_target = crea[x_perm[0]];
    if vertex_of(q_target) == 0 {
        return false;
    }
    for (i, &a) in anni.iter().enumerate() {
        if a == q_annihilator {
            continue;
        }
        let mut t = crea[x_perm[i]];
        if t == q_creator {
            t = q_target;
        }
        y_perm[y_index[a ^ 1]] = y_index[t ^ 1];
    }
    true
}

/// Summary counts for one order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagramCounts {
    pub candidates: u64,
    pub admissible: u64,
    pub bosonized: u64,
    pub nonzero: u64,
    pub sign_disagreements: u64,
    pub positive_signs: u64,
    pub negative_signs: u64,
}

impl DiagramCounts {
    fn merge(&mut self, o: &DiagramCounts) {
        self.candidates += o.candidates;
        self.admissible += o.admissible;
        self.bosonized += o.bosonized;
        self.nonzero += o.nonzero;
        self.sign_disagreements += o.sign_disagreements;
        self.positive_signs += o.positive_signs;
        self.negative_signs += o.negative_signs;
    }
}

/// One term of the series together with its diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderReport {
    pub order: usize,
    pub value: f64,
    pub counts: DiagramCounts,
    pub loop_histogram: BTreeMap<usize, u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Restriction {
    All,
    Bosonized,
}

/// Per-transfer data used by the evaluator.
#[derive(Clone, Debug)]
struct TransferTable {
    mask: u128,
    /// `K_ab / (n_a n_b)` indexed by patch ids, `M x M`.
    weight: Vec<f64>,
}

/// Everything needed to evaluate diagrams on a fixed system.
#[derive(Clone, Debug)]
pub struct SeriesContext {
    pub sys: FermiSystem,
    pub scheme: PatchScheme,
    pub bundles: Vec<KMatrixBundle>,
    tables: Vec<TransferTable>,
    pairs: HashMap<(usize, usize), Vec<(Momentum, Momentum)>>,
}

/// Output of [`SeriesContext::nq`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NqResult {
    pub q: Momentum,
    pub side: QSide,
    pub method: Method,
    pub n_max: Option<usize>,
    pub value: f64,
    pub per_order: Vec<OrderValue>,
    pub diagram_counts: BTreeMap<usize, DiagramCounts>,
    pub loop_histogram: BTreeMap<usize, BTreeMap<usize, u64>>,
    pub tail_bound: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderValue {
    pub order: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SeriesOptions {
    pub allow_large_orders: bool,
}

impl SeriesContext {
    pub fn new(sys: FermiSystem, scheme: PatchScheme, potential: &Potential) -> Result<Self> {
        let bundles = build_all(&sys, &scheme, potential)?;
        Self::from_bundles(sys, scheme, bundles)
    }

    pub fn from_bundles(sys: FermiSystem, scheme: PatchScheme, bundles: Vec<KMatrixBundle>) -> Result<Self> {
        let m = scheme.m;
        if m > MAX_PATCHES {
            return Err(Error::InvalidParameter {
                field: "m",
                reason: format!("diagram evaluation supports at most {MAX_PATCHES} patches, got {m}"),
            });
        }
        let mut tables = Vec::new();
        let mut pairs = HashMap::new();
        for (t, b) in bundles.iter().enumerate() {
            let mut mask = 0u128;
            let mut weight = vec![0.0; m * m];
            for (i, &a) in b.labels.iter().enumerate() {
                mask |= 1 << a.0;
                pairs.insert((t, a.0), scheme.pair_list(&sys, a, b.k)?);
                for (j, &c) in b.labels.iter().enumerate() {
                    let n2 = (b.pair_counts[i] as f64 * b.pair_counts[j] as f64).sqrt();
                    weight[a.0 * m + c.0] = b.k_matrix[(i, j)] / n2;
                }
            }
            tables.push(TransferTable { mask, weight });
        }
        Ok(SeriesContext { sys, scheme, bundles, tables, pairs })
    }

    /// `true` when every `K(k)` is zero; all diagrams then vanish.
    pub fn kernel_vanishes(&self) -> bool {
        self.tables.iter().all(|t| t.weight.iter().all(|&w| w == 0.0))
    }

    /// The generator `S` as a symbolic operator.
    pub fn generator(&self) -> Result<crate::fock::FermionOperator> {
        build_s(&self.scheme, &self.sys, &self.bundles)
    }

    pub fn oracle(&self, q: Momentum) -> Result<FockOracle> {
        FockOracle::new(&self.generator()?, q)
    }

    /// `2 sum_k sum_{a,b} |K_ab| n_a n_b`, an upper bound on `2 ||S||`.
    pub fn s_norm_bound(&self) -> f64 {
        let mut parts = Vec::new();
        for b in &self.bundles {
            for i in 0..b.dim() {
                for j in 0..b.dim() {
                    let n2 = (b.pair_counts[i] as f64 * b.pair_counts[j] as f64).sqrt();
                    parts.push(2.0 * b.k_matrix[(i, j)].abs() * n2);
                }
            }
        }
        pairwise_sum(&parts)
    }

    fn q_patch(&self, q: Momentum, side: QSide) -> Option<PatchId> {
        let alpha = self.scheme.patch_of(q)?;
        let ok = match side {
            QSide::Outside => self.scheme.is_particle_in(q, alpha),
            QSide::Inside => self.scheme.is_hole_in(q, alpha),
        };
        ok.then_some(alpha)
    }

    /// Order-`n` term of the full expansion.
    pub fn exact_term(&self, n: usize, q: Momentum) -> Result<f64> {
        Ok(self.order_report(n, q, Restriction::All)?.value)
    }

    /// Order-`n` term restricted to bosonized diagrams.
    pub fn bosonized_term(&self, n: usize, q: Momentum) -> Result<f64> {
        Ok(self.order_report(n, q, Restriction::Bosonized)?.value)
    }

    pub fn exact_report(&self, n: usize, q: Momentum) -> Result<OrderReport> {
        self.order_report(n, q, Restriction::All)
    }

    pub fn bosonized_report(&self, n: usize, q: Momentum) -> Result<OrderReport> {
        self.order_report(n, q, Restriction::Bosonized)
    }

    /// Transfers `k` for which `q` sits on a pair of its own patch, with the
    /// matching bundle.
    pub fn c_tilde(&self, q: Momentum) -> Vec<&KMatrixBundle> {
        let side = QSide::of(&self.sys, q);
        let Some(alpha) = self.q_patch(q, side) else { return Vec::new() };
        self.bundles
            .iter()
            .filter(|b| {
                let Some(s) = b.sets.sign(alpha) else { return false };
                match side {
                    QSide::Outside => self.scheme.is_hole_in(q - s * b.k, alpha),
                    QSide::Inside => self.scheme.is_particle_in(q + s * b.k, alpha),
                }
            })
            .collect()
    }

    /// `2^(n-1)/n! sum_{k} (K(k)^n)_{aa} / n_{a,k}^2` over `k` in the set above.
    pub fn bosonized_formula_term(&self, n: usize, q: Momentum) -> f64 {
        if n == 0 || !n.is_multiple_of(2) {
            return 0.0;
        }
        let side = QSide::of(&self.sys, q);
        let Some(alpha) = self.q_patch(q, side) else { return 0.0 };
        let parts: Vec<f64> = self
            .c_tilde(q)
            .into_iter()
            .map(|b| {
                let i = b.index_of(alpha).unwrap();
                let kn = b.k_matrix.pow(n as u32);
                kn[(i, i)] / b.pair_counts[i] as f64
            })
            .collect();
        2f64.powi(n as i32 - 1) / factorial(n as u64) * pairwise_sum(&parts)
    }

    /// `1/2 sum_k (cosh 2K(k) - 1)_{aa} / n_{a,k}^2`.
    pub fn nq_bosonized_closed(&self, q: Momentum) -> f64 {
        let side = QSide::of(&self.sys, q);
        let Some(alpha) = self.q_patch(q, side) else { return 0.0 };
        let parts: Vec<f64> = self
            .c_tilde(q)
            .into_iter()
            .map(|b| {
                let i = b.index_of(alpha).unwrap();
                0.5 * b.cosh_2k_minus_identity()[(i, i)] / b.pair_counts[i] as f64
            })
            .collect();
        pairwise_sum(&parts)
    }

    /// Tail bound of the bosonized series past order `n_max`.
    pub fn bosonized_tail(&self, q: Momentum, n_max: usize) -> f64 {
        let parts: Vec<f64> = self
            .c_tilde(q)
            .into_iter()
            .map(|b| {
                let norm = b.k_matrix.symmetric_eigenvalues().amax();
                let i = b.index_of(self.scheme.patch_of(q).unwrap()).unwrap();
                0.5 * exp_tail(2.0 * norm, n_max) / b.pair_counts[i] as f64
            })
            .collect();
        pairwise_sum(&parts)
    }

    fn check_order(&self, n: usize, restriction: Restriction, opts: SeriesOptions) -> Result<()> {
        if !n.is_multiple_of(2) {
            return Err(Error::OddOrder(n));
        }
        if opts.allow_large_orders {
            return Ok(());
        }
        match restriction {
            Restriction::All if n > EXACT_ORDER_LIMIT => Err(Error::EnumerationTooLarge {
                order: n,
                count: binomial(n as u64, n as u64 / 2) * factorial_u128(n as u64 + 1) * factorial_u128(n as u64),
            }),
            Restriction::Bosonized => {
                let count = binomial(n as u64, n as u64 / 2) * factorial_u128(n as u64 + 1);
                if count > BOSONIZED_CANDIDATE_LIMIT {
                    Err(Error::EnumerationTooLarge { order: n, count })
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn order_report(&self, n: usize, q: Momentum, restriction: Restriction) -> Result<OrderReport> {
        let empty =
            OrderReport { order: n, value: 0.0, counts: DiagramCounts::default(), loop_histogram: BTreeMap::new() };
        if !n.is_multiple_of(2) {
            return Ok(empty);
        }
        if n == 0 || self.kernel_vanishes() {
            return Ok(empty);
        }
        let side = QSide::of(&self.sys, q);
        let alpha_q = self.q_patch(q, side);

        // fixed task partition: (sign pattern, first element of the q-species permutation)
        let patterns = sign_patterns(n);
        let x = sp(side.species());
        let lx = n + 1;
        let tasks: Vec<(usize, usize)> = (0..patterns.len()).flat_map(|p| (0..lx).map(move |f| (p, f))).collect();
        let results: Vec<(f64, DiagramCounts, BTreeMap<usize, u64>)> = tasks
            .par_iter()
            .map(|&(p, first)| {
                let layout = Layout::new(side, &patterns[p]);
                self.run_task(&layout, x, first, q, alpha_q, restriction)
            })
            .collect();

        let mut counts = DiagramCounts::default();
        let mut hist = BTreeMap::new();
        let mut sums = Vec::with_capacity(results.len());
        for (s, c, h) in &results {
            sums.push(*s);
            counts.merge(c);
            for (k, v) in h {
                *hist.entry(*k).or_insert(0) += v;
            }
        }
        let value = pairwise_sum(&sums) / (2f64.powi(n as i32) * factorial(n as u64));
        Ok(OrderReport { order: n, value, counts, loop_histogram: hist })
    }

    fn run_task(
        &self,
        layout: &Layout,
        x: usize,
        first: usize,
        q: Momentum,
        alpha_q: Option<PatchId>,
        restriction: Restriction,
    ) -> (f64, DiagramCounts, BTreeMap<usize, u64>) {
        let lx = layout.annihilators[x].len();
        let ly = layout.annihilators[1 - x].len();
        let block = factorial_u128(lx as u64 - 1);
        let mut x_perm = nth_permutation(lx, first as u128 * block);
        let mut y_perm: Vec<usize> = (0..ly).collect();
        let mut y_index = vec![NONE; layout.slot_count()];
        for list in [&layout.annihilators[1 - x], &layout.creators[1 - x]] {
            for (i, &s) in list.iter().enumerate() {
                y_index[s] = i;
            }
        }
        let mut best = vec![NONE; layout.n + 1];
        let mut contributions = Vec::new();
        let mut counts = DiagramCounts::default();
        let mut hist = BTreeMap::new();
        let mut evaluator = Evaluator::new(self, q, alpha_q, layout.n);

        let mut map = vec![NONE; layout.slot_count()];
        let mut visit = |x_perm: &[usize], y_perm: &[usize], counts: &mut DiagramCounts| {
            counts.candidates += 1;
            let perms = if x == 0 { [x_perm, y_perm] } else { [y_perm, x_perm] };
            fill_map(layout, perms, &mut map);
            if !admissible_map(layout, &map, &mut best) {
                return;
            }
            counts.admissible += 1;
            let pair = ContractionPair { map: map.clone() };
            let loops = loop_decomposition(layout, &pair);
            let bosonized = all_loops_have_length_two(&loops);
            if bosonized {
                counts.bosonized += 1;
            }
            if restriction == Restriction::Bosonized && !bosonized {
                return;
            }
            let sign = contraction_sign(layout, &pair);
            let wick = wick_sign(layout, &pair);
            if sign != wick {
                counts.sign_disagreements += 1;
            }
            if sign > 0 {
                counts.positive_signs += 1;
            } else {
                counts.negative_signs += 1;
            }
            for (k, v) in loop_histogram(&loops) {
                *hist.entry(k).or_insert(0) += v;
            }
            let value = evaluator.value(&loops);
            if value != 0.0 {
                counts.nonzero += 1;
                contributions.push(sign as f64 * value);
            }
        };

        let mut done = 0u128;
        while done < block {
            match restriction {
                Restriction::All => {
                    crate::numeric::for_each_permutation(ly, |yp| visit(&x_perm, yp, &mut counts));
                }
                Restriction::Bosonized => {
                    if bosonized_completion(layout, &x_perm, &mut y_perm, &y_index) {
                        visit(&x_perm, &y_perm, &mut counts);
                    } else {
                        counts.candidates += 1;
                    }
                }
            }
            done += 1;
            if !next_permutation(&mut x_perm) {
                break;
            }
        }
        (neumaier_sum(&contributions), counts, hist)
    }

    /// `n_q` by the requested method.
    pub fn nq(&self, q: Momentum, method: Method, n_max: Option<usize>, opts: SeriesOptions) -> Result<NqResult> {
        let side = QSide::of(&self.sys, q);
        let mut out = NqResult {
            q,
            side,
            method,
            n_max,
            value: 0.0,
            per_order: Vec::new(),
            diagram_counts: BTreeMap::new(),
            loop_histogram: BTreeMap::new(),
            tail_bound: None,
            warnings: Vec::new(),
        };
        let series = matches!(method, Method::ExactTruncated | Method::BosonizedSeries);
        if series {
            let Some(n) = n_max else {
                return Err(Error::InvalidParameter {
                    field: "n_max",
                    reason: format!("{} needs a maximal order", method.name()),
                });
            };
            if n % 2 != 0 {
                return Err(Error::OddOrder(n));
            }
        }
        if method != Method::Oracle && self.q_patch(q, side).is_none() {
            out.warnings.push(format!("{q} is not claimed by any patch; the series vanishes identically"));
            if let (true, Some(n)) = (series, n_max) {
                out.per_order = (2..=n).step_by(2).map(|order| OrderValue { order, value: 0.0 }).collect();
                out.tail_bound = Some(0.0);
            }
            return Ok(out);
        }
        match method {
            Method::ExactTruncated | Method::BosonizedSeries => {
                let n = n_max.unwrap();
                let restriction =
                    if method == Method::ExactTruncated { Restriction::All } else { Restriction::Bosonized };
                for order in (2..=n).step_by(2) {
                    self.check_order(order, restriction, opts)?;
                }
                if self.kernel_vanishes() {
                    out.warnings.push("K vanishes for every transfer; no diagrams were enumerated".into());
                }
                let mut values = Vec::new();
                for order in (2..=n).step_by(2) {
                    let r = self.order_report(order, q, restriction)?;
                    values.push(r.value);
                    out.per_order.push(OrderValue { order, value: r.value });
                    out.diagram_counts.insert(order, r.counts);
                    out.loop_histogram.insert(order, r.loop_histogram);
                }
                out.value = pairwise_sum(&values);
                out.tail_bound = Some(if restriction == Restriction::All {
                    exp_tail(self.s_norm_bound(), n)
                } else {
                    self.bosonized_tail(q, n)
                });
            }
            Method::BosonizedClosed => {
                out.value = self.nq_bosonized_closed(q);
            }
            Method::Oracle => {
                let s = self.generator()?;
                out.value = if s.is_empty() { 0.0 } else { FockOracle::new(&s, q)?.exact_nq(q)? };
            }
        }
        Ok(out)
    }
}

/// Sums a diagram over transfers, patches and momenta.
struct Evaluator<'a> {
    ctx: &'a SeriesContext,
    q: Momentum,
    alpha_q: Option<PatchId>,
    n: usize,
    loop_of: Vec<usize>,
    transfer: Vec<usize>,
    masks: Vec<u128>,
    patch: Vec<usize>,
    all_mask: u128,
}

impl<'a> Evaluator<'a> {
    fn new(ctx: &'a SeriesContext, q: Momentum, alpha_q: Option<PatchId>, n: usize) -> Self {
        let all_mask = ctx.tables.iter().fold(0u128, |m, t| m | t.mask);
        Evaluator {
            ctx,
            q,
            alpha_q,
            n,
            loop_of: vec![0; 2 * n],
            transfer: vec![0; n],
            masks: Vec::new(),
            patch: Vec::new(),
            all_mask,
        }
    }

    fn value(&mut self, loops: &[DiagramLoop]) -> f64 {
        let Some(alpha_q) = self.alpha_q else { return 0.0 };
        for (l, lp) in loops.iter().enumerate() {
            for node in &lp.nodes {
                self.loop_of[2 * (node.vertex - 1) + node.primed as usize] = l;
            }
        }
        self.masks = loops.iter().map(|l| if l.through_q { 1u128 << alpha_q.0 } else { self.all_mask }).collect();
        self.patch = vec![0; loops.len()];
        let mut acc = Vec::new();
        self.assign_transfer(loops, 1, &mut acc);
        neumaier_sum(&acc)
    }

    fn assign_transfer(&mut self, loops: &[DiagramLoop], j: usize, acc: &mut Vec<f64>) {
        if j > self.n {
            self.assign_patch(loops, 0, 1.0, acc);
            return;
        }
        let (la, lb) = (self.loop_of[2 * (j - 1)], self.loop_of[2 * (j - 1) + 1]);
        let (ma, mb) = (self.masks[la], self.masks[lb]);
        for t in 0..self.ctx.tables.len() {
            let mask = self.ctx.tables[t].mask;
            let (na, nb) = (ma & mask, mb & mask);
            if na == 0 || nb == 0 {
                continue;
            }
            self.masks[la] = na;
            self.masks[lb] &= mask;
            self.transfer[j - 1] = t;
            self.assign_transfer(loops, j + 1, acc);
            self.masks[la] = ma;
            self.masks[lb] = mb;
        }
    }

    fn assign_patch(&mut self, loops: &[DiagramLoop], l: usize, count: f64, acc: &mut Vec<f64>) {
        if l == loops.len() {
            let m = self.ctx.scheme.m;
            let mut w = count;
            for j in 0..self.n {
                let a = self.patch[self.loop_of[2 * j]];
                let b = self.patch[self.loop_of[2 * j + 1]];
                w *= self.ctx.tables[self.transfer[j]].weight[a * m + b];
                if w == 0.0 {
                    return;
                }
            }
            acc.push(w);
            return;
        }
        let mut bits = self.masks[l];
        while bits != 0 {
            let alpha = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let c = self.loop_count(&loops[l], alpha);
            if c == 0 {
                continue;
            }
            self.patch[l] = alpha;
            self.assign_patch(loops, l + 1, count * c as f64, acc);
        }
    }

    fn step(&self, m: Momentum, node: &LoopNode, alpha: usize) -> Option<Momentum> {
        let t = self.transfer[node.vertex - 1];
        let bundle = &self.ctx.bundles[t];
        let a = PatchId(alpha);
        let s = bundle.sets.sign(a)?;
        let sch = &self.ctx.scheme;
        match node.enter {
            Species::Particle => {
                let h = m - s * bundle.k;
                (sch.is_particle_in(m, a) && sch.is_hole_in(h, a)).then_some(h)
            }
            Species::Hole => {
                let p = m + s * bundle.k;
                (sch.is_hole_in(m, a) && sch.is_particle_in(p, a)).then_some(p)
            }
        }
    }

    fn walk(&self, start: Momentum, lp: &DiagramLoop, alpha: usize) -> bool {
        let mut m = start;
        for node in &lp.nodes {
            match self.step(m, node, alpha) {
                Some(next) => m = next,
                None => return false,
            }
        }
        m == start
    }

    /// Number of momentum assignments closing the loop inside patch `alpha`.
    fn loop_count(&self, lp: &DiagramLoop, alpha: usize) -> u64 {
        if lp.through_q {
            return self.walk(self.q, lp, alpha) as u64;
        }
        let first = &lp.nodes[0];
        let t = self.transfer[first.vertex - 1];
        let Some(list) = self.ctx.pairs.get(&(t, alpha)) else { return 0 };
        list.iter()
            .filter(|&&(p, h)| {
                let start = if first.enter == Species::Particle { p } else { h };
                self.walk(start, lp, alpha)
            })
            .count() as u64
    }
}
