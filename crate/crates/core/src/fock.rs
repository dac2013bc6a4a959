//! Brute-force fermionic Fock space over a finite set of modes.
//!
//! Basis states are bitmasks over the positions of a [`ModeSet`]; ladder
//! operators carry Jordan-Wigner signs relative to that order. Operators are
//! kept symbolically as sums of ladder products ([`FermionOperator`]) and can
//! be applied to state vectors directly or materialized as CSR matrices
//! ([`SparseFockOperator`]).

use std::collections::{BTreeSet, HashMap};
use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::KMatrixBundle;
use crate::lattice::{FermiSystem, Momentum};
use crate::numeric::{binomial, dot, norm, pairwise_sum};
use crate::patches::{PatchId, PatchScheme};

/// Hard limit on the number of modes of an oracle space.
pub const MODE_CAP: usize = 24;
/// Above this many modes operators are applied term by term instead of as
/// explicit matrices.
pub const EXPLICIT_MATRIX_MODES: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeSet {
    modes: Vec<Momentum>,
    index: HashMap<Momentum, usize>,
}

impl ModeSet {
    /// Sorted, deduplicated mode set; fails beyond [`MODE_CAP`].
    pub fn new(modes: impl IntoIterator<Item = Momentum>) -> Result<Self> {
        let set: BTreeSet<Momentum> = modes.into_iter().collect();
        if set.len() > MODE_CAP {
            return Err(Error::ModeCapExceeded { size: set.len(), cap: MODE_CAP });
        }
        let modes: Vec<Momentum> = set.into_iter().collect();
        let index = modes.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        Ok(ModeSet { modes, index })
    }

    /// Every mode touched by `op`.
    pub fn of_operator(op: &FermionOperator) -> Result<Self> {
        Self::new(op.modes())
    }

    /// The modes connected to `q` through the terms of `op`.
    ///
    /// Terms acting on disjoint mode sets commute (they are all even), so the
    /// dynamics of `a_q^* a_q` under `op` only ever sees this component.
    pub fn component_of(op: &FermionOperator, q: Momentum) -> Result<Self> {
        let mut uf = UnionFind::default();
        uf.id(q);
        for t in &op.terms {
            let first = uf.id(t.ops[0].mode);
            for l in &t.ops[1..] {
                let other = uf.id(l.mode);
                uf.union(first, other);
            }
        }
        let root = uf.find(uf.ids[&q]);
        let members: Vec<Momentum> =
            uf.ids.clone().into_iter().filter(|&(_, i)| uf.find(i) == root).map(|(k, _)| k).collect();
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Momentum] {
        &self.modes
    }

    pub fn contains(&self, k: Momentum) -> bool {
        self.index.contains_key(&k)
    }

    pub fn position(&self, k: Momentum) -> Result<usize> {
        self.index.get(&k).copied().ok_or(Error::UnknownMode(k))
    }

    /// Dimension `2^len` of the Fock space.
    pub fn dim(&self) -> usize {
        1usize << self.modes.len()
    }
}

#[derive(Default)]
struct UnionFind {
    ids: HashMap<Momentum, usize>,
    parent: Vec<usize>,
}

impl UnionFind {
    fn id(&mut self, k: Momentum) -> usize {
        if let Some(&i) = self.ids.get(&k) {
            return i;
        }
        let i = self.parent.len();
        self.parent.push(i);
        self.ids.insert(k, i);
        i
    }

    fn find(&self, mut i: usize) -> usize {
        while self.parent[i] != i {
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// A real state vector over the occupation basis of a mode set.
#[derive(Clone, Debug, PartialEq)]
pub struct FockState {
    pub amplitudes: Vec<f64>,
}

impl FockState {
    pub fn vacuum(modes: &ModeSet) -> Self {
        let mut amplitudes = vec![0.0; modes.dim()];
        amplitudes[0] = 1.0;
        FockState { amplitudes }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.amplitudes)
    }

    /// `<self, a_q^* a_q self>`.
    pub fn occupation(&self, modes: &ModeSet, q: Momentum) -> Result<f64> {
        let bit = 1usize << modes.position(q)?;
        let terms: Vec<f64> =
            self.amplitudes.iter().enumerate().filter(|(b, _)| b & bit != 0).map(|(_, v)| v * v).collect();
        Ok(pairwise_sum(&terms))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ladder {
    pub mode: Momentum,
    pub dagger: bool,
}

impl Ladder {
    pub fn create(mode: Momentum) -> Self {
        Ladder { mode, dagger: true }
    }

    pub fn annihilate(mode: Momentum) -> Self {
        Ladder { mode, dagger: false }
    }
}

/// `coeff * ops[0] ops[1] ... ops[r-1]` (written order).
#[derive(Clone, Debug, PartialEq)]
pub struct FermionTerm {
    pub coeff: f64,
    pub ops: Vec<Ladder>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FermionOperator {
    pub terms: Vec<FermionTerm>,
}

/// Applies a ladder product (given by mode positions) to a basis state.
/// Returns the image state and whether the Jordan-Wigner sign is negative.
#[inline]
fn apply_ladders(ops: &[(usize, bool)], mut state: usize) -> Option<(usize, bool)> {
    let mut negative = false;
    for &(i, dagger) in ops.iter().rev() {
        let bit = 1usize << i;
        let occupied = state & bit != 0;
        if occupied == dagger {
            return None;
        }
        if (state & (bit - 1)).count_ones() % 2 == 1 {
            negative = !negative;
        }
        state ^= bit;
    }
    Some((state, negative))
}

impl FermionOperator {
    pub fn zero() -> Self {
        FermionOperator::default()
    }

    /// The identity (a single term with no ladder operators).
    pub fn identity() -> Self {
        FermionOperator { terms: vec![FermionTerm { coeff: 1.0, ops: Vec::new() }] }
    }

    pub fn number(q: Momentum) -> Self {
        FermionOperator { terms: vec![FermionTerm { coeff: 1.0, ops: vec![Ladder::create(q), Ladder::annihilate(q)] }] }
    }

    pub fn push(&mut self, coeff: f64, ops: Vec<Ladder>) {
        if coeff != 0.0 {
            self.terms.push(FermionTerm { coeff, ops });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn modes(&self) -> BTreeSet<Momentum> {
        self.terms.iter().flat_map(|t| t.ops.iter().map(|l| l.mode)).collect()
    }

    pub fn adjoint(&self) -> Self {
        FermionOperator {
            terms: self
                .terms
                .iter()
                .map(|t| FermionTerm {
                    coeff: t.coeff,
                    ops: t.ops.iter().rev().map(|l| Ladder { mode: l.mode, dagger: !l.dagger }).collect(),
                })
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        FermionOperator {
            terms: self
                .terms
                .iter()
                .filter(|_| s != 0.0)
                .map(|t| FermionTerm { coeff: s * t.coeff, ops: t.ops.clone() })
                .collect(),
        }
    }

    pub fn plus(&self, other: &FermionOperator) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        FermionOperator { terms }
    }

    /// Symbolic product (concatenation of ladder strings).
    pub fn times(&self, other: &FermionOperator) -> Self {
        let mut out = FermionOperator::zero();
        for a in &self.terms {
            for b in &other.terms {
                let mut ops = a.ops.clone();
                ops.extend(b.ops.iter().copied());
                out.push(a.coeff * b.coeff, ops);
            }
        }
        out
    }

    /// Terms whose modes all lie in `modes`.
    pub fn restrict(&self, modes: &ModeSet) -> Self {
        FermionOperator {
            terms: self.terms.iter().filter(|t| t.ops.iter().all(|l| modes.contains(l.mode))).cloned().collect(),
        }
    }

    /// Sum of `|coeff|`; an upper bound on the operator norm.
    pub fn coefficient_norm(&self) -> f64 {
        pairwise_sum(&self.terms.iter().map(|t| t.coeff.abs()).collect::<Vec<_>>())
    }

    fn positions(&self, modes: &ModeSet) -> Result<Vec<(f64, Vec<(usize, bool)>)>> {
        self.terms
            .iter()
            .map(|t| {
                let ops = t.ops.iter().map(|l| Ok((modes.position(l.mode)?, l.dagger))).collect::<Result<_>>()?;
                Ok((t.coeff, ops))
            })
            .collect()
    }

    /// `y = op x`, term by term without building a matrix.
    pub fn apply(&self, modes: &ModeSet, x: &[f64]) -> Result<Vec<f64>> {
        let terms = self.positions(modes)?;
        let mut y = vec![0.0; x.len()];
        for (coeff, ops) in &terms {
            for (b, &xb) in x.iter().enumerate() {
                if xb == 0.0 {
                    continue;
                }
                if let Some((b2, neg)) = apply_ladders(ops, b) {
                    let v = coeff * xb;
                    y[b2] += if neg { -v } else { v };
                }
            }
        }
        Ok(y)
    }

    pub fn materialize(&self, modes: &ModeSet) -> Result<SparseFockOperator<f64>> {
        let terms = self.positions(modes)?;
        let dim = modes.dim();
        let mut trip = Vec::new();
        for b in 0..dim {
            for (coeff, ops) in &terms {
                if let Some((b2, neg)) = apply_ladders(ops, b) {
                    trip.push((b2, b, if neg { -coeff } else { *coeff }));
                }
            }
        }
        Ok(SparseFockOperator::from_triplets(dim, trip))
    }
}

/// Scalars usable in [`SparseFockOperator`]: exact integers or reals.
pub trait Scalar:
    Copy
    + PartialEq
    + Default
    + std::fmt::Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn magnitude(self) -> f64;
}

impl Scalar for i64 {
    const ZERO: Self = 0;
    const ONE: Self = 1;
    fn magnitude(self) -> f64 {
        self.unsigned_abs() as f64
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn magnitude(self) -> f64 {
        self.abs()
    }
}

/// Square CSR matrix over the occupation basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFockOperator<T: Scalar> {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> SparseFockOperator<T> {
    /// Sums duplicate entries and drops exact zeros.
    pub fn from_triplets(dim: usize, mut trip: Vec<(usize, usize, T)>) -> Self {
        trip.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<T> = Vec::with_capacity(trip.len());
        let mut rows = Vec::with_capacity(trip.len());
        for (r, c, v) in trip {
            if let (Some(&lr), Some(&lc)) = (rows.last(), cols.last()) {
                if lr == r && lc == c {
                    let last = vals.len() - 1;
                    vals[last] = vals[last] + v;
                    continue;
                }
            }
            rows.push(r);
            cols.push(c);
            vals.push(v);
        }
        let mut fc = Vec::with_capacity(cols.len());
        let mut fv = Vec::with_capacity(vals.len());
        for ((r, c), v) in rows.into_iter().zip(cols).zip(vals) {
            if v != T::ZERO {
                row_ptr[r + 1] += 1;
                fc.push(c);
                fv.push(v);
            }
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseFockOperator { dim, row_ptr, cols: fc, vals: fv }
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_triplets(dim, Vec::new())
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_triplets(dim, (0..dim).map(|i| (i, i, T::ONE)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_zero(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |i| (self.cols[i], self.vals[i]))
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.row(r).find(|&(cc, _)| cc == c).map(|(_, v)| v).unwrap_or(T::ZERO)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, T)> {
        (0..self.dim).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.dim, self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect())
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_triplets(self.dim, self.triplets().into_iter().map(|(r, c, v)| (r, c, s * v)).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut trip = self.triplets();
        trip.extend(other.triplets());
        Self::from_triplets(self.dim, trip)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-T::ONE))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut acc = vec![T::ZERO; self.dim];
        let mut touched = vec![false; self.dim];
        let mut list = Vec::new();
        let mut trip = Vec::new();
        for r in 0..self.dim {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        list.push(c);
                    }
                    acc[c] = acc[c] + a * b;
                }
            }
            list.sort_unstable();
            for &c in &list {
                trip.push((r, c, acc[c]));
                acc[c] = T::ZERO;
                touched[c] = false;
            }
            list.clear();
        }
        Self::from_triplets(self.dim, trip)
    }

    /// `self * other - other * self`.
    pub fn commutator(&self, other: &Self) -> Self {
        self.matmul(other).sub(&other.matmul(self))
    }

    /// `self * other + other * self`.
    pub fn anticommutator(&self, other: &Self) -> Self {
        self.matmul(other).add(&other.matmul(self))
    }

    /// Largest entry magnitude (0 for the zero matrix).
    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.magnitude()).fold(0.0, f64::max)
    }
}

impl SparseFockOperator<i64> {
    pub fn to_f64(&self) -> SparseFockOperator<f64> {
        SparseFockOperator {
            dim: self.dim,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self.vals.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl SparseFockOperator<f64> {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                let terms: Vec<f64> = self.row(r).map(|(c, v)| v * x[c]).collect();
                pairwise_sum(&terms)
            })
            .collect()
    }

    /// Operator 2-norm by power iteration on `A^T A`.
    pub fn op_norm(&self, seed: u64) -> f64 {
        let t = self.transpose();
        power_norm(self.dim, seed, |x| self.apply(x), |x| t.apply(x))
    }
}

/// Largest singular value of a linear map by power iteration on `A^T A`.
pub fn power_norm(
    dim: usize,
    seed: u64,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nx = norm(&x);
    if nx == 0.0 {
        return 0.0;
    }
    x.iter_mut().for_each(|v| *v /= nx);
    let mut lambda = 0.0f64;
    for _ in 0..100_000 {
        let y = apply_t(&apply(&x));
        let ny = norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let converged = (ny - lambda).abs() <= 1e-15 * ny;
        lambda = ny;
        x = y.into_iter().map(|v| v / ny).collect();
        if converged {
            break;
        }
    }
    lambda.sqrt()
}

/// `a_q^*` as an exact integer matrix.
pub fn creation(modes: &ModeSet, q: Momentum) -> Result<SparseFockOperator<i64>> {
    ladder_matrix(modes, q, true)
}

/// `a_q` as an exact integer matrix.
pub fn annihilation(modes: &ModeSet, q: Momentum) -> Result<SparseFockOperator<i64>> {
    ladder_matrix(modes, q, false)
}

fn ladder_matrix(modes: &ModeSet, q: Momentum, dagger: bool) -> Result<SparseFockOperator<i64>> {
    let i = modes.position(q)?;
    let trip = (0..modes.dim())
        .filter_map(|b| apply_ladders(&[(i, dagger)], b).map(|(b2, neg)| (b2, b, if neg { -1 } else { 1 })))
        .collect();
    Ok(SparseFockOperator::from_triplets(modes.dim(), trip))
}

fn pairs_with_n(
    scheme: &PatchScheme,
    sys: &FermiSystem,
    alpha: PatchId,
    k: Momentum,
) -> Result<(Vec<(Momentum, Momentum)>, f64)> {
    let pairs = scheme.pair_list(sys, alpha, k)?;
    if pairs.is_empty() {
        return Err(Error::InvalidParameter {
            field: "alpha",
            reason: format!("patch {alpha} has no particle-hole pairs for transfer {k}"),
        });
    }
    let n = (pairs.len() as f64).sqrt();
    Ok((pairs, n))
}

/// The pair creator `c*_alpha(k) = n^-1 sum a_p^* a_h^*`.
pub fn c_star_operator(
    scheme: &PatchScheme,
    sys: &FermiSystem,
    alpha: PatchId,
    k: Momentum,
) -> Result<FermionOperator> {
    let (pairs, n) = pairs_with_n(scheme, sys, alpha, k)?;
    let mut op = FermionOperator::zero();
    for (p, h) in pairs {
        op.push(1.0 / n, vec![Ladder::create(p), Ladder::create(h)]);
    }
    Ok(op)
}

/// Materialized `c*_alpha(k)` on `modes`.
pub fn build_c_star(
    scheme: &PatchScheme,
    sys: &FermiSystem,
    modes: &ModeSet,
    alpha: PatchId,
    k: Momentum,
) -> Result<SparseFockOperator<f64>> {
    c_star_operator(scheme, sys, alpha, k)?.materialize(modes)
}

/// The commutation error `E_alpha(k, l)`.
pub fn ccr_error_operator(
    scheme: &PatchScheme,
    sys: &FermiSystem,
    alpha: PatchId,
    k: Momentum,
    l: Momentum,
) -> Result<FermionOperator> {
    let (pk, nk) = pairs_with_n(scheme, sys, alpha, k)?;
    let (pl, nl) = pairs_with_n(scheme, sys, alpha, l)?;
    let w = -1.0 / (nk * nl);
    let mut op = FermionOperator::zero();
    for &(p1, h1) in &pk {
        for &(p2, h2) in &pl {
            if p1 == p2 {
                op.push(w, vec![Ladder::create(h2), Ladder::annihilate(h1)]);
            }
        }
    }
    for &(p1, h1) in &pk {
        for &(p2, h2) in &pl {
            if h1 == h2 {
                op.push(w, vec![Ladder::create(p2), Ladder::annihilate(p1)]);
            }
        }
    }
    Ok(op)
}

/// The two halves `S = S_+ + S_-` of the generator.
#[derive(Clone, Debug)]
pub struct Generator {
    pub s_plus: FermionOperator,
    pub s_minus: FermionOperator,
}

impl Generator {
    pub fn build(scheme: &PatchScheme, sys: &FermiSystem, bundles: &[KMatrixBundle]) -> Result<Self> {
        let mut s_plus = FermionOperator::zero();
        for bundle in bundles {
            let k = bundle.k;
            let lists: Vec<Vec<(Momentum, Momentum)>> =
                bundle.labels.iter().map(|&a| scheme.pair_list(sys, a, k)).collect::<Result<_>>()?;
            for (i, &a) in bundle.labels.iter().enumerate() {
                for (j, &b) in bundle.labels.iter().enumerate() {
                    let kab = bundle.k_matrix[(i, j)];
                    if kab == 0.0 {
                        continue;
                    }
                    let w = -0.5 * kab / (bundle.n_of(a).unwrap() * bundle.n_of(b).unwrap());
                    for &(p, h) in &lists[i] {
                        for &(p2, h2) in &lists[j] {
                            s_plus.push(
                                w,
                                vec![Ladder::create(p), Ladder::create(h), Ladder::create(p2), Ladder::create(h2)],
                            );
                        }
                    }
                }
            }
        }
        let s_minus = s_plus.adjoint().scaled(-1.0);
        Ok(Generator { s_plus, s_minus })
    }

    pub fn s(&self) -> FermionOperator {
        self.s_plus.plus(&self.s_minus)
    }
}

/// `S = -1/2 sum_k sum_{a,b} K_ab (c*_a c*_b - h.c.)` as a symbolic operator.
pub fn build_s(scheme: &PatchScheme, sys: &FermiSystem, bundles: &[KMatrixBundle]) -> Result<FermionOperator> {
    Ok(Generator::build(scheme, sys, bundles)?.s())
}

/// `e^{t A} x` by a scaled Taylor series on the vector.
pub fn exp_action(apply: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], t: f64, norm_bound: f64) -> Result<Vec<f64>> {
    let steps = (t.abs() * norm_bound).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut v = x.to_vec();
    for _ in 0..steps {
        let mut acc = v.clone();
        let mut term = v;
        let mut converged = false;
        for j in 1..=200 {
            term = apply(&term).into_iter().map(|y| y * h / j as f64).collect();
            acc.iter_mut().zip(&term).for_each(|(a, b)| *a += b);
            let nt = norm(&term);
            if nt <= 1e-17 * norm(&acc).max(1e-300) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence { residual: norm(&term) });
        }
        v = acc;
    }
    Ok(v)
}

/// Oracle for one queried mode: `S` restricted to the component of `q`.
#[derive(Clone, Debug)]
pub struct FockOracle {
    pub modes: ModeSet,
    pub s: FermionOperator,
    matrix: Option<SparseFockOperator<f64>>,
}

impl FockOracle {
    pub fn new(s: &FermionOperator, q: Momentum) -> Result<Self> {
        let modes = ModeSet::component_of(s, q)?;
        Self::with_modes(s, modes)
    }

    pub fn with_modes(s: &FermionOperator, modes: ModeSet) -> Result<Self> {
        let s = s.restrict(&modes);
        let matrix = if modes.len() <= EXPLICIT_MATRIX_MODES { Some(s.materialize(&modes)?) } else { None };
        Ok(FockOracle { modes, s, matrix })
    }

    pub fn apply_s(&self, x: &[f64]) -> Vec<f64> {
        match &self.matrix {
            Some(m) => m.apply(x),
            // modes were validated on construction
            None => self.s.apply(&self.modes, x).expect("modes validated"),
        }
    }

    pub fn matrix(&self) -> Result<SparseFockOperator<f64>> {
        match &self.matrix {
            Some(m) => Ok(m.clone()),
            None => self.s.materialize(&self.modes),
        }
    }

    /// `e^{-S} Omega`.
    pub fn trial_state(&self) -> Result<FockState> {
        let omega = FockState::vacuum(&self.modes);
        let v = exp_action(|x| self.apply_s(x), &omega.amplitudes, -1.0, self.s.coefficient_norm())?;
        let residual = (norm(&v) - 1.0).abs();
        if residual > 1e-10 {
            return Err(Error::NoConvergence { residual });
        }
        Ok(FockState { amplitudes: v })
    }

    /// `<Omega, e^S a_q^* a_q e^{-S} Omega>`.
    pub fn exact_nq(&self, q: Momentum) -> Result<f64> {
        self.trial_state()?.occupation(&self.modes, q)
    }

    /// `<Omega, ad_S^n(a_q^* a_q) Omega>` from the binomial expansion
    /// `sum_j C(n,j) <(-S)^j Omega, a_q^* a_q (-S)^(n-j) Omega>`.
    pub fn multicommutator_expectation(&self, q: Momentum, n: usize) -> Result<f64> {
        let bit = 1usize << self.modes.position(q)?;
        let mut w = vec![FockState::vacuum(&self.modes).amplitudes];
        for j in 0..n {
            let next: Vec<f64> = self.apply_s(&w[j]).into_iter().map(|x| -x).collect();
            w.push(next);
        }
        let terms: Vec<f64> = (0..=n)
            .map(|j| {
                let nw: Vec<f64> =
                    w[n - j].iter().enumerate().map(|(b, &x)| if b & bit != 0 { x } else { 0.0 }).collect();
                binomial(n as u64, j as u64) as f64 * dot(&w[j], &nw)
            })
            .collect();
        Ok(pairwise_sum(&terms))
    }

    /// Same quantity through `n` explicit sparse commutators.
    pub fn multicommutator_expectation_explicit(&self, q: Momentum, n: usize) -> Result<f64> {
        let s = self.matrix()?;
        let i = self.modes.position(q)?;
        let bit = 1usize << i;
        let dim = self.modes.dim();
        let mut x =
            SparseFockOperator::from_triplets(dim, (0..dim).filter(|b| b & bit != 0).map(|b| (b, b, 1.0)).collect());
        for _ in 0..n {
            x = s.commutator(&x);
        }
        Ok(x.get(0, 0))
    }

    /// `||S||` on this component by power iteration.
    pub fn s_norm(&self, seed: u64) -> f64 {
        let st = self.s.adjoint();
        let m = self.matrix.as_ref();
        let mt = m.map(|m| m.transpose());
        power_norm(
            self.modes.dim(),
            seed,
            |x| self.apply_s(x),
            |x| match &mt {
                Some(t) => t.apply(x),
                None => st.apply(&self.modes, x).expect("modes validated"),
            },
        )
    }
}

/// Oracle excitation density of `q` under `S`.
pub fn exact_nq(s: &FermionOperator, q: Momentum) -> Result<f64> {
    FockOracle::new(s, q)?.exact_nq(q)
}

pub fn multicommutator_expectation(s: &FermionOperator, q: Momentum, n: usize) -> Result<f64> {
    FockOracle::new(s, q)?.multicommutator_expectation(q, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_all, Potential};
    use crate::numeric::factorial;

    fn setup(kf: f64, r: f64, m: usize, shell: f64, v: f64) -> (FermiSystem, PatchScheme, Vec<KMatrixBundle>) {
        let sys = FermiSystem::new(kf, r).unwrap();
        let scheme = PatchScheme::build(&sys, m, 1.0 / 12.0, shell).unwrap();
        let bundles = build_all(&sys, &scheme, &Potential::constant(v)).unwrap();
        (sys, scheme, bundles)
    }

    fn ten_modes() -> ModeSet {
        ModeSet::new((0..10).map(|i| Momentum::new(i - 5, i % 3, i / 4))).unwrap()
    }

    #[test]
    fn car_holds_exactly() {
        let modes = ten_modes();
        let dim = modes.dim();
        let id = SparseFockOperator::<i64>::identity(dim);
        let zero = SparseFockOperator::<i64>::zero(dim);
        let cr: Vec<_> = modes.modes().iter().map(|&q| creation(&modes, q).unwrap()).collect();
        let an: Vec<_> = modes.modes().iter().map(|&q| annihilation(&modes, q).unwrap()).collect();
        for i in 0..modes.len() {
            assert_eq!(cr[i].matmul(&cr[i]), zero);
            assert_eq!(an[i].transpose(), cr[i]);
            for j in 0..modes.len() {
                let expected = if i == j { &id } else { &zero };
                assert_eq!(&an[i].anticommutator(&cr[j]), expected);
                assert_eq!(an[i].anticommutator(&an[j]), zero);
                assert_eq!(cr[i].anticommutator(&cr[j]), zero);
            }
        }
        for a in &an {
            assert!(a.row(0).next().is_none() || a.triplets().iter().all(|&(_, c, _)| c != 0));
        }
    }

    #[test]
    fn annihilators_kill_the_vacuum() {
        let modes = ten_modes();
        let omega = FockState::vacuum(&modes);
        for &q in modes.modes() {
            let a = annihilation(&modes, q).unwrap().to_f64();
            assert!(a.apply(&omega.amplitudes).iter().all(|&x| x == 0.0));
        }
        assert!(creation(&modes, Momentum::new(9, 9, 9)).is_err());
    }

    #[test]
    fn symbolic_and_matrix_application_agree() {
        let modes = ten_modes();
        let ms = modes.modes();
        let mut op = FermionOperator::zero();
        op.push(0.5, vec![Ladder::create(ms[1]), Ladder::create(ms[7]), Ladder::annihilate(ms[3])]);
        op.push(-2.0, vec![Ladder::annihilate(ms[2]), Ladder::create(ms[2])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..modes.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = op.apply(&modes, &x).unwrap();
        let b = op.materialize(&modes).unwrap().apply(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn pair_creator_properties() {
        let (sys, scheme, bundles) = setup(1.415, 1.0, 6, 1.1, 1.0);
        let s = build_s(&scheme, &sys, &bundles).unwrap();
        let modes = ModeSet::component_of(&s, Momentum::new(0, 0, 2)).unwrap();
        assert_eq!(modes.len(), 12);
        let omega = FockState::vacuum(&modes);
        let bundle = bundles.iter().find(|b| b.k == Momentum::new(0, 0, 1)).unwrap();
        for &a in &bundle.labels {
            let c = build_c_star(&scheme, &sys, &modes, a, bundle.k).unwrap();
            let n = bundle.n_of(a).unwrap();
            assert!(c.op_norm(3) <= n + 1e-10);
            let v = c.apply(&omega.amplitudes);
            for (b, &x) in v.iter().enumerate() {
                if x != 0.0 {
                    assert_eq!(b.count_ones(), 2);
                }
            }
        }
        let (a, b) = (bundle.labels[0], bundle.labels[1]);
        let ca = build_c_star(&scheme, &sys, &modes, a, bundle.k).unwrap().transpose();
        let cb = build_c_star(&scheme, &sys, &modes, b, bundle.k).unwrap();
        assert!(ca.commutator(&cb).is_zero());
    }

    fn check_ccr(sys: &FermiSystem, scheme: &PatchScheme) -> usize {
        let mut valid = Vec::new();
        for k in sys.transfer_set() {
            for a in scheme.active_index_sets(sys, k).labels() {
                valid.push((a, k));
            }
        }
        let mut all = FermionOperator::zero();
        for &(a, k) in &valid {
            all = all.plus(&c_star_operator(scheme, sys, a, k).unwrap());
        }
        let modes = ModeSet::of_operator(&all).unwrap();
        let dim = modes.dim();
        let mut checked = 0;
        for &(a, k) in &valid {
            let c = c_star_operator(scheme, sys, a, k).unwrap().adjoint().materialize(&modes).unwrap();
            for &(b, l) in &valid {
                let cs = c_star_operator(scheme, sys, b, l).unwrap().materialize(&modes).unwrap();
                let mut diff = c.commutator(&cs);
                if a == b {
                    if k == l {
                        diff = diff.sub(&SparseFockOperator::identity(dim));
                    }
                    let e = ccr_error_operator(scheme, sys, a, k, l).unwrap().materialize(&modes).unwrap();
                    diff = diff.sub(&e);
                }
                assert!(diff.max_abs() <= 1e-12, "{a} {k} {b} {l}: {}", diff.max_abs());
                checked += 1;
            }
        }
        checked
    }

    #[test]
    fn approximate_ccr_on_toy_configs() {
        let sys = FermiSystem::new(1.0, 1.0).unwrap();
        let scheme = PatchScheme::build(&sys, 6, 1.0 / 12.0, 1.1).unwrap();
        assert_eq!(check_ccr(&sys, &scheme), 36);
        let scheme2 = PatchScheme::build(&sys, 2, 1.0 / 12.0, 1.1).unwrap();
        assert_eq!(check_ccr(&sys, &scheme2), 4);
    }

    #[test]
    fn ccr_error_annihilates_vacuum() {
        let (sys, scheme, _) = setup(1.415, 1.5, 6, 1.1, 1.0);
        for k in sys.transfer_set() {
            for a in scheme.active_index_sets(&sys, k).labels() {
                let e = ccr_error_operator(&scheme, &sys, a, k, k).unwrap();
                let modes = ModeSet::of_operator(&e).unwrap();
                let v = e.apply(&modes, &FockState::vacuum(&modes).amplitudes).unwrap();
                assert!(v.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn ccr_error_vanishes_for_disjoint_kernels() {
        let sys = FermiSystem::new(2.0, 2.5).unwrap();
        let scheme = PatchScheme::build(&sys, 6, 1.0 / 12.0, 1.0).unwrap();
        let mut disjoint = 0;
        for k in sys.transfer_set() {
            for l in sys.transfer_set() {
                let sk = scheme.active_index_sets(&sys, k);
                let sl = scheme.active_index_sets(&sys, l);
                for a in sk.labels() {
                    if !sl.contains(a) {
                        continue;
                    }
                    let pk = scheme.pair_list(&sys, a, k).unwrap();
                    let pl = scheme.pair_list(&sys, a, l).unwrap();
                    let share = pk.iter().any(|x| pl.iter().any(|y| x.0 == y.0 || x.1 == y.1));
                    if share {
                        continue;
                    }
                    disjoint += 1;
                    let e = ccr_error_operator(&scheme, &sys, a, k, l).unwrap();
                    assert!(e.is_empty());
                }
            }
        }
        assert!(disjoint > 0);
    }

    #[test]
    fn generator_structure() {
        let (sys, scheme, bundles) = setup(1.415, 1.0, 6, 1.1, 2.0);
        let g = Generator::build(&scheme, &sys, &bundles).unwrap();
        let q = Momentum::new(0, 0, 2);
        let s = g.s();
        let modes = ModeSet::component_of(&s, q).unwrap();
        let sm = s.restrict(&modes).materialize(&modes).unwrap();
        assert!(sm.add(&sm.transpose()).max_abs() <= 1e-12);
        let sp = g.s_plus.restrict(&modes).materialize(&modes).unwrap();
        let sn = g.s_minus.restrict(&modes).materialize(&modes).unwrap();
        assert!(sn.add(&sp.transpose()).max_abs() <= 1e-15);
        // <u, S v> = -<S u, v>
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = (0..modes.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..modes.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs = dot(&u, &sm.apply(&v));
        let rhs = -dot(&sm.apply(&u), &v);
        assert!((lhs - rhs).abs() < 1e-12);
        // operator norm bound
        let bound: f64 = bundles
            .iter()
            .map(|b| {
                let mut t = 0.0;
                for (i, &a) in b.labels.iter().enumerate() {
                    for (j, &c) in b.labels.iter().enumerate() {
                        t += b.k_matrix[(i, j)].abs() * b.n_of(a).unwrap() * b.n_of(c).unwrap();
                    }
                }
                t
            })
            .sum();
        let oracle = FockOracle::with_modes(&s, modes).unwrap();
        assert!(oracle.s_norm(1) <= bound + 1e-9);
    }

    #[test]
    fn zero_kernel_gives_zero_generator() {
        let (sys, scheme, bundles) = setup(1.0, 1.0, 6, 1.1, 0.0);
        let s = build_s(&scheme, &sys, &bundles).unwrap();
        assert!(s.is_empty());
        for q in [Momentum::new(0, 0, 2), Momentum::new(0, 0, 1)] {
            assert_eq!(exact_nq(&s, q).unwrap(), 0.0);
        }
    }

    #[test]
    fn trial_state_and_occupations() {
        let (sys, scheme, bundles) = setup(1.415, 1.0, 6, 1.1, 2.0);
        let s = build_s(&scheme, &sys, &bundles).unwrap();
        for q in [Momentum::new(0, 0, 2), Momentum::new(-1, 0, 1), Momentum::new(0, 0, 1)] {
            let oracle = FockOracle::new(&s, q).unwrap();
            let v = oracle.trial_state().unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-10);
            let nq = oracle.exact_nq(q).unwrap();
            assert!(nq > 0.0 && nq <= 1.0, "{nq}");
        }
    }

    #[test]
    fn multicommutators() {
        let (sys, scheme, bundles) = setup(1.415, 1.0, 6, 1.1, 2.0);
        let s = build_s(&scheme, &sys, &bundles).unwrap();
        for q in [Momentum::new(0, 0, 2), Momentum::new(0, 0, 1)] {
            let oracle = FockOracle::new(&s, q).unwrap();
            assert_eq!(oracle.multicommutator_expectation(q, 0).unwrap(), 0.0);
            for n in 1..=4 {
                let fast = oracle.multicommutator_expectation(q, n).unwrap();
                let slow = oracle.multicommutator_expectation_explicit(q, n).unwrap();
                assert!((fast - slow).abs() < 1e-12 * slow.abs().max(1.0), "{n}: {fast} {slow}");
                if n % 2 == 1 {
                    assert!(fast.abs() < 1e-12);
                }
            }
            // partial sums approach the oracle within the exponential tail
            let exact = oracle.exact_nq(q).unwrap();
            let two_s = 2.0 * oracle.s_norm(2);
            let mut partial = 0.0;
            for n in 0..=10 {
                partial += oracle.multicommutator_expectation(q, n).unwrap() / factorial(n as u64);
                let tail = crate::numeric::exp_tail(two_s, n);
                assert!((partial - exact).abs() <= tail + 1e-12, "{n}");
            }
        }
    }

    #[test]
    fn mode_cap_is_enforced() {
        let many = (0..25).map(|i| Momentum::new(i, 0, 0));
        assert!(matches!(ModeSet::new(many), Err(Error::ModeCapExceeded { size: 25, cap: 24 })));
    }
}
