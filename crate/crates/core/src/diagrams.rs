//! Normal-ordered operators with explicit kernels, their attached products and
//! the commutator formulas built from them.
//!
//! An operator with `n` left legs and `m` right legs stands for
//! `sum f(q_1..q_n, q'_1..q'_m) a*_{q_n} ... a*_{q_1} a_{q'_1} ... a_{q'_m}`.
//! Connectors are numbered from 1 as in that display: left connector `j` of a
//! vertex carries `q_j`, right connector `j` carries `q'_j`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fock::{FermionOperator, Ladder, ModeSet, SparseFockOperator};
use crate::lattice::Momentum;
use crate::numeric::permutation_sign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Statistics {
    Fermionic,
    Bosonic,
}

/// Key of a kernel entry: `(q_1..q_n, q'_1..q'_m)`.
pub type LegKey = (Vec<Momentum>, Vec<Momentum>);

#[derive(Clone, Debug, PartialEq)]
pub struct NormalOrderedOperator {
    pub n: usize,
    pub m: usize,
    pub stats: Statistics,
    pub kernel: BTreeMap<LegKey, f64>,
}

impl NormalOrderedOperator {
    pub fn new(n: usize, m: usize, stats: Statistics) -> Self {
        NormalOrderedOperator { n, m, stats, kernel: BTreeMap::new() }
    }

    /// Adds `value` to the kernel entry at `(left, right)`.
    pub fn add(&mut self, left: Vec<Momentum>, right: Vec<Momentum>, value: f64) -> Result<()> {
        if left.len() != self.n || right.len() != self.m {
            return Err(Error::InvalidParameter {
                field: "kernel",
                reason: format!("entry with {}/{} legs on a ({},{}) vertex", left.len(), right.len(), self.n, self.m),
            });
        }
        *self.kernel.entry((left, right)).or_insert(0.0) += value;
        Ok(())
    }

    /// Single-term operator `a*_{left[n-1]} ... a*_{left[0]} a_{right[0]} ... a_{right[m-1]}`.
    pub fn monomial(left: Vec<Momentum>, right: Vec<Momentum>, stats: Statistics) -> Self {
        let mut op = Self::new(left.len(), right.len(), stats);
        op.kernel.insert((left, right), 1.0);
        op
    }

    pub fn prune(&mut self) {
        self.kernel.retain(|_, v| *v != 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.kernel.values().all(|&v| v == 0.0)
    }

    pub fn modes(&self) -> Vec<Momentum> {
        let mut out: Vec<Momentum> = self.kernel.keys().flat_map(|(l, r)| l.iter().chain(r.iter()).copied()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Symbolic ladder form (fermionic reading).
    pub fn to_fermion_operator(&self) -> FermionOperator {
        let mut op = FermionOperator::zero();
        for ((left, right), &v) in &self.kernel {
            let mut ops: Vec<Ladder> = left.iter().rev().map(|&q| Ladder::create(q)).collect();
            ops.extend(right.iter().map(|&q| Ladder::annihilate(q)));
            op.push(v, ops);
        }
        op
    }
}

/// A sum of normal-ordered operators of possibly different leg counts.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSum {
    pub stats: Statistics,
    pub parts: BTreeMap<(usize, usize), NormalOrderedOperator>,
}

impl OperatorSum {
    pub fn zero(stats: Statistics) -> Self {
        OperatorSum { stats, parts: BTreeMap::new() }
    }

    pub fn add_scaled(&mut self, op: &NormalOrderedOperator, s: f64) {
        let part = self.parts.entry((op.n, op.m)).or_insert_with(|| NormalOrderedOperator::new(op.n, op.m, op.stats));
        for (k, &v) in &op.kernel {
            *part.kernel.entry(k.clone()).or_insert(0.0) += s * v;
        }
    }

    pub fn add_sum(&mut self, other: &OperatorSum, s: f64) {
        for op in other.parts.values() {
            self.add_scaled(op, s);
        }
    }

    pub fn prune(&mut self) {
        for p in self.parts.values_mut() {
            p.prune();
        }
        self.parts.retain(|_, p| !p.kernel.is_empty());
    }

    pub fn is_zero(&self) -> bool {
        self.parts.values().all(|p| p.is_zero())
    }

    pub fn to_fermion_operator(&self) -> FermionOperator {
        self.parts.values().fold(FermionOperator::zero(), |acc, p| acc.plus(&p.to_fermion_operator()))
    }
}

/// `C` contractions: left connector `pi[c]` of the right operand meets right
/// connector `pi_prime[c]` of the left operand. Indices are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContractionConfig {
    pub pi: Vec<usize>,
    pub pi_prime: Vec<usize>,
}

impl ContractionConfig {
    pub fn count(&self) -> usize {
        self.pi.len()
    }

    /// Checks the structural invariants against leg counts `(m1, n2)`.
    pub fn is_valid(&self, m1: usize, n2: usize) -> bool {
        let c = self.pi.len();
        c >= 1
            && c == self.pi_prime.len()
            && c <= m1.min(n2)
            && self.pi.windows(2).all(|w| w[0] > w[1])
            && self.pi.iter().all(|&j| (1..=n2).contains(&j))
            && self.pi_prime.iter().all(|&j| (1..=m1).contains(&j))
            && {
                let mut s = self.pi_prime.clone();
                s.sort_unstable();
                s.windows(2).all(|w| w[0] != w[1])
            }
    }
}

impl fmt::Display for ContractionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs: Vec<String> = self.pi.iter().zip(&self.pi_prime).map(|(a, b)| format!("(1,{b})-(2,{a})")).collect();
        write!(f, "C={} [{}]", self.count(), pairs.join(" "))
    }
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..=n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, n, k, &mut Vec::new(), &mut out);
    out
}

fn arrangements(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 1..=n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(n, k, used, cur, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut vec![false; n + 1], &mut Vec::new(), &mut out);
    out
}

/// All configurations for a left operand with `m1` right legs and a right
/// operand with `n2` left legs, in a fixed order.
pub fn enumerate_configs(m1: usize, n2: usize) -> Vec<ContractionConfig> {
    let mut out = Vec::new();
    for c in 1..=m1.min(n2) {
        for mut subset in k_subsets(n2, c) {
            subset.reverse();
            for arr in arrangements(m1, c) {
                out.push(ContractionConfig { pi: subset.clone(), pi_prime: arr });
            }
        }
    }
    out
}

pub fn enumerate_contraction_configs(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> Vec<ContractionConfig> {
    enumerate_configs(a1.m, a2.n)
}

/// The permutations `(sigma, sigma')` taking a configuration to maximally
/// crossed form, as 0-based image arrays over connectors `1..=n2` and
/// `1..=m1`.
pub fn crossing_permutations(m1: usize, n2: usize, cfg: &ContractionConfig) -> (Vec<usize>, Vec<usize>) {
    fn build(len: usize, contracted: &[usize]) -> Vec<usize> {
        let c = contracted.len();
        let mut img = vec![usize::MAX; len];
        for (i, &j) in contracted.iter().enumerate() {
            img[j - 1] = len - i - 1;
        }
        let mut next = 0;
        for slot in img.iter_mut() {
            if *slot == usize::MAX {
                *slot = next;
                next += 1;
            }
        }
        debug_assert_eq!(next, len - c);
        img
    }
    (build(n2, &cfg.pi), build(m1, &cfg.pi_prime))
}

/// How configuration signs are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignRule {
    #[default]
    Full,
    /// Omits the `(m1-C)(n2-C)` jump factor. Exists only to check that the
    /// verification suite notices a wrong sign.
    Sabotaged,
}

pub fn fermionic_sign_with(m1: usize, n2: usize, cfg: &ContractionConfig, rule: SignRule) -> i32 {
    let c = cfg.count();
    let (s, sp) = crossing_permutations(m1, n2, cfg);
    let jump = if rule == SignRule::Full && ((m1 - c) * (n2 - c)) % 2 == 1 { -1 } else { 1 };
    jump * permutation_sign(&s) * permutation_sign(&sp)
}

pub fn fermionic_sign(m1: usize, n2: usize, cfg: &ContractionConfig) -> i32 {
    fermionic_sign_with(m1, n2, cfg, SignRule::Full)
}

/// `A1 |> A2`, split by result leg counts.
pub fn attached_product(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> Result<OperatorSum> {
    attached_product_with(a1, a2, SignRule::Full)
}

pub fn attached_product_with(
    a1: &NormalOrderedOperator,
    a2: &NormalOrderedOperator,
    rule: SignRule,
) -> Result<OperatorSum> {
    if a1.stats != a2.stats {
        return Err(Error::StatisticsMismatch);
    }
    let mut out = OperatorSum::zero(a1.stats);
    for cfg in enumerate_contraction_configs(a1, a2) {
        let c = cfg.count();
        let sign = match a1.stats {
            Statistics::Fermionic => fermionic_sign_with(a1.m, a2.n, &cfg, rule) as f64,
            Statistics::Bosonic => 1.0,
        };
        let uncontracted: Vec<usize> = (1..=a2.n).filter(|j| !cfg.pi.contains(j)).collect();
        let uncontracted_p: Vec<usize> = (1..=a1.m).filter(|j| !cfg.pi_prime.contains(j)).collect();
        let mut part = NormalOrderedOperator::new(a1.n + a2.n - c, a1.m + a2.m - c, a1.stats);
        for ((l1, r1), &f1) in &a1.kernel {
            for ((l2, r2), &f2) in &a2.kernel {
                if !cfg.pi.iter().zip(&cfg.pi_prime).all(|(&j, &jp)| l2[j - 1] == r1[jp - 1]) {
                    continue;
                }
                let mut left: Vec<Momentum> = uncontracted.iter().map(|&j| l2[j - 1]).collect();
                left.extend_from_slice(l1);
                let mut right: Vec<Momentum> = uncontracted_p.iter().map(|&j| r1[j - 1]).collect();
                right.extend_from_slice(r2);
                part.add(left, right, sign * f1 * f2)?;
            }
        }
        out.add_scaled(&part, 1.0);
    }
    out.prune();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bracket {
    Commutator,
    Anticommutator,
}

/// Which bracket the attached products express for this pair.
///
/// The uncontracted parts of `A1 A2` and `A2 A1` differ by the graded sign
/// `(-1)^{(n1+m1)(n2+m2)}`, so they cancel in the commutator unless both
/// operators are odd. The leg-count parity `m1 n2 + m2 n1` picks the same
/// bracket whenever `n1 n2 + m1 m2` is even, which covers every even vertex;
/// see [`leg_parity`].
pub fn bracket_kind(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> Bracket {
    match a1.stats {
        Statistics::Bosonic => Bracket::Commutator,
        Statistics::Fermionic => {
            if ((a1.n + a1.m) * (a2.n + a2.m)).is_multiple_of(2) {
                Bracket::Commutator
            } else {
                Bracket::Anticommutator
            }
        }
    }
}

/// `m1 n2 + m2 n1`.
pub fn leg_parity(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> usize {
    a1.m * a2.n + a2.m * a1.n
}

/// `A1 |> A2 -+ A2 |> A1` with the bracket chosen by parity.
pub fn bracket(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> Result<(Bracket, OperatorSum)> {
    bracket_with(a1, a2, SignRule::Full)
}

pub fn bracket_with(
    a1: &NormalOrderedOperator,
    a2: &NormalOrderedOperator,
    rule: SignRule,
) -> Result<(Bracket, OperatorSum)> {
    let kind = bracket_kind(a1, a2);
    let mut out = attached_product_with(a1, a2, rule)?;
    let back = attached_product_with(a2, a1, rule)?;
    out.add_sum(&back, if kind == Bracket::Commutator { -1.0 } else { 1.0 });
    out.prune();
    Ok((kind, out))
}

pub fn commutator(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> Result<OperatorSum> {
    match bracket(a1, a2)? {
        (Bracket::Commutator, s) => Ok(s),
        (Bracket::Anticommutator, _) => {
            Err(Error::ParityMismatch { parity: (a1.n + a1.m) * (a2.n + a2.m), required: "even" })
        }
    }
}

pub fn anticommutator(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator) -> Result<OperatorSum> {
    match bracket(a1, a2)? {
        (Bracket::Anticommutator, s) => Ok(s),
        (Bracket::Commutator, _) => {
            Err(Error::ParityMismatch { parity: (a1.n + a1.m) * (a2.n + a2.m), required: "odd" })
        }
    }
}

/// Text rendering of a two-vertex diagram, used in failure messages.
pub fn describe(a1: &NormalOrderedOperator, a2: &NormalOrderedOperator, cfg: &ContractionConfig) -> String {
    let (s, sp) = crossing_permutations(a1.m, a2.n, cfg);
    format!(
        "A1({},{}) -> A2({},{}) {cfg} sigma={:?} sigma'={:?} sign={:+}",
        a1.n,
        a1.m,
        a2.n,
        a2.m,
        s.iter().map(|x| x + 1).collect::<Vec<_>>(),
        sp.iter().map(|x| x + 1).collect::<Vec<_>>(),
        fermionic_sign(a1.m, a2.n, cfg)
    )
}

/// Boson modes with occupation truncated at `cap`, for oracle checks.
#[derive(Clone, Debug)]
pub struct BosonSpace {
    modes: Vec<Momentum>,
    cap: usize,
}

impl BosonSpace {
    pub fn new(modes: Vec<Momentum>, cap: usize) -> Result<Self> {
        let dim = (cap as u64 + 1).checked_pow(modes.len() as u32);
        if cap == 0 || dim.is_none_or(|d| d > 1 << 20) {
            return Err(Error::InvalidParameter {
                field: "cap",
                reason: format!("{} modes with cap {cap}", modes.len()),
            });
        }
        Ok(BosonSpace { modes, cap })
    }

    pub fn dim(&self) -> usize {
        (self.cap + 1).pow(self.modes.len() as u32)
    }

    fn occupations(&self, mut idx: usize) -> Vec<usize> {
        (0..self.modes.len())
            .map(|_| {
                let o = idx % (self.cap + 1);
                idx /= self.cap + 1;
                o
            })
            .collect()
    }

    fn index(&self, occ: &[usize]) -> usize {
        occ.iter().rev().fold(0, |acc, &o| acc * (self.cap + 1) + o)
    }

    fn position(&self, q: Momentum) -> Result<usize> {
        self.modes.iter().position(|&m| m == q).ok_or(Error::UnknownMode(q))
    }

    /// Basis states on which operators with at most `creators` creation legs
    /// in total never touch the cap.
    pub fn exact_columns(&self, creators: usize) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.occupations(i).iter().all(|&o| o + creators <= self.cap)).collect()
    }

    pub fn materialize(&self, op: &NormalOrderedOperator) -> Result<SparseFockOperator<f64>> {
        let mut trip = Vec::new();
        for ((left, right), &v) in &op.kernel {
            let mut ops: Vec<(usize, bool)> =
                left.iter().rev().map(|&q| Ok((self.position(q)?, true))).collect::<Result<_>>()?;
            for &q in right {
                ops.push((self.position(q)?, false));
            }
            'basis: for b in 0..self.dim() {
                let mut occ = self.occupations(b);
                let mut amp = v;
                for &(i, dagger) in ops.iter().rev() {
                    if dagger {
                        if occ[i] == self.cap {
                            continue 'basis;
                        }
                        occ[i] += 1;
                        amp *= (occ[i] as f64).sqrt();
                    } else {
                        if occ[i] == 0 {
                            continue 'basis;
                        }
                        amp *= (occ[i] as f64).sqrt();
                        occ[i] -= 1;
                    }
                }
                trip.push((self.index(&occ), b, amp));
            }
        }
        Ok(SparseFockOperator::from_triplets(self.dim(), trip))
    }

    pub fn materialize_sum(&self, sum: &OperatorSum) -> Result<SparseFockOperator<f64>> {
        let mut acc = SparseFockOperator::zero(self.dim());
        for p in sum.parts.values() {
            acc = acc.add(&self.materialize(p)?);
        }
        Ok(acc)
    }
}

/// Random operator with integer-valued kernel entries on the given modes.
pub fn random_operator<R: Rng>(
    rng: &mut R,
    stats: Statistics,
    max_legs: usize,
    modes: &[Momentum],
    max_entries: usize,
) -> NormalOrderedOperator {
    let n = rng.gen_range(0..=max_legs);
    let m = rng.gen_range(0..=max_legs);
    let mut op = NormalOrderedOperator::new(n, m, stats);
    for _ in 0..rng.gen_range(1..=max_entries) {
        let left = (0..n).map(|_| modes[rng.gen_range(0..modes.len())]).collect();
        let right = (0..m).map(|_| modes[rng.gen_range(0..modes.len())]).collect();
        let mut v = 0;
        while v == 0 {
            v = rng.gen_range(-3..=3);
        }
        // leg counts are consistent by construction
        op.add(left, right, v as f64).expect("leg counts");
    }
    op.prune();
    op
}

/// Largest entry of `symbolic - (A1 A2 -+ A2 A1)` on a fermionic mode set.
pub fn fermionic_bracket_residual(
    a1: &NormalOrderedOperator,
    a2: &NormalOrderedOperator,
    rule: SignRule,
    modes: &ModeSet,
) -> Result<f64> {
    let (kind, sym) = bracket_with(a1, a2, rule)?;
    let m1 = a1.to_fermion_operator().materialize(modes)?;
    let m2 = a2.to_fermion_operator().materialize(modes)?;
    let direct = match kind {
        Bracket::Commutator => m1.commutator(&m2),
        Bracket::Anticommutator => m1.anticommutator(&m2),
    };
    let symbolic = sym.to_fermion_operator().materialize(modes)?;
    Ok(symbolic.sub(&direct).max_abs())
}

/// Same for bosons, restricted to columns where the cap plays no role and
/// measured relative to the largest entry of the matrix commutator there
/// (square-root matrix elements make entries grow with the occupation).
pub fn bosonic_bracket_residual(
    a1: &NormalOrderedOperator,
    a2: &NormalOrderedOperator,
    space: &BosonSpace,
) -> Result<f64> {
    let sym = commutator(a1, a2)?;
    let m1 = space.materialize(a1)?;
    let m2 = space.materialize(a2)?;
    let direct = m1.commutator(&m2);
    let diff = space.materialize_sum(&sym)?.sub(&direct);
    let cols = space.exact_columns(a1.n + a2.n);
    let mut keep = vec![false; space.dim()];
    cols.iter().for_each(|&c| keep[c] = true);
    let kept_max = |m: &SparseFockOperator<f64>| {
        m.triplets().into_iter().filter(|&(_, c, _)| keep[c]).map(|(_, _, v)| v.abs()).fold(0.0, f64::max)
    };
    Ok(kept_max(&diff) / kept_max(&direct).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{binomial, factorial_u128};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(i: i32) -> Momentum {
        Momentum::new(i, 0, 0)
    }

    fn modes(k: i32) -> Vec<Momentum> {
        (0..k).map(q).collect()
    }

    #[test]
    fn config_counts() {
        assert_eq!(enumerate_configs(1, 1).len(), 1);
        assert_eq!(enumerate_configs(2, 2).len(), 6);
        assert_eq!(enumerate_configs(0, 3).len(), 0);
        for m1 in 0..=4usize {
            for n2 in 0..=4usize {
                let expected: u128 = (1..=m1.min(n2) as u64)
                    .map(|c| binomial(m1 as u64, c) * binomial(n2 as u64, c) * factorial_u128(c))
                    .sum();
                let configs = enumerate_configs(m1, n2);
                assert_eq!(configs.len() as u128, expected);
                assert!(configs.iter().all(|c| c.is_valid(m1, n2)));
                let mut sorted = configs.clone();
                sorted.sort();
                sorted.dedup();
                assert_eq!(sorted.len(), configs.len());
            }
        }
    }

    #[test]
    fn figure_six_sign() {
        // two contractions, top to top and middle to bottom, third right leg free
        let cfg = ContractionConfig { pi: vec![2, 1], pi_prime: vec![1, 2] };
        let (s, sp) = crossing_permutations(3, 2, &cfg);
        assert_eq!(s, vec![0, 1]);
        assert_eq!(sp, vec![2, 1, 0]);
        assert_eq!(permutation_sign(&sp), -1);
        assert_eq!(fermionic_sign(3, 2, &cfg), -1);
    }

    #[test]
    fn fully_crossed_and_full_contraction_signs() {
        // maximally crossed: pi'(c) = m1 - c + 1, pi(c) = n2 - c + 1
        for (m1, n2) in [(2, 3), (3, 3), (4, 2)] {
            let c = m1.min(n2);
            let cfg =
                ContractionConfig { pi: (0..c).map(|i| n2 - i).collect(), pi_prime: (0..c).map(|i| m1 - i).collect() };
            let jump = if ((m1 - c) * (n2 - c)) % 2 == 1 { -1 } else { 1 };
            assert_eq!(fermionic_sign(m1, n2, &cfg), jump);
        }
        for cfg in enumerate_configs(3, 3).into_iter().filter(|c| c.count() == 3) {
            let (s, sp) = crossing_permutations(3, 3, &cfg);
            assert_eq!(fermionic_sign(3, 3, &cfg), permutation_sign(&s) * permutation_sign(&sp));
        }
    }

    #[test]
    fn sign_is_independent_of_connector_storage() {
        // inversion counting over a shuffled visiting order gives the same parity
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cfg in enumerate_configs(4, 4) {
            let (s, sp) = crossing_permutations(4, 4, &cfg);
            for perm in [&s, &sp] {
                let mut order: Vec<usize> = (0..perm.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let mut inv = 0;
                for &a in &order {
                    for &b in &order {
                        if a < b && perm[a] > perm[b] {
                            inv += 1;
                        }
                    }
                }
                assert_eq!(if inv % 2 == 0 { 1 } else { -1 }, permutation_sign(perm));
            }
        }
    }

    #[test]
    fn single_ladders_reproduce_car() {
        let (p, r) = (q(0), q(1));
        let ms = ModeSet::new([p, r]).unwrap();
        for (x, y) in [(p, p), (p, r)] {
            let a = NormalOrderedOperator::monomial(vec![], vec![x], Statistics::Fermionic);
            let c = NormalOrderedOperator::monomial(vec![y], vec![], Statistics::Fermionic);
            let fwd = attached_product(&a, &c).unwrap();
            assert_eq!(fwd.is_zero(), x != y);
            let back = attached_product(&c, &a).unwrap();
            assert!(back.is_zero());
            let (kind, sum) = bracket(&a, &c).unwrap();
            assert_eq!(kind, Bracket::Anticommutator);
            let expected = if x == y { 1.0 } else { 0.0 };
            let mat = sum.to_fermion_operator().materialize(&ms).unwrap();
            let id = SparseFockOperator::<f64>::identity(ms.dim()).scale(expected);
            assert_eq!(mat.sub(&id).max_abs(), 0.0);
            assert!(commutator(&a, &c).is_err());
        }
    }

    #[test]
    fn leg_parity_rule_fails_for_odd_creator_pairs() {
        // [a*_p, a*_q] = 2 a*_p a*_q although no contraction exists
        let ms = ModeSet::new([q(0), q(1)]).unwrap();
        let a = NormalOrderedOperator::monomial(vec![q(0)], vec![], Statistics::Fermionic);
        let b = NormalOrderedOperator::monomial(vec![q(1)], vec![], Statistics::Fermionic);
        assert_eq!(leg_parity(&a, &b) % 2, 0);
        assert_eq!(bracket_kind(&a, &b), Bracket::Anticommutator);
        let (ma, mb) =
            (a.to_fermion_operator().materialize(&ms).unwrap(), b.to_fermion_operator().materialize(&ms).unwrap());
        assert!(ma.commutator(&mb).max_abs() > 1.0);
        assert_eq!(ma.anticommutator(&mb).max_abs(), 0.0);
        assert!(anticommutator(&a, &b).unwrap().is_zero());
    }

    #[test]
    fn leg_parity_agrees_when_one_side_is_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(4), 1);
            let b = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(4), 1);
            if (a.n * b.n + a.m * b.m) % 2 == 0 {
                let by_legs =
                    if leg_parity(&a, &b).is_multiple_of(2) { Bracket::Commutator } else { Bracket::Anticommutator };
                assert_eq!(by_legs, bracket_kind(&a, &b));
            }
        }
    }

    #[test]
    fn no_right_legs_means_no_configs() {
        let a = NormalOrderedOperator::monomial(vec![q(0), q(1)], vec![], Statistics::Fermionic);
        let b = NormalOrderedOperator::monomial(vec![q(1)], vec![q(0)], Statistics::Fermionic);
        assert!(attached_product(&a, &b).unwrap().is_zero());
    }

    #[test]
    fn mixed_statistics_are_rejected() {
        let a = NormalOrderedOperator::monomial(vec![], vec![q(0)], Statistics::Fermionic);
        let b = NormalOrderedOperator::monomial(vec![q(0)], vec![], Statistics::Bosonic);
        assert!(matches!(attached_product(&a, &b), Err(Error::StatisticsMismatch)));
    }

    #[test]
    fn four_creator_vertex_always_commutes() {
        let s = NormalOrderedOperator::monomial(vec![q(0), q(1), q(2), q(3)], vec![], Statistics::Fermionic);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(6), 3);
            assert_eq!(bracket_kind(&s, &a), Bracket::Commutator);
        }
    }

    #[test]
    fn self_commutator_vanishes() {
        let ms = ModeSet::new(modes(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 20 {
            let a = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(5), 3);
            if bracket_kind(&a, &a) != Bracket::Commutator {
                continue;
            }
            let c = commutator(&a, &a).unwrap();
            assert_eq!(c.to_fermion_operator().materialize(&ms).unwrap().max_abs(), 0.0);
            checked += 1;
        }
    }

    #[test]
    fn fermionic_brackets_match_matrices() {
        let ms = ModeSet::new(modes(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a1 = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(6), 3);
            let a2 = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(6), 3);
            let r = fermionic_bracket_residual(&a1, &a2, SignRule::Full, &ms).unwrap();
            assert!(r <= 1e-12, "{a1:?} {a2:?} residual {r}");
        }
    }

    #[test]
    fn sabotaged_sign_is_detected() {
        let ms = ModeSet::new(modes(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut failures = 0;
        for _ in 0..100 {
            let a1 = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(6), 3);
            let a2 = random_operator(&mut rng, Statistics::Fermionic, 3, &modes(6), 3);
            if fermionic_bracket_residual(&a1, &a2, SignRule::Sabotaged, &ms).unwrap() > 1e-12 {
                failures += 1;
            }
        }
        assert!(failures > 0);
    }

    #[test]
    fn bosonic_commutators_match_capped_matrices() {
        let space = BosonSpace::new(modes(3), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..25 {
            let a1 = random_operator(&mut rng, Statistics::Bosonic, 3, &modes(3), 3);
            let a2 = random_operator(&mut rng, Statistics::Bosonic, 3, &modes(3), 3);
            let r = bosonic_bracket_residual(&a1, &a2, &space).unwrap();
            assert!(r <= 1e-12, "{r}");
        }
    }

    #[test]
    fn describe_mentions_sign() {
        let a1 = NormalOrderedOperator::new(0, 3, Statistics::Fermionic);
        let a2 = NormalOrderedOperator::new(2, 0, Statistics::Fermionic);
        let text = describe(&a1, &a2, &ContractionConfig { pi: vec![2, 1], pi_prime: vec![1, 2] });
        assert!(text.contains("sign=-1"), "{text}");
    }
}
