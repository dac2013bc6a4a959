//! The invariant suite behind `friedrichs verify`.
//!
//! Each check returns a [`CheckResult`] instead of panicking, so a run always
//! produces a complete report. Configuration problems (for example a mode
//! set over the cap) surface as errors.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PotentialSpec, RunConfig, System};
use crate::diagrams::{
    bosonic_bracket_residual, bracket_kind, crossing_permutations, fermionic_bracket_residual, fermionic_sign_with,
    leg_parity, random_operator, BosonSpace, Bracket, ContractionConfig, SignRule, Statistics,
};
use crate::error::Result;
use crate::fock::{
    annihilation, c_star_operator, ccr_error_operator, creation, FermionOperator, FockOracle, ModeSet,
    SparseFockOperator,
};
use crate::lattice::Momentum;
use crate::numeric::{exp_tail, factorial, permutation_sign};
use crate::series::{Method, NqResult, QSide, SeriesContext};

/// Tolerances of the suite.
pub mod tol {
    pub const BRACKET: f64 = 1e-12;
    pub const CCR: f64 = 1e-12;
    pub const ORACLE_RELATIVE: f64 = 1e-10;
    pub const ODD_ORDER: f64 = 1e-12;
    pub const BOSONIZED_FORMULA: f64 = 1e-10;
    pub const NORM: f64 = 1e-10;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Drops one factor `-1` from the contraction sign rule; check 2 must
    /// then fail.
    pub sabotage_sign: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn timed(id: u8, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<CheckResult> {
    let start = Instant::now();
    let (passed, detail) = f()?;
    Ok(CheckResult { id, name: name.to_string(), passed, detail, seconds: start.elapsed().as_secs_f64() })
}

/// Runs checks 1 to 10 on `config`.
pub fn run_all(config: &RunConfig, opts: VerifyOptions) -> Result<VerifyReport> {
    let system = System::build(config)?;
    let ctx = &system.context;
    let qs = oracle_qs(&system);
    let checks = vec![
        timed(1, "car-exactness", check_car)?,
        timed(2, "bracket-oracle", || check_brackets(config.seed, opts))?,
        timed(3, "crossing-sign-fixture", check_sign_fixture)?,
        timed(4, "approximate-ccr", || check_ccr(ctx))?,
        timed(5, "exact-series-vs-oracle", || check_exact_terms(ctx, &qs))?,
        timed(6, "bosonized-series", || check_bosonized(ctx, &qs))?,
        timed(7, "convergence-envelope", || check_envelope(ctx, &qs, config.seed))?,
        timed(8, "pair-creator-norm", || check_c_star_norms(ctx, config.seed))?,
        timed(9, "zero-potential-chain", || check_zero_potential(config))?,
        timed(10, "thread-determinism", || check_determinism(config))?,
    ];
    Ok(VerifyReport { checks })
}

/// The claimed momenta of `q_list` (one outside and one inside at least
/// when available).
fn oracle_qs(system: &System) -> Vec<Momentum> {
    let ctx = &system.context;
    let mut qs: Vec<Momentum> = system.q_values().into_iter().filter(|&q| ctx.scheme.patch_of(q).is_some()).collect();
    for side in [QSide::Outside, QSide::Inside] {
        if !qs.iter().any(|&q| QSide::of(&ctx.sys, q) == side) {
            if let Some(q) = ctx.scheme.claimed().into_iter().find(|&q| QSide::of(&ctx.sys, q) == side) {
                qs.push(q);
            }
        }
    }
    qs
}

pub fn check_car() -> Result<(bool, String)> {
    let modes = ModeSet::new((0..10).map(|i| Momentum::new(i % 3 - 1, i / 3 - 1, i / 9)))?;
    let dim = modes.dim();
    let id = SparseFockOperator::<i64>::identity(dim);
    let zero = SparseFockOperator::<i64>::zero(dim);
    let cr: Vec<_> = modes.modes().iter().map(|&q| creation(&modes, q)).collect::<Result<_>>()?;
    let an: Vec<_> = modes.modes().iter().map(|&q| annihilation(&modes, q)).collect::<Result<_>>()?;
    let mut bad = 0;
    for i in 0..modes.len() {
        bad += (cr[i].matmul(&cr[i]) != zero) as usize + (an[i].matmul(&an[i]) != zero) as usize;
        for j in 0..modes.len() {
            let want = if i == j { &id } else { &zero };
            bad += (&an[i].anticommutator(&cr[j]) != want) as usize;
            bad += (an[i].anticommutator(&an[j]) != zero) as usize;
        }
    }
    Ok((bad == 0, format!("{} modes, dim {dim}, {bad} violated relations", modes.len())))
}

pub fn check_brackets(seed: u64, opts: VerifyOptions) -> Result<(bool, String)> {
    let rule = if opts.sabotage_sign { SignRule::Sabotaged } else { SignRule::Full };
    let modes: Vec<Momentum> = (0..6).map(|i| Momentum::new(i, 0, 0)).collect();
    let ms = ModeSet::new(modes.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_f = 0.0f64;
    let mut disagree = 0;
    for _ in 0..100 {
        let a1 = random_operator(&mut rng, Statistics::Fermionic, 3, &modes, 3);
        let a2 = random_operator(&mut rng, Statistics::Fermionic, 3, &modes, 3);
        let leg_rule =
            if leg_parity(&a1, &a2).is_multiple_of(2) { Bracket::Commutator } else { Bracket::Anticommutator };
        disagree += (leg_rule != bracket_kind(&a1, &a2)) as usize;
        worst_f = worst_f.max(fermionic_bracket_residual(&a1, &a2, rule, &ms)?);
    }
    let boson_modes = &modes[..3];
    let space = BosonSpace::new(boson_modes.to_vec(), 8)?;
    let mut worst_b = 0.0f64;
    for _ in 0..25 {
        let a1 = random_operator(&mut rng, Statistics::Bosonic, 3, boson_modes, 3);
        let a2 = random_operator(&mut rng, Statistics::Bosonic, 3, boson_modes, 3);
        worst_b = worst_b.max(bosonic_bracket_residual(&a1, &a2, &space)?);
    }
    let passed = worst_f <= tol::BRACKET && worst_b <= tol::BRACKET;
    Ok((
        passed,
        format!(
            "100 fermionic pairs: max residual {worst_f:.2e}; 25 bosonic pairs: max relative residual {worst_b:.2e}; \
             {disagree} pairs where the leg-count parity picks the other bracket{}",
            if opts.sabotage_sign { "; sign rule sabotaged" } else { "" }
        ),
    ))
}

pub fn check_sign_fixture() -> Result<(bool, String)> {
    let cfg = ContractionConfig { pi: vec![2, 1], pi_prime: vec![1, 2] };
    let (sigma, sigma_prime) = crossing_permutations(3, 2, &cfg);
    let s = permutation_sign(&sigma_prime);
    let total = fermionic_sign_with(3, 2, &cfg, SignRule::Full);
    Ok((s == -1 && permutation_sign(&sigma) == 1, format!("config {cfg}: sgn(sigma') = {s}, total sign {total}")))
}

pub fn check_ccr(ctx: &SeriesContext) -> Result<(bool, String)> {
    let (sys, scheme) = (&ctx.sys, &ctx.scheme);
    let valid: Vec<_> = ctx.bundles.iter().flat_map(|b| b.labels.iter().map(move |&a| (a, b.k))).collect();
    let mut all = FermionOperator::zero();
    let mut c_star = Vec::new();
    for &(a, k) in &valid {
        let c = c_star_operator(scheme, sys, a, k)?;
        all = all.plus(&c);
        c_star.push(c);
    }
    let modes = ModeSet::of_operator(&all)?;
    let dim = modes.dim();
    let mats: Vec<_> = c_star.iter().map(|c| c.materialize(&modes)).collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for (i, &(a, k)) in valid.iter().enumerate() {
        let c = mats[i].transpose();
        for (j, &(b, l)) in valid.iter().enumerate() {
            let mut diff = c.commutator(&mats[j]);
            if a == b {
                if k == l {
                    diff = diff.sub(&SparseFockOperator::identity(dim));
                }
                diff = diff.sub(&ccr_error_operator(scheme, sys, a, k, l)?.materialize(&modes)?);
            }
            worst = worst.max(diff.max_abs());
        }
    }
    let n = valid.len();
    Ok((
        worst <= tol::CCR && n > 0,
        format!("{} (alpha, beta, k, l) combinations on {} modes, max residual {worst:.2e}", n * n, modes.len()),
    ))
}

pub fn check_exact_terms(ctx: &SeriesContext, qs: &[Momentum]) -> Result<(bool, String)> {
    let s = ctx.generator()?;
    let mut passed = !qs.is_empty();
    let mut worst = 0.0f64;
    let mut worst_odd = 0.0f64;
    let mut sides = Vec::new();
    for &q in qs {
        let oracle = FockOracle::new(&s, q)?;
        sides.push(QSide::of(&ctx.sys, q));
        for n in [2usize, 4] {
            let want = oracle.multicommutator_expectation(q, n)? / factorial(n as u64);
            let got = ctx.exact_term(n, q)?;
            let rel = if want == 0.0 { got.abs() } else { (got - want).abs() / want.abs() };
            worst = worst.max(rel);
        }
        for n in [1usize, 3] {
            worst_odd = worst_odd.max(oracle.multicommutator_expectation(q, n)?.abs());
        }
    }
    passed &= worst <= tol::ORACLE_RELATIVE && worst_odd < tol::ODD_ORDER;
    passed &= sides.contains(&QSide::Outside) && sides.contains(&QSide::Inside);
    Ok((
        passed,
        format!("{} momenta, n = 2, 4: max relative deviation {worst:.2e}; odd orders max {worst_odd:.2e}", qs.len()),
    ))
}

pub fn check_bosonized(ctx: &SeriesContext, qs: &[Momentum]) -> Result<(bool, String)> {
    const N_MAX: usize = 8;
    let mut passed = !qs.is_empty();
    let mut worst = 0.0f64;
    let mut worst_tail_excess = f64::NEG_INFINITY;
    let mut counts_ok = true;
    let mut negative = 0;
    for &q in qs {
        let mut partial = Vec::new();
        for n in (2..=N_MAX).step_by(2) {
            let r = ctx.bosonized_report(n, q)?;
            partial.push(r.value);
            negative += r.counts.negative_signs;
            if n <= 4 {
                counts_ok &= r.counts.bosonized == 1 << (2 * n - 1);
            }
            if n <= 6 {
                let f = ctx.bosonized_formula_term(n, q);
                let rel = if f == 0.0 { r.value.abs() } else { (r.value - f).abs() / f.abs() };
                worst = worst.max(rel);
            }
        }
        let sum = crate::numeric::pairwise_sum(&partial);
        let gap = (ctx.nq_bosonized_closed(q) - sum).abs();
        worst_tail_excess = worst_tail_excess.max(gap - ctx.bosonized_tail(q, N_MAX) - 1e-15);
    }
    passed &= worst <= tol::BOSONIZED_FORMULA && worst_tail_excess <= 0.0 && counts_ok && negative == 0;
    Ok((
        passed,
        format!(
            "max relative deviation from the trace formula (n <= 6) {worst:.2e}; closed form minus partial sum (n <= {N_MAX}) \
             exceeds the tail by {worst_tail_excess:.2e}; counts {}; {negative} negative signs",
            if counts_ok { "8 and 128" } else { "wrong" }
        ),
    ))
}

pub fn check_envelope(ctx: &SeriesContext, qs: &[Momentum], seed: u64) -> Result<(bool, String)> {
    let b = ctx.s_norm_bound();
    let tail = exp_tail(b, 4);
    let s = ctx.generator()?;
    let mut passed = !qs.is_empty();
    let mut worst_gap = 0.0f64;
    let mut worst_norm = 0.0f64;
    for &q in qs {
        let oracle = FockOracle::new(&s, q)?;
        let exact = oracle.exact_nq(q)?;
        let series = ctx.exact_term(2, q)? + ctx.exact_term(4, q)?;
        worst_gap = worst_gap.max((exact - series).abs());
        worst_norm = worst_norm.max(2.0 * oracle.s_norm(seed));
    }
    passed &= worst_gap <= tail && worst_norm <= b;
    Ok((
        passed,
        format!("B = {b:.6}; |oracle - series(n <= 4)| = {worst_gap:.3e} <= tail {tail:.3e}; 2||S|| = {worst_norm:.6}"),
    ))
}

pub fn check_c_star_norms(ctx: &SeriesContext, seed: u64) -> Result<(bool, String)> {
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for b in &ctx.bundles {
        for &a in &b.labels {
            let c = c_star_operator(&ctx.scheme, &ctx.sys, a, b.k)?;
            let modes = ModeSet::of_operator(&c)?;
            let norm = c.materialize(&modes)?.op_norm(seed);
            worst = worst.max(norm - b.n_of(a).unwrap());
            count += 1;
        }
    }
    Ok((count > 0 && worst <= tol::NORM, format!("{count} pair creators, max ||c*|| - n = {worst:.2e}")))
}

pub fn check_zero_potential(config: &RunConfig) -> Result<(bool, String)> {
    let cfg = RunConfig { potential: PotentialSpec::Preset("zero".into()), n_max: None, ..config.clone() };
    let system = System::build(&cfg)?;
    let ctx = &system.context;
    let b_zero = ctx.bundles.iter().all(|b| b.b.iter().all(|&x| x == 0.0));
    let k_zero = ctx.bundles.iter().all(|b| b.k_matrix.iter().all(|&x| x == 0.0));
    let s_zero = ctx.generator()?.is_empty();
    let mut qs = system.q_values();
    qs.extend(ctx.scheme.claimed());
    let mut nonzero = 0;
    for &q in &qs {
        for method in Method::ALL {
            let r = ctx.nq(q, method, cfg.order_for(method), cfg.series_options())?;
            nonzero += (r.value != 0.0) as usize;
        }
    }
    Ok((
        b_zero && k_zero && s_zero && nonzero == 0,
        format!(
            "b = 0: {b_zero}, K = 0: {k_zero}, S = 0: {s_zero}; {nonzero} nonzero n_q over {} momenta and 4 methods",
            qs.len()
        ),
    ))
}

/// `n_q` records for every requested momentum and method, in request order.
pub fn nq_records(system: &System, methods: &[Method]) -> Result<Vec<NqResult>> {
    let mut out = Vec::new();
    let opts = system.config.series_options();
    for q in system.q_values() {
        for &m in methods {
            out.push(system.context.nq(q, m, system.config.order_for(m), opts)?);
        }
    }
    Ok(out)
}

pub fn check_determinism(config: &RunConfig) -> Result<(bool, String)> {
    let cfg = RunConfig { n_max: Some(4), ..config.clone() };
    let methods = if cfg.methods.is_empty() { Method::ALL.to_vec() } else { cfg.methods.clone() };
    let run = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        pool.install(|| {
            let system = System::build(&cfg)?;
            Ok(serde_json::to_string(&nq_records(&system, &methods)?)?)
        })
    };
    let one = run(1)?;
    let eight = run(8)?;
    Ok((one == eight, format!("{} bytes of n_q records (orders <= 4), identical: {}", one.len(), one == eight)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        assert!(check_car().unwrap().0);
        assert!(check_brackets(17, VerifyOptions::default()).unwrap().0);
        assert!(check_sign_fixture().unwrap().0);
        assert!(check_zero_potential(&RunConfig::toy()).unwrap().0);
    }

    #[test]
    fn sabotage_fails_the_bracket_check() {
        let (passed, detail) = check_brackets(17, VerifyOptions { sabotage_sign: true }).unwrap();
        assert!(!passed, "{detail}");
    }
}
