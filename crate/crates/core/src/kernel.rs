//! Interaction table and the per-transfer matrix pipeline producing `K(k)`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{FermiSystem, Momentum};
use crate::patches::{IndexSets, PatchId, PatchScheme};

/// Relative floor on eigenvalues before taking square roots or logarithms.
pub const SPD_TOLERANCE: f64 = 1e-12;

/// Fourier coefficients `V(k)` of a real, even pair potential.
///
/// Entries missing from the table fall back to `default`, which is how the
/// constant preset is represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    table: BTreeMap<Momentum, f64>,
    default: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialEntry {
    pub k: Momentum,
    pub v_hat: f64,
}

impl Potential {
    pub fn zero() -> Self {
        Potential { table: BTreeMap::new(), default: 0.0 }
    }

    pub fn constant(v: f64) -> Self {
        Potential { table: BTreeMap::new(), default: v }
    }

    /// Builds a potential from explicit entries. Each entry also fixes the
    /// value at `-k`; conflicting values are rejected.
    pub fn from_entries(entries: &[PotentialEntry]) -> Result<Self> {
        let mut table = BTreeMap::new();
        for e in entries {
            if !e.v_hat.is_finite() {
                return Err(Error::InvalidParameter {
                    field: "potential",
                    reason: format!("non-finite coefficient at {}", e.k),
                });
            }
            for key in [e.k, -e.k] {
                if let Some(&old) = table.get(&key) {
                    if old != e.v_hat {
                        return Err(Error::InvalidParameter {
                            field: "potential",
                            reason: format!("V({}) given twice with different values (must be even)", e.k),
                        });
                    }
                }
                table.insert(key, e.v_hat);
            }
        }
        Ok(Potential { table, default: 0.0 })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let entries: Vec<PotentialEntry> = serde_json::from_str(s)?;
        Self::from_entries(&entries)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn value(&self, k: Momentum) -> f64 {
        self.table.get(&k).copied().unwrap_or(self.default)
    }

    /// Largest `|k|` with a nonzero table entry; infinite for a nonzero
    /// constant.
    pub fn support_radius(&self) -> f64 {
        if self.default != 0.0 {
            return f64::INFINITY;
        }
        self.table.iter().filter(|(_, &v)| v != 0.0).map(|(k, _)| k.norm()).fold(0.0, f64::max)
    }

    /// Copy with every coefficient multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Potential { table: self.table.iter().map(|(&k, &v)| (k, s * v)).collect(), default: s * self.default }
    }
}

/// All matrices of the pipeline for one transfer `k`.
///
/// Rows and columns are labelled by `labels`: the plus block of the
/// (pruned) index sets first, then the minus block.
#[derive(Clone, Debug)]
pub struct KMatrixBundle {
    pub k: Momentum,
    pub sets: IndexSets,
    pub half_dim: usize,
    pub labels: Vec<PatchId>,
    /// `n_{alpha,k}^2` for every label.
    pub pair_counts: Vec<u64>,
    pub d: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub big_d: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w_tilde: DMatrix<f64>,
    pub s1: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub k_matrix: DMatrix<f64>,
}

impl KMatrixBundle {
    pub fn index_of(&self, alpha: PatchId) -> Option<usize> {
        self.labels.iter().position(|&a| a == alpha)
    }

    /// `n_{alpha,k}` for a label of this bundle.
    pub fn n_of(&self, alpha: PatchId) -> Option<f64> {
        self.index_of(alpha).map(|i| (self.pair_counts[i] as f64).sqrt())
    }

    /// `K(k)_{alpha,beta}`, zero when either label is inactive.
    pub fn k_entry(&self, alpha: PatchId, beta: PatchId) -> f64 {
        match (self.index_of(alpha), self.index_of(beta)) {
            (Some(i), Some(j)) => self.k_matrix[(i, j)],
            _ => 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn build(sys: &FermiSystem, scheme: &PatchScheme, k: Momentum, potential: &Potential) -> Result<Self> {
        let (sets, d, b) = build_db(sys, scheme, k, potential)?;
        let counts = pair_counts(sys, scheme, &sets);
        build_k(k, sets, counts, d, b)
    }

    /// Bundle with a caller-supplied symmetric `K`, bypassing the square-root
    /// pipeline (useful for potentials where it is undefined).
    pub fn with_k_matrix(sys: &FermiSystem, scheme: &PatchScheme, k: Momentum, k_matrix: DMatrix<f64>) -> Result<Self> {
        let sets = scheme.active_index_sets(sys, k);
        if sets.is_empty() {
            return Err(Error::NoActivePatches(k));
        }
        let dim = 2 * sets.plus.len();
        if k_matrix.nrows() != dim || k_matrix.ncols() != dim {
            return Err(Error::InvalidParameter {
                field: "k_matrix",
                reason: format!("expected {dim}x{dim}, got {}x{}", k_matrix.nrows(), k_matrix.ncols()),
            });
        }
        if (&k_matrix - k_matrix.transpose()).amax() > 1e-10 {
            return Err(Error::InvalidParameter { field: "k_matrix", reason: "must be symmetric".into() });
        }
        let counts = pair_counts(sys, scheme, &sets);
        let m = sets.plus.len();
        let d = cosine_diag(scheme, k, &sets);
        let zero = DMatrix::zeros(m, m);
        let mut bundle = build_k(k, sets, counts, d, zero)?;
        bundle.k_matrix = k_matrix;
        Ok(bundle)
    }

    /// `cosh(2K) - 1`, computed spectrally as `2 sinh^2` of the eigenvalues.
    pub fn cosh_2k_minus_identity(&self) -> DMatrix<f64> {
        cosh_2k_minus_identity(&self.k_matrix)
    }

    pub fn summary(&self) -> KBundleSummary {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        KBundleSummary {
            k: self.k,
            labels: self.labels.clone(),
            pair_counts: self.pair_counts.clone(),
            d: self.d.diagonal().iter().copied().collect(),
            b: rows(&self.b),
            k_matrix: rows(&self.k_matrix),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KBundleSummary {
    pub k: Momentum,
    pub labels: Vec<PatchId>,
    pub pair_counts: Vec<u64>,
    pub d: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub k_matrix: Vec<Vec<f64>>,
}

fn pair_counts(sys: &FermiSystem, scheme: &PatchScheme, sets: &IndexSets) -> Vec<u64> {
    sets.labels().iter().map(|&a| scheme.pair_count(sys, a, sets.k).map(|c| c.n_squared).unwrap_or(0)).collect()
}

fn cosine_diag(scheme: &PatchScheme, k: Momentum, sets: &IndexSets) -> DMatrix<f64> {
    let kn = k.norm();
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        sets.plus.len(),
        sets.plus.iter().map(|&a| (k.dot(scheme.patch(a).unit_center) / kn).abs()),
    ))
}

/// The kinetic cosines `d` and the rank-one interaction block `b` over the
/// pruned plus block of `I_k`.
pub fn build_db(
    sys: &FermiSystem,
    scheme: &PatchScheme,
    k: Momentum,
    potential: &Potential,
) -> Result<(IndexSets, DMatrix<f64>, DMatrix<f64>)> {
    let sets = scheme.active_index_sets(sys, k);
    if sets.is_empty() {
        return Err(Error::NoActivePatches(k));
    }
    let d = cosine_diag(scheme, k, &sets);
    let n: Vec<f64> = sets.plus.iter().map(|&a| scheme.pair_count(sys, a, k).map(|c| c.n)).collect::<Result<_>>()?;
    let v = potential.value(k);
    let prefactor = v / (2.0 * sys.hbar * sys.kappa * sys.particle_count as f64 * k.norm());
    let m = sets.plus.len();
    let b = if v == 0.0 { DMatrix::zeros(m, m) } else { DMatrix::from_fn(m, m, |i, j| prefactor * n[i] * n[j]) };
    Ok((sets, d, b))
}

fn block_diag(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let mut out = DMatrix::zeros(2 * m, 2 * m);
    out.view_mut((0, 0), (m, m)).copy_from(a);
    out.view_mut((m, m), (m, m)).copy_from(a);
    out
}

fn block_offdiag(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let mut out = DMatrix::zeros(2 * m, 2 * m);
    out.view_mut((0, m), (m, m)).copy_from(a);
    out.view_mut((m, 0), (m, m)).copy_from(a);
    out
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `V f(Lambda) V^T` for a symmetric matrix.
pub fn spectral_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let fl = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&fl) * eig.eigenvectors.transpose()
}

fn check_spd(a: &DMatrix<f64>, name: &'static str, k: Momentum) -> Result<()> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !(min > SPD_TOLERANCE * max) {
        return Err(Error::NotPositiveDefinite { name, k, min_eigenvalue: min, max_eigenvalue: max });
    }
    Ok(())
}

fn spd_sqrt(a: &DMatrix<f64>, name: &'static str, k: Momentum) -> Result<DMatrix<f64>> {
    check_spd(a, name, k)?;
    Ok(symmetrize(&spectral_apply(a, f64::sqrt)))
}

/// Runs the square-root/logarithm pipeline on `(d, b)`.
pub fn build_k(
    k: Momentum,
    sets: IndexSets,
    pair_counts: Vec<u64>,
    d: DMatrix<f64>,
    b: DMatrix<f64>,
) -> Result<KMatrixBundle> {
    let m = d.nrows();
    let big_d = block_diag(&d);
    let w = block_diag(&b);
    let w_tilde = block_offdiag(&b);
    let dim = 2 * m;

    if b.iter().all(|&x| x == 0.0) {
        // closed form: every block is diagonal and the pipeline is the identity
        check_spd(&big_d, "D", k)?;
        return Ok(KMatrixBundle {
            k,
            half_dim: m,
            labels: sets.labels(),
            sets,
            pair_counts,
            d,
            b,
            e: big_d.clone(),
            big_d,
            w,
            w_tilde,
            s1: DMatrix::identity(dim, dim),
            k_matrix: DMatrix::zeros(dim, dim),
        });
    }

    let minus = &big_d + &w - &w_tilde;
    let plus = &big_d + &w + &w_tilde;
    let minus_sqrt = spd_sqrt(&minus, "D + W - W~", k)?;
    check_spd(&plus, "D + W + W~", k)?;
    let inner = &minus_sqrt * &plus * &minus_sqrt;
    let e = spd_sqrt(&inner, "E^2", k)?;
    check_spd(&e, "E", k)?;
    let e_inv_sqrt = symmetrize(&spectral_apply(&e, |x| 1.0 / x.sqrt()));
    let s1 = &minus_sqrt * e_inv_sqrt;
    // log |S1^T| = log (S1^T S1)^(1/2)
    let gram = s1.transpose() * &s1;
    check_spd(&gram, "S1^T S1", k)?;
    let k_matrix = symmetrize(&spectral_apply(&gram, |x| 0.5 * x.ln()));

    Ok(KMatrixBundle {
        k,
        half_dim: m,
        labels: sets.labels(),
        sets,
        pair_counts,
        d,
        b,
        big_d,
        w,
        w_tilde,
        s1,
        e,
        k_matrix,
    })
}

pub fn cosh_2k_minus_identity(k: &DMatrix<f64>) -> DMatrix<f64> {
    if k.iter().all(|&x| x == 0.0) {
        return DMatrix::zeros(k.nrows(), k.ncols());
    }
    symmetrize(&spectral_apply(k, |x| 2.0 * x.sinh().powi(2)))
}

/// Bundles for every transfer with at least one active patch, in transfer
/// order. Transfers without active patches are skipped.
pub fn build_all(sys: &FermiSystem, scheme: &PatchScheme, potential: &Potential) -> Result<Vec<KMatrixBundle>> {
    let transfers = sys.transfer_set();
    let built: Vec<Result<Option<KMatrixBundle>>> = transfers
        .par_iter()
        .map(|&k| match KMatrixBundle::build(sys, scheme, k, potential) {
            Ok(b) => Ok(Some(b)),
            Err(Error::NoActivePatches(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut out = Vec::new();
    for b in built {
        if let Some(b) = b? {
            out.push(b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::factorial;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (FermiSystem, PatchScheme) {
        let sys = FermiSystem::new(1.0, 1.0).unwrap();
        let scheme = PatchScheme::build(&sys, 6, 1.0 / 12.0, 1.1).unwrap();
        (sys, scheme)
    }

    fn dummy_sets(m: usize) -> IndexSets {
        IndexSets {
            k: Momentum::new(0, 0, 1),
            plus: (0..m).map(PatchId).collect(),
            minus: (m..2 * m).map(PatchId).collect(),
        }
    }

    fn random_db(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(m, |_, _| rng.gen_range(0.2..1.0)));
        let v = nalgebra::DVector::from_fn(m, |_, _| rng.gen_range(0.5..2.0));
        let b = &v * v.transpose() * scale;
        (d, b)
    }

    #[test]
    fn potential_table_is_even() {
        let p = Potential::from_json_str(r#"[{"k":[0,0,1],"v_hat":2.5},{"k":[1,0,0],"v_hat":-1.0}]"#).unwrap();
        assert_eq!(p.value(Momentum::new(0, 0, 1)), 2.5);
        assert_eq!(p.value(Momentum::new(0, 0, -1)), 2.5);
        assert_eq!(p.value(Momentum::new(0, 1, 0)), 0.0);
        assert_eq!(p.support_radius(), 1.0);
        let clash = r#"[{"k":[0,0,1],"v_hat":1.0},{"k":[0,0,-1],"v_hat":2.0}]"#;
        assert!(Potential::from_json_str(clash).is_err());
        assert!(Potential::from_json_str("not json").is_err());
        assert_eq!(Potential::constant(3.0).value(Momentum::new(5, 1, 2)), 3.0);
    }

    #[test]
    fn zero_potential_gives_zero_b_and_k() {
        let (sys, scheme) = toy();
        for k in sys.transfer_set() {
            let bundle = KMatrixBundle::build(&sys, &scheme, k, &Potential::zero()).unwrap();
            assert!(bundle.b.iter().all(|&x| x == 0.0));
            assert!(bundle.k_matrix.iter().all(|&x| x == 0.0));
            assert_eq!(bundle.s1, DMatrix::identity(bundle.dim(), bundle.dim()));
            assert_eq!(bundle.e, bundle.big_d);
            assert!(bundle.cosh_2k_minus_identity().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn d_entries_are_cosines() {
        let sys = FermiSystem::new(2.3, 1.8).unwrap();
        let scheme = PatchScheme::build(&sys, 8, 0.1, 1.2).unwrap();
        for k in sys.transfer_set() {
            let Ok((sets, d, _)) = build_db(&sys, &scheme, k, &Potential::constant(1.0)) else { continue };
            for (i, &a) in sets.plus.iter().enumerate() {
                let c = d[(i, i)];
                assert!(c > 0.0 && c <= 1.0 + 1e-15);
                let direct = k.dot(scheme.patch(a).unit_center) / k.norm();
                assert!((c - direct.abs()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn b_matches_scalar_formula() {
        let sys = FermiSystem::new(1.415, 1.5).unwrap();
        let scheme = PatchScheme::build(&sys, 6, 1.0 / 12.0, 1.1).unwrap();
        let v = 1.7;
        for k in sys.transfer_set() {
            let Ok((sets, _, b)) = build_db(&sys, &scheme, k, &Potential::constant(v)) else { continue };
            // independent recount of n_alpha by scanning the claimed points
            let count = |a: PatchId| -> f64 {
                let s = sets.sign(a).unwrap();
                let mut c = 0u64;
                for h in scheme.claimed() {
                    let p = h + s * k;
                    if sys.in_fermi_ball(h)
                        && !sys.in_fermi_ball(p)
                        && scheme.patch_of(h) == Some(a)
                        && scheme.patch_of(p) == Some(a)
                    {
                        c += 1;
                    }
                }
                (c as f64).sqrt()
            };
            let n = sys.particle_count as f64;
            let hbar = n.powf(-1.0 / 3.0);
            let kappa = 1.415 * hbar;
            let pref = v / (2.0 * hbar * kappa * n * k.norm());
            for (i, &a) in sets.plus.iter().enumerate() {
                for (j, &c) in sets.plus.iter().enumerate() {
                    let expected = pref * count(a) * count(c);
                    assert!((b[(i, j)] - expected).abs() < 1e-12 * expected.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn no_active_patches_is_reported() {
        let sys = FermiSystem::new(1.0, 1.0).unwrap();
        // hemispheres: the transfer (1,0,0) is orthogonal to both centers
        let scheme = PatchScheme::build(&sys, 2, 0.1, 1.1).unwrap();
        let err = build_db(&sys, &scheme, Momentum::new(1, 0, 0), &Potential::constant(1.0));
        assert!(matches!(err, Err(Error::NoActivePatches(_))));
        let all = build_all(&sys, &scheme, &Potential::constant(1.0)).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].k, Momentum::new(0, 0, 1));
    }

    #[test]
    fn two_patch_closed_form() {
        // one plus and one minus patch with d = 1: K is off-diagonal with
        // entries -log(1 + 2b)/4
        for b in [0.1, 0.8, 2.0] {
            let d = DMatrix::from_element(1, 1, 1.0);
            let bm = DMatrix::from_element(1, 1, b);
            let bundle = build_k(Momentum::new(0, 0, 1), dummy_sets(1), vec![1, 1], d, bm).unwrap();
            let expected = -(1.0 + 2.0 * b).ln() / 4.0;
            assert!(bundle.k_matrix[(0, 0)].abs() < 1e-14);
            assert!(bundle.k_matrix[(1, 1)].abs() < 1e-14);
            assert!((bundle.k_matrix[(0, 1)] - expected).abs() < 1e-14);
            assert!((bundle.k_matrix[(1, 0)] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn k_is_symmetric_and_block_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = rng.gen_range(1..6);
            let scale = rng.gen_range(0.01..1.0);
            let (d, b) = random_db(&mut rng, m, scale);
            let bundle = build_k(Momentum::new(0, 0, 1), dummy_sets(m), vec![1; 2 * m], d, b).unwrap();
            let k = &bundle.k_matrix;
            assert!((k - k.transpose()).amax() < 1e-10);
            let swap = block_offdiag(&DMatrix::identity(m, m));
            assert!((&swap * k - k * &swap).amax() < 1e-9);
            // E recomputed from its definition
            let minus = &bundle.big_d + &bundle.w - &bundle.w_tilde;
            let plus = &bundle.big_d + &bundle.w + &bundle.w_tilde;
            let r = spectral_apply(&minus, f64::sqrt);
            let e = spectral_apply(&(&r * plus * &r), f64::sqrt);
            assert!((e - &bundle.e).amax() < 1e-9);
        }
    }

    #[test]
    fn first_order_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let m = rng.gen_range(1..5);
            let (d, b0) = random_db(&mut rng, m, 1.0);
            let run = |eps: f64| {
                build_k(Momentum::new(0, 0, 1), dummy_sets(m), vec![1; 2 * m], d.clone(), &b0 * eps).unwrap().k_matrix
            };
            // derivative from a wider central difference, checked at a small step
            let h = 1e-5;
            let deriv = (run(h) - run(-h).clone()) / (2.0 * h);
            let eps = 1e-7;
            let err = (run(eps) - &deriv * eps).amax();
            assert!(err < 1e-4 * eps * deriv.amax(), "{err}");
        }
    }

    #[test]
    fn negative_potential_can_break_positivity() {
        let d = DMatrix::from_element(1, 1, 0.3);
        let b = DMatrix::from_element(1, 1, -0.4);
        let err = build_k(Momentum::new(0, 0, 1), dummy_sets(1), vec![1, 1], d, b).unwrap_err();
        match err {
            Error::NotPositiveDefinite { min_eigenvalue, .. } => assert!(min_eigenvalue < 0.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn cosh_matches_even_taylor_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = rng.gen_range(2..7);
            let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
            let mut k = symmetrize(&a);
            let norm = SymmetricEigen::new(k.clone()).eigenvalues.amax();
            k /= norm; // spectral norm 1
            let exact = cosh_2k_minus_identity(&k);
            let two_k = &k * 2.0;
            let mut power = DMatrix::identity(m, m);
            let mut taylor = DMatrix::zeros(m, m);
            for n in 1..=20u64 {
                power = &power * &two_k;
                if n % 2 == 0 {
                    taylor += &power / factorial(n);
                }
            }
            // the N_max = 20 remainder is about 2^22/22! < 4e-15
            assert!((exact.clone() - taylor).amax() < 1e-10);
            for i in 0..m {
                assert!(exact[(i, i)] >= 0.0);
            }
        }
    }
}
