//! Small numeric helpers shared across modules.

/// Compensated sum in a fixed pairwise reduction order.
///
/// The reduction tree depends only on `xs.len()`, so the result does not
/// depend on how the inputs were produced (serially or in parallel).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return neumaier_sum(xs);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Neumaier (improved Kahan) summation.
pub fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Deterministic dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prods)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

pub fn factorial(n: u64) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

pub fn factorial_u128(n: u64) -> u128 {
    (1..=n as u128).product()
}

/// `sum_{j > n} b^j / j!`, the tail of the exponential series.
pub fn exp_tail(b: f64, n: usize) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    let mut term = 1.0f64;
    for j in 1..=n {
        term *= b / j as f64;
    }
    let mut tail = Vec::new();
    let mut j = n;
    loop {
        j += 1;
        term *= b / j as f64;
        tail.push(term);
        if term < 1e-300 || (j > n + 10 && term < 1e-18 * tail[0]) {
            break;
        }
    }
    pairwise_sum(&tail)
}

/// Parity of a permutation given as images `perm[i]` of `0..len`.
pub fn permutation_sign(perm: &[usize]) -> i32 {
    let mut seen = vec![false; perm.len()];
    let mut sign = 1;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = perm[i];
            len += 1;
        }
        if len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

/// Calls `f` with every permutation of `0..n` in lexicographic order.
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        f(&perm);
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else { return };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
        perm.swap(i - 1, j);
        perm[i..].reverse();
    }
}

/// Advances `perm` to the next lexicographic permutation; false after the last.
pub fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else { return false };
    let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// The `rank`-th permutation of `0..n` in lexicographic order.
pub fn nth_permutation(n: usize, mut rank: u128) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let f = factorial_u128(i as u64);
        let idx = (rank / f) as usize;
        rank %= f;
        out.push(pool.remove(idx));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sums() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(&xs), 2.0);
        let many: Vec<f64> = (0..1000).map(|i| (i as f64) * 0.1).collect();
        assert!((pairwise_sum(&many) - 49950.0).abs() < 1e-9);
    }

    #[test]
    fn binomials_and_factorials() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(factorial(5), 120.0);
        assert_eq!(factorial_u128(20), 2432902008176640000);
    }

    #[test]
    fn exp_tail_matches_direct_sum() {
        let b: f64 = 1.7;
        let head: f64 = (0..=4).map(|j| b.powi(j) / factorial(j as u64)).sum();
        assert!((exp_tail(b, 4) - (b.exp() - head)).abs() < 1e-12);
        assert_eq!(exp_tail(0.0, 4), 0.0);
    }

    #[test]
    fn permutation_tools() {
        assert_eq!(permutation_sign(&[0, 1, 2]), 1);
        assert_eq!(permutation_sign(&[2, 1, 0]), -1);
        assert_eq!(permutation_sign(&[1, 2, 0]), 1);
        let mut count = 0;
        let mut sign_sum = 0;
        for_each_permutation(4, |p| {
            assert_eq!(p.to_vec(), nth_permutation(4, count as u128));
            count += 1;
            sign_sum += permutation_sign(p);
        });
        assert_eq!(count, 24);
        let mut p = nth_permutation(4, 5);
        assert!(next_permutation(&mut p));
        assert_eq!(p, nth_permutation(4, 6));
        let mut last = vec![3, 2, 1, 0];
        assert!(!next_permutation(&mut last));
        assert_eq!(sign_sum, 0);
        let mut zero = 0;
        for_each_permutation(0, |_| zero += 1);
        assert_eq!(zero, 1);
    }
}
