//! Patch decomposition of a shell around the Fermi surface.
//!
//! Patches are the Voronoi cells (in direction space) of an antipodally
//! symmetric set of unit centers, restricted to the lattice points of the
//! shell `k_F - t <= |k| <= k_F + t`. The origin is never claimed. Points
//! equidistant from several centers go to the smallest id when they lie in the
//! northern half space, and to the antipode of the assignment of `-k`
//! otherwise, so the whole construction commutes with `k -> -k`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{in_northern_half, lattice_ball, FermiSystem, Momentum};

const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchId(pub usize);

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // one-based, as patches are usually numbered 1..M
        write!(f, "B{}", self.0 + 1)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Patch {
    pub id: PatchId,
    /// Center on the Fermi surface, `k_F * unit_center`.
    pub center: [f64; 3],
    pub unit_center: [f64; 3],
    /// Claimed lattice points inside the Fermi ball, in lattice order.
    pub holes: Vec<Momentum>,
    /// Claimed lattice points outside the Fermi ball, in lattice order.
    pub particles: Vec<Momentum>,
}

impl Patch {
    pub fn contains(&self, k: Momentum) -> bool {
        self.holes.binary_search(&k).is_ok() || self.particles.binary_search(&k).is_ok()
    }
}

/// Role of a claimed lattice point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Occupancy {
    Hole,
    Particle,
}

#[derive(Clone, Debug)]
pub struct PatchScheme {
    pub patches: Vec<Patch>,
    pub m: usize,
    pub delta: f64,
    pub shell_thickness: f64,
    /// `N^(-delta)`, the cutoff on `k . w_alpha` in the index sets.
    pub threshold: f64,
    claims: HashMap<Momentum, (PatchId, Occupancy)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSets {
    pub k: Momentum,
    /// Patches with `k . w >= N^-delta`, ordered by id.
    pub plus: Vec<PatchId>,
    /// Antipodes of `plus`, in the same order.
    pub minus: Vec<PatchId>,
}

impl IndexSets {
    pub fn contains(&self, alpha: PatchId) -> bool {
        self.plus.contains(&alpha) || self.minus.contains(&alpha)
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty()
    }

    /// Labels in block order: the plus block first, then the minus block.
    pub fn labels(&self) -> Vec<PatchId> {
        self.plus.iter().chain(self.minus.iter()).copied().collect()
    }

    /// `+1` for the plus block, `-1` for the minus block.
    pub fn sign(&self, alpha: PatchId) -> Option<i32> {
        if self.plus.contains(&alpha) {
            Some(1)
        } else if self.minus.contains(&alpha) {
            Some(-1)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairCount {
    pub alpha: PatchId,
    pub k: Momentum,
    pub n_squared: u64,
    pub n: f64,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / r, v[1] / r, v[2] / r]
}

/// Unit centers of the northern half of the scheme; the southern half is the
/// mirror image.
fn northern_centers(m: usize) -> Vec<[f64; 3]> {
    match m {
        2 => vec![[0.0, 0.0, 1.0]],
        6 => vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        _ => {
            // equal-area zonal spiral on the upper hemisphere
            let h = m / 2;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..h)
                .map(|i| {
                    let z = 1.0 - (i as f64 + 0.5) / h as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    unit([r * phi.cos(), r * phi.sin(), z])
                })
                .collect()
        }
    }
}

impl PatchScheme {
    pub fn build(sys: &FermiSystem, m: usize, delta: f64, shell_thickness: f64) -> Result<Self> {
        if m == 0 || !m.is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                field: "m",
                reason: format!("patch count must be a positive even integer, got {m}"),
            });
        }
        if !(delta > 0.0 && delta < 1.0 / 6.0) {
            return Err(Error::InvalidParameter {
                field: "delta",
                reason: format!("must lie in (0, 1/6), got {delta}"),
            });
        }
        if !(shell_thickness > 0.0) || !shell_thickness.is_finite() {
            return Err(Error::InvalidParameter {
                field: "shell_thickness",
                reason: format!("must be a finite positive number, got {shell_thickness}"),
            });
        }

        let north = northern_centers(m);
        let unit_centers: Vec<[f64; 3]> =
            north.iter().copied().chain(north.iter().map(|c| [-c[0], -c[1], -c[2]])).collect();

        let mut patches: Vec<Patch> = unit_centers
            .iter()
            .enumerate()
            .map(|(i, &u)| Patch {
                id: PatchId(i),
                center: [sys.fermi_momentum * u[0], sys.fermi_momentum * u[1], sys.fermi_momentum * u[2]],
                unit_center: u,
                holes: Vec::new(),
                particles: Vec::new(),
            })
            .collect();

        let kf = sys.fermi_momentum;
        let inner = kf - shell_thickness;
        let mut claims = HashMap::new();
        let scheme_stub = Assigner { centers: &unit_centers, m };
        for k in lattice_ball(kf + shell_thickness) {
            if k.is_zero() {
                continue;
            }
            if inner > 0.0 && k.norm() < inner * (1.0 - 1e-12) {
                continue;
            }
            let alpha = scheme_stub.assign(k);
            let occ = if sys.in_fermi_ball(k) {
                patches[alpha.0].holes.push(k);
                Occupancy::Hole
            } else {
                patches[alpha.0].particles.push(k);
                Occupancy::Particle
            };
            claims.insert(k, (alpha, occ));
        }

        Ok(PatchScheme {
            patches,
            m,
            delta,
            shell_thickness,
            threshold: (sys.particle_count as f64).powf(-delta),
            claims,
        })
    }

    pub fn antipode(&self, alpha: PatchId) -> PatchId {
        PatchId((alpha.0 + self.m / 2) % self.m)
    }

    pub fn patch(&self, alpha: PatchId) -> &Patch {
        &self.patches[alpha.0]
    }

    /// The patch claiming `k`, if any.
    pub fn patch_of(&self, k: Momentum) -> Option<PatchId> {
        self.claims.get(&k).map(|&(a, _)| a)
    }

    /// `k` is a particle (outside the Fermi ball) claimed by `alpha`.
    pub fn is_particle_in(&self, k: Momentum, alpha: PatchId) -> bool {
        matches!(self.claims.get(&k), Some(&(a, Occupancy::Particle)) if a == alpha)
    }

    /// `k` is a hole (inside the Fermi ball) claimed by `alpha`.
    pub fn is_hole_in(&self, k: Momentum, alpha: PatchId) -> bool {
        matches!(self.claims.get(&k), Some(&(a, Occupancy::Hole)) if a == alpha)
    }

    /// All claimed lattice points, in lattice order.
    pub fn claimed(&self) -> Vec<Momentum> {
        let mut v: Vec<Momentum> = self.claims.keys().copied().collect();
        v.sort();
        v
    }

    pub fn index_sets(&self, k: Momentum) -> IndexSets {
        let thr = self.threshold - TIE_TOLERANCE;
        let plus: Vec<PatchId> = self.patches.iter().filter(|p| k.dot(p.unit_center) >= thr).map(|p| p.id).collect();
        let minus: Vec<PatchId> = plus.iter().map(|&a| self.antipode(a)).collect();
        debug_assert!(minus.iter().all(|&a| k.dot(self.patch(a).unit_center) <= -thr));
        IndexSets { k, plus, minus }
    }

    /// Index sets with patches of vanishing pair count removed (together with
    /// their antipodes).
    pub fn active_index_sets(&self, sys: &FermiSystem, k: Momentum) -> IndexSets {
        let raw = self.index_sets(k);
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for (&a, &b) in raw.plus.iter().zip(raw.minus.iter()) {
            let na = self.pair_list_signed(sys, a, k, 1).len();
            let nb = self.pair_list_signed(sys, b, k, -1).len();
            if na > 0 && nb > 0 {
                plus.push(a);
                minus.push(b);
            }
        }
        IndexSets { k, plus, minus }
    }

    pub fn signed_transfer(&self, alpha: PatchId, k: Momentum, sets: &IndexSets) -> Result<Momentum> {
        match sets.sign(alpha) {
            Some(1) => Ok(k),
            Some(_) => Ok(-k),
            None => Err(Error::PatchNotInIndexSet { alpha, k }),
        }
    }

    fn pair_list_signed(
        &self,
        _sys: &FermiSystem,
        alpha: PatchId,
        k: Momentum,
        sign: i32,
    ) -> Vec<(Momentum, Momentum)> {
        let shift = sign * k;
        let mut out: Vec<(Momentum, Momentum)> = self
            .patch(alpha)
            .holes
            .iter()
            .filter_map(|&h| {
                let p = h + shift;
                self.is_particle_in(p, alpha).then_some((p, h))
            })
            .collect();
        out.sort();
        out
    }

    /// Particle-hole pairs `(p, h)` of patch `alpha` with `p = h ± k`, ordered
    /// by `p`.
    pub fn pair_list(&self, sys: &FermiSystem, alpha: PatchId, k: Momentum) -> Result<Vec<(Momentum, Momentum)>> {
        let sets = self.index_sets(k);
        let sign = sets.sign(alpha).ok_or(Error::PatchNotInIndexSet { alpha, k })?;
        Ok(self.pair_list_signed(sys, alpha, k, sign))
    }

    pub fn pair_count(&self, sys: &FermiSystem, alpha: PatchId, k: Momentum) -> Result<PairCount> {
        let n_squared = self.pair_list(sys, alpha, k)?.len() as u64;
        Ok(PairCount { alpha, k, n_squared, n: (n_squared as f64).sqrt() })
    }

    pub fn summary(&self, sys: &FermiSystem) -> PatchSummary {
        let transfers = sys
            .transfer_set()
            .into_iter()
            .map(|k| {
                let sets = self.index_sets(k);
                let pair_counts = sets
                    .labels()
                    .into_iter()
                    .map(|a| PairCountEntry {
                        alpha: a,
                        n_squared: self.pair_count(sys, a, k).map(|c| c.n_squared).unwrap_or(0),
                    })
                    .collect();
                TransferSummary { k, plus: sets.plus, minus: sets.minus, pair_counts }
            })
            .collect();
        PatchSummary {
            m: self.m,
            delta: self.delta,
            shell_thickness: self.shell_thickness,
            threshold: self.threshold,
            patches: self
                .patches
                .iter()
                .map(|p| PatchEntry {
                    id: p.id,
                    center: p.center,
                    unit_center: p.unit_center,
                    holes: p.holes.len(),
                    particles: p.particles.len(),
                })
                .collect(),
            transfers,
        }
    }

    /// Largest distance between two lattice points of each patch, next to the
    /// asymptotic scale `N^(1/3) M^(-1/2)`. Diagnostic only.
    pub fn diameter_report(&self, sys: &FermiSystem) -> Vec<(PatchId, f64, f64)> {
        let scale = (sys.particle_count as f64).cbrt() / (self.m as f64).sqrt();
        self.patches
            .iter()
            .map(|p| {
                let pts: Vec<Momentum> = p.holes.iter().chain(p.particles.iter()).copied().collect();
                let mut diam = 0.0f64;
                for (i, &a) in pts.iter().enumerate() {
                    for &b in &pts[i + 1..] {
                        diam = diam.max((a - b).norm());
                    }
                }
                (p.id, diam, scale)
            })
            .collect()
    }
}

/// Free-function form of [`PatchScheme::build`].
pub fn build_patch_scheme(sys: &FermiSystem, m: usize, delta: f64, shell_thickness: f64) -> Result<PatchScheme> {
    PatchScheme::build(sys, m, delta, shell_thickness)
}

struct Assigner<'a> {
    centers: &'a [[f64; 3]],
    m: usize,
}

impl Assigner<'_> {
    fn ties(&self, k: Momentum) -> Vec<usize> {
        let scores: Vec<f64> = self.centers.iter().map(|&c| k.dot(c)).collect();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = TIE_TOLERANCE * k.norm().max(1.0);
        (0..scores.len()).filter(|&i| scores[i] >= best - tol).collect()
    }

    fn assign(&self, k: Momentum) -> PatchId {
        if in_northern_half(k) {
            PatchId(self.ties(k)[0])
        } else {
            let mirrored = self.ties(-k)[0];
            PatchId((mirrored + self.m / 2) % self.m)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PatchSummary {
    pub m: usize,
    pub delta: f64,
    pub shell_thickness: f64,
    pub threshold: f64,
    pub patches: Vec<PatchEntry>,
    pub transfers: Vec<TransferSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PatchEntry {
    pub id: PatchId,
    pub center: [f64; 3],
    pub unit_center: [f64; 3],
    pub holes: usize,
    pub particles: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferSummary {
    pub k: Momentum,
    pub plus: Vec<PatchId>,
    pub minus: Vec<PatchId>,
    pub pair_counts: Vec<PairCountEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairCountEntry {
    pub alpha: PatchId,
    pub n_squared: u64,
}
