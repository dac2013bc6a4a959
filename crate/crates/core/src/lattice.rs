//! Momentum lattice `Z^3`, the Fermi ball and the set of momentum transfers.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when comparing integer norms against real radii.
const RADIUS_SLACK: f64 = 1e-9;

/// A lattice momentum in units of the reciprocal-lattice spacing.
///
/// Ordered lexicographically by `z`, then `y`, then `x`, which fixes the
/// iteration order of every set of momenta in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[i32; 3]", into = "[i32; 3]")]
pub struct Momentum {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Momentum {
    pub const ZERO: Momentum = Momentum { x: 0, y: 0, z: 0 };

    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Momentum { x, y, z }
    }

    pub fn norm_sq(self) -> i64 {
        let (x, y, z) = (self.x as i64, self.y as i64, self.z as i64);
        x * x + y * y + z * z
    }

    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn dot(self, v: [f64; 3]) -> f64 {
        self.x as f64 * v[0] + self.y as f64 * v[1] + self.z as f64 * v[2]
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    pub fn is_zero(self) -> bool {
        self == Momentum::ZERO
    }
}

impl Ord for Momentum {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.z, self.y, self.x).cmp(&(other.z, other.y, other.x))
    }
}

impl PartialOrd for Momentum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl From<[i32; 3]> for Momentum {
    fn from(v: [i32; 3]) -> Self {
        Momentum::new(v[0], v[1], v[2])
    }
}

impl From<Momentum> for [i32; 3] {
    fn from(k: Momentum) -> Self {
        [k.x, k.y, k.z]
    }
}

impl Add for Momentum {
    type Output = Momentum;
    fn add(self, o: Momentum) -> Momentum {
        Momentum::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Momentum {
    type Output = Momentum;
    fn sub(self, o: Momentum) -> Momentum {
        Momentum::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Momentum {
    type Output = Momentum;
    fn neg(self) -> Momentum {
        Momentum::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<Momentum> for i32 {
    type Output = Momentum;
    fn mul(self, k: Momentum) -> Momentum {
        Momentum::new(self * k.x, self * k.y, self * k.z)
    }
}

impl fmt::Display for Momentum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

/// All lattice points with `|k| <= radius`, in lattice order.
pub fn lattice_ball(radius: f64) -> Vec<Momentum> {
    if radius < 0.0 {
        return Vec::new();
    }
    let r = radius.floor() as i32;
    let limit = radius * radius + RADIUS_SLACK * radius.max(1.0);
    let mut out = Vec::new();
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                let k = Momentum::new(x, y, z);
                if (k.norm_sq() as f64) <= limit {
                    out.push(k);
                }
            }
        }
    }
    out.sort();
    out
}

/// Membership in the northern half space used to pick one of `k`, `-k`.
pub fn in_northern_half(k: Momentum) -> bool {
    k.z > 0 || (k.z == 0 && k.y > 0) || (k.z == 0 && k.y == 0 && k.x > 0)
}

/// The Fermi ball together with the derived mean-field scaling constants.
#[derive(Clone, Debug)]
pub struct FermiSystem {
    pub fermi_momentum: f64,
    pub fermi_ball: Vec<Momentum>,
    pub particle_count: usize,
    pub hbar: f64,
    pub kappa: f64,
    pub transfer_radius: f64,
    ball_set: HashSet<Momentum>,
}

impl FermiSystem {
    pub fn new(fermi_momentum: f64, transfer_radius: f64) -> Result<Self> {
        if !(fermi_momentum >= 0.0) || !fermi_momentum.is_finite() {
            return Err(Error::InvalidParameter {
                field: "k_f",
                reason: format!("must be a finite nonnegative number, got {fermi_momentum}"),
            });
        }
        if !(transfer_radius > 0.0) || !transfer_radius.is_finite() {
            return Err(Error::InvalidParameter {
                field: "transfer_radius",
                reason: format!("must be a finite positive number, got {transfer_radius}"),
            });
        }
        let fermi_ball = lattice_ball(fermi_momentum);
        let particle_count = fermi_ball.len();
        let n = particle_count as f64;
        let hbar = n.powf(-1.0 / 3.0);
        Ok(FermiSystem {
            fermi_momentum,
            ball_set: fermi_ball.iter().copied().collect(),
            fermi_ball,
            particle_count,
            hbar,
            kappa: fermi_momentum * hbar,
            transfer_radius,
        })
    }

    /// `true` iff `k` lies in the (closed) Fermi ball.
    pub fn in_fermi_ball(&self, k: Momentum) -> bool {
        self.ball_set.contains(&k)
    }

    /// The transfer set: lattice points of the closed ball of radius
    /// `transfer_radius` lying in the northern half space.
    pub fn transfer_set(&self) -> Vec<Momentum> {
        lattice_ball(self.transfer_radius).into_iter().filter(|&k| in_northern_half(k)).collect()
    }
}

/// Free-function form of [`FermiSystem::new`].
pub fn build_fermi_system(fermi_momentum: f64, transfer_radius: f64) -> Result<FermiSystem> {
    FermiSystem::new(fermi_momentum, transfer_radius)
}
