//! Morphology vectors and their bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBODIMENT_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbodimentError {
    #[error("embodiment {value:?} outside bounds on {component}: [{min}, {max}]")]
    OutOfBounds {
        value: EmbodimentVector,
        component: &'static str,
        min: f64,
        max: f64,
    },
    #[error("degenerate bounds on {0}: min must be below max")]
    DegenerateBounds(&'static str),
}

/// Torso, front-limb and hind-limb lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentVector {
    pub torso: f64,
    pub front: f64,
    pub hind: f64,
}

pub const COMPONENT_NAMES: [&str; EMBODIMENT_DIM] = ["torso", "front", "hind"];

impl EmbodimentVector {
    pub const fn new(torso: f64, front: f64, hind: f64) -> Self {
        Self { torso, front, hind }
    }

    pub fn to_array(self) -> [f64; EMBODIMENT_DIM] {
        [self.torso, self.front, self.hind]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Signed limb asymmetry `front − hind`.
    pub fn asymmetry(&self) -> f64 {
        self.front - self.hind
    }

    /// A stable 64-bit key for seed derivation (independent of grid order).
    pub fn seed_key(&self) -> u64 {
        let [a, b, c] = self.to_array();
        a.to_bits().rotate_left(7) ^ b.to_bits().rotate_left(29) ^ c.to_bits().rotate_left(47)
    }
}

impl std::fmt::Display for EmbodimentVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.3}, {:.3}, {:.3})", self.torso, self.front, self.hind)
    }
}

/// Per-component `(min, max)` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentBounds {
    pub torso: (f64, f64),
    pub front: (f64, f64),
    pub hind: (f64, f64),
}

impl EmbodimentBounds {
    pub fn new(torso: (f64, f64), front: (f64, f64), hind: (f64, f64)) -> Result<Self, EmbodimentError> {
        let b = Self { torso, front, hind };
        b.validate()?;
        Ok(b)
    }

    /// The box spanned by the evaluation grid.
    pub fn evaluation() -> Self {
        Self { torso: (0.2, 0.4), front: (0.15, 0.3), hind: (0.15, 0.3) }
    }

    /// The morphology search box for the step-down task.
    pub fn evolution() -> Self {
        Self { torso: (0.27, 0.35), front: (0.15, 0.25), hind: (0.15, 0.25) }
    }

    pub fn ranges(&self) -> [(f64, f64); EMBODIMENT_DIM] {
        [self.torso, self.front, self.hind]
    }

    pub fn validate(&self) -> Result<(), EmbodimentError> {
        for (name, (lo, hi)) in COMPONENT_NAMES.iter().zip(self.ranges()) {
            if !(lo < hi) || lo <= 0.0 {
                return Err(EmbodimentError::DegenerateBounds(name));
            }
        }
        Ok(())
    }

    pub fn contains(&self, e: &EmbodimentVector) -> bool {
        self.check(e).is_ok()
    }

    /// Inclusive bounds check with a small tolerance for float round-off.
    pub fn check(&self, e: &EmbodimentVector) -> Result<(), EmbodimentError> {
        const TOL: f64 = 1e-12;
        for ((name, (lo, hi)), v) in COMPONENT_NAMES.iter().zip(self.ranges()).zip(e.to_array()) {
            if !(v >= lo - TOL && v <= hi + TOL) {
                return Err(EmbodimentError::OutOfBounds { value: *e, component: name, min: lo, max: hi });
            }
        }
        Ok(())
    }

    pub fn is_within(&self, outer: &EmbodimentBounds) -> bool {
        self.ranges().iter().zip(outer.ranges()).all(|(i, o)| i.0 >= o.0 && i.1 <= o.1)
    }

    /// Maps each component linearly onto `[-1, 1]`.
    pub fn normalize(&self, e: &EmbodimentVector) -> [f64; EMBODIMENT_DIM] {
        let mut out = [0.0; EMBODIMENT_DIM];
        for (o, ((lo, hi), v)) in out.iter_mut().zip(self.ranges().iter().zip(e.to_array())) {
            *o = 2.0 * (v - lo) / (hi - lo) - 1.0;
        }
        out
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[f64]) -> EmbodimentVector {
        let r = self.ranges();
        EmbodimentVector::from_slice(&[0, 1, 2].map(|i| r[i].0 + u[i].clamp(0.0, 1.0) * (r[i].1 - r[i].0)))
    }

    pub fn to_unit(&self, e: &EmbodimentVector) -> [f64; EMBODIMENT_DIM] {
        let r = self.ranges();
        let v = e.to_array();
        [0, 1, 2].map(|i| (v[i] - r[i].0) / (r[i].1 - r[i].0))
    }
}

impl Default for EmbodimentBounds {
    fn default() -> Self {
        Self::evaluation()
    }
}

/// Cartesian product in (torso, front, hind) order.
pub fn grid(torso: &[f64], front: &[f64], hind: &[f64]) -> Vec<EmbodimentVector> {
    let mut out = Vec::with_capacity(torso.len() * front.len() * hind.len());
    for &t in torso {
        for &f in front {
            for &h in hind {
                out.push(EmbodimentVector::new(t, f, h));
            }
        }
    }
    out
}

/// The 27 training morphologies.
pub fn training_grid() -> Vec<EmbodimentVector> {
    grid(&[0.2, 0.3, 0.4], &[0.2, 0.25, 0.3], &[0.2, 0.25, 0.3])
}

/// The 8-corner "less diverse" training grid.
pub fn less_diverse_grid() -> Vec<EmbodimentVector> {
    grid(&[0.2, 0.4], &[0.2, 0.3], &[0.2, 0.3])
}

/// The 80-cell evaluation grid (training grid plus unseen values).
pub fn evaluation_grid() -> Vec<EmbodimentVector> {
    let limbs = [0.15, 0.2, 0.25, 0.3];
    grid(&[0.4, 0.35, 0.3, 0.25, 0.2], &limbs, &limbs)
}

/// Whether `e` coincides with a member of `training`.
pub fn is_in(training: &[EmbodimentVector], e: &EmbodimentVector) -> bool {
    training.iter().any(|t| {
        (t.torso - e.torso).abs() < 1e-9 && (t.front - e.front).abs() < 1e-9 && (t.hind - e.hind).abs() < 1e-9
    })
}
