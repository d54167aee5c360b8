//! Unit quaternions and rigid 6-DoF poses.

use crate::error::{Error, Result};
use crate::geom::vec3::{add, cross, dot, scale, sub};
use crate::geom::PartCloud;
use serde::{Deserialize, Serialize};

/// Maximum tolerated deviation of a pose quaternion from unit norm.
pub const UNIT_TOL: f64 = 1e-6;

/// Rotation quaternion in (w, x, y, z) layout.
///
/// Values stored in a [`Pose`] are unit-norm with canonical sign (w >= 0);
/// free-standing `Quat` values carry no such guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis`. The axis must be non-zero.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
        let n = dot(axis, axis).sqrt();
        assert!(n > 0.0, "rotation axis must be non-zero");
        let (s, c) = (angle / 2.0).sin_cos();
        Quat {
            w: c,
            x: s * axis[0] / n,
            y: s * axis[1] / n,
            z: s * axis[2] / n,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Flips sign so that w > 0, or if w == 0 so that the first non-zero
    /// vector component is positive. `q` and `-q` encode the same rotation,
    /// so a fixed representative keeps comparisons deterministic.
    pub fn canonical_sign(&self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quat {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product; `a.mul(b)` rotates by `b` first, then `a`.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotates a point, assuming unit norm.
    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let v = [self.x, self.y, self.z];
        let t = scale(cross(v, p), 2.0);
        add(add(p, scale(t, self.w)), cross(v, t))
    }

    /// Column-major rotation matrix `m[row][col]`, assuming unit norm.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Recovers a quaternion from a rotation matrix (largest-component branch
    /// selection for stability). The result is normalized, canonical sign.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Quat {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > m[0][0] && tr > m[1][1] && tr > m[2][2] {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[2][1] - m[1][2]) / s,
                x: 0.25 * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: 0.25 * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized().canonical_sign()
    }
}

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Quat,
    translation: [f64; 3],
}

impl Pose {
    /// Validates unit norm (within [`UNIT_TOL`]) and finiteness, then stores
    /// the exactly-normalized, canonical-sign quaternion.
    pub fn new(rotation: Quat, translation: [f64; 3]) -> Result<Pose> {
        let norm = rotation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitQuaternion {
                norm,
                tol: UNIT_TOL,
            });
        }
        if translation.iter().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateCloud(
                "pose translation must be finite".into(),
            ));
        }
        Ok(Pose {
            rotation: rotation.normalized().canonical_sign(),
            translation,
        })
    }

    pub fn identity() -> Pose {
        Pose {
            rotation: Quat::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> Quat {
        self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        add(self.rotation.rotate(p), self.translation)
    }

    pub fn apply_cloud(&self, cloud: &PartCloud) -> PartCloud {
        PartCloud::from_points(cloud.points().iter().map(|&p| self.apply(p)).collect())
            .expect("transforming a valid cloud keeps it valid")
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.conjugate();
        let t = r.rotate(self.translation);
        Pose {
            rotation: r.canonical_sign(),
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// `self.compose(&other)` applies `other` first: result(x) = self(other(x)).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(&other.rotation).canonical_sign(),
            translation: add(self.rotation.rotate(other.translation), self.translation),
        }
    }

    /// Flat representation `[w, x, y, z, tx, ty, tz]`.
    pub fn to_7vec(&self) -> [f64; 7] {
        let q = self.rotation;
        let t = self.translation;
        [q.w, q.x, q.y, q.z, t[0], t[1], t[2]]
    }

    pub fn from_7vec(v: &[f64; 7]) -> Result<Pose> {
        Pose::new(Quat::new(v[0], v[1], v[2], v[3]), [v[4], v[5], v[6]])
    }

    /// Reconstructs a pose from values produced by [`Pose::to_7vec`],
    /// preserving them bit for bit (no renormalization). Still rejects
    /// values that were not written by a valid pose.
    pub fn from_stored(v: &[f64; 7]) -> Result<Pose> {
        let rotation = Quat::new(v[0], v[1], v[2], v[3]);
        let norm = rotation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitQuaternion {
                norm,
                tol: UNIT_TOL,
            });
        }
        if v[4..].iter().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateCloud(
                "pose translation must be finite".into(),
            ));
        }
        Ok(Pose {
            rotation,
            translation: [v[4], v[5], v[6]],
        })
    }
}

/// Squared distance between two points after applying poses `a` and `b`.
pub fn posed_distance2(a: &Pose, pa: [f64; 3], b: &Pose, pb: [f64; 3]) -> f64 {
    let d = sub(a.apply(pa), b.apply(pb));
    dot(d, d)
}
