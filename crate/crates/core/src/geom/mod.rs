//! Point-cloud geometry: clouds, bounding boxes, rigid poses, farthest point
//! sampling and Chamfer distance.

mod pca;
mod quat;

pub use pca::pca_canonicalize;
pub use quat::{posed_distance2, Pose, Quat, UNIT_TOL};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Small fixed-size vector helpers shared across the crate.
pub(crate) mod vec3 {
    #[inline]
    pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    #[inline]
    pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    #[inline]
    pub fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    #[inline]
    pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[inline]
    pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    #[inline]
    pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
        let d = sub(a, b);
        dot(d, d)
    }
}

/// Non-empty point cloud with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartCloud {
    points: Vec<[f64; 3]>,
}

impl PartCloud {
    pub fn from_points(points: Vec<[f64; 3]>) -> Result<PartCloud> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateCloud("non-finite coordinate".into()));
        }
        Ok(PartCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// New cloud keeping only the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PartCloud {
        PartCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::of_points(&self.points)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Coordinate-wise min/max scan. Panics on an empty slice; clouds are
    /// non-empty by construction.
    pub fn of_points(points: &[[f64; 3]]) -> Aabb {
        assert!(!points.is_empty(), "AABB of empty point set");
        let mut min = points[0];
        let mut max = points[0];
        for p in &points[1..] {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        vec3::sub(self.max, self.min)
    }

    /// Union of two boxes.
    pub fn merge(&self, other: &Aabb) -> Aabb {
        let mut min = self.min;
        let mut max = self.max;
        for k in 0..3 {
            min[k] = min[k].min(other.min[k]);
            max[k] = max[k].max(other.max[k]);
        }
        Aabb { min, max }
    }
}

/// A set of parts with one pose per part; the assembled shape is the union
/// of the transformed parts.
#[derive(Debug, Clone)]
pub struct Shape {
    parts: Vec<PartCloud>,
    poses: Vec<Pose>,
}

impl Shape {
    pub fn new(parts: Vec<PartCloud>, poses: Vec<Pose>) -> Result<Shape> {
        if parts.len() != poses.len() {
            return Err(Error::LengthMismatch {
                context: "shape parts vs poses",
                left: parts.len(),
                right: poses.len(),
            });
        }
        if parts.is_empty() {
            return Err(Error::NoParts);
        }
        Ok(Shape { parts, poses })
    }

    pub fn parts(&self) -> &[PartCloud] {
        &self.parts
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Union of all transformed parts, parts in order, points in order.
    pub fn assemble(&self) -> PartCloud {
        let mut points = Vec::with_capacity(self.parts.iter().map(PartCloud::len).sum());
        for (part, pose) in self.parts.iter().zip(&self.poses) {
            points.extend(part.points().iter().map(|&p| pose.apply(p)));
        }
        PartCloud { points }
    }
}

/// Assembles transformed world-space points for (part, pose) pairs.
pub fn assemble_points(parts: &[&PartCloud], poses: &[Pose]) -> Vec<[f64; 3]> {
    let mut points = Vec::new();
    for (part, pose) in parts.iter().zip(poses) {
        points.extend(part.points().iter().map(|&p| pose.apply(p)));
    }
    points
}

/// Farthest point sampling.
///
/// Picks a seeded random start index, then greedily adds the point with the
/// largest distance to the selected set. Distance ties keep the lowest index,
/// so the result is fully determined by (cloud, k, seed). Returns indices in
/// selection order; `k == len` returns every index.
pub fn fps(cloud: &PartCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::SampleCountOutOfRange {
            requested: k,
            available: n,
        });
    }
    let pts = cloud.points();
    let start = rng_from_seed(seed).gen_range(0..n);
    let mut selected = Vec::with_capacity(k);
    selected.push(start);
    let mut dist2: Vec<f64> = pts.iter().map(|&p| vec3::dist2(p, pts[start])).collect();
    while selected.len() < k {
        let mut best = 0;
        for i in 1..n {
            if dist2[i] > dist2[best] {
                best = i;
            }
        }
        selected.push(best);
        for i in 0..n {
            let d = vec3::dist2(pts[i], pts[best]);
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }
    Ok(selected)
}

/// Index of the nearest point in `to` for each point in `from`; ties keep the
/// lowest index.
pub fn nearest_indices(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<usize> {
    from.iter()
        .map(|&p| {
            let mut best = 0usize;
            let mut best_d = vec3::dist2(p, to[0]);
            for (j, &q) in to.iter().enumerate().skip(1) {
                let d = vec3::dist2(p, q);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Symmetric Chamfer distance: the sum over both directions of squared
/// nearest-neighbor distances. Not normalized by point count.
pub fn chamfer(a: &PartCloud, b: &PartCloud) -> f64 {
    chamfer_points(a.points(), b.points())
}

pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    directed_sum(a, b) + directed_sum(b, a)
}

fn directed_sum(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut total = 0.0;
    for &p in from {
        let mut best = vec3::dist2(p, to[0]);
        for &q in &to[1..] {
            let d = vec3::dist2(p, q);
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total
}
