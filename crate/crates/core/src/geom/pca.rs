//! PCA canonicalization of part point clouds.
//!
//! Each part is expressed in a deterministic local frame so that identical
//! geometry yields identical canonical clouds regardless of placement. The
//! returned pose maps the canonical cloud back onto the input.

use crate::error::{Error, Result};
use crate::geom::quat::{Pose, Quat};
use crate::geom::vec3::{cross, dot, sub};
use crate::geom::PartCloud;

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    // v accumulates the rotations; starts as identity.
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off <= f64::MIN_POSITIVE {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = if theta >= 0.0 {
                1.0 / (theta + (1.0 + theta * theta).sqrt())
            } else {
                1.0 / (theta - (1.0 + theta * theta).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            // Rotate rows/columns p and q of a.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Canonicalizes a cloud into its PCA frame.
///
/// Returns the canonical cloud (centered at the origin, principal axes on
/// x/y/z in descending variance order) and the pose that maps it back onto
/// the input: `pose.apply_cloud(&canonical) ~= cloud`.
///
/// Conventions making the frame deterministic:
/// - eigenvalues sorted descending, ties keeping the solver's column order;
/// - each of the first two axes is oriented so the projected coordinates
///   have non-negative asymmetry (third central moment); the plain
///   coordinate sum is identically zero after centering, so the moment is
///   the lowest-order statistic that orients an axis reproducibly;
/// - the third axis is the cross product of the first two, so the frame is
///   right-handed and survives rank-2 (planar) inputs.
pub fn pca_canonicalize(cloud: &PartCloud) -> Result<(PartCloud, Pose)> {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let mut c = [0.0f64; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for k in &mut c {
        *k /= n;
    }

    let centered: Vec<[f64; 3]> = pts.iter().map(|&p| sub(p, c)).collect();

    let mut cov = [[0.0f64; 3]; 3];
    for p in &centered {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += p[i] * p[j];
            }
        }
    }
    for row in &mut cov {
        for e in row {
            *e /= n;
        }
    }
    if cov.iter().flatten().all(|&e| e == 0.0) {
        return Err(Error::DegenerateCloud(
            "all points identical, no principal frame".into(),
        ));
    }

    let (vals, vecs) = jacobi_eigen(cov);
    let mut order = [0usize, 1, 2];
    // Descending eigenvalue, stable on ties so the original axis order wins.
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());

    let column = |k: usize| [vecs[0][order[k]], vecs[1][order[k]], vecs[2][order[k]]];
    let signed = |axis: [f64; 3]| {
        let s: f64 = centered
            .iter()
            .map(|&p| {
                let c = dot(p, axis);
                c * c * c
            })
            .sum();
        if s < 0.0 {
            [-axis[0], -axis[1], -axis[2]]
        } else {
            axis
        }
    };
    let e1 = signed(column(0));
    let e2 = signed(column(1));
    let e3 = cross(e1, e2);

    // Rows of r_t are the axes; canonical = r_t * centered.
    let canonical: Vec<[f64; 3]> = centered
        .iter()
        .map(|&p| [dot(p, e1), dot(p, e2), dot(p, e3)])
        .collect();

    let r = [
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ];
    let pose = Pose::new(Quat::from_matrix(&r), c)?;
    Ok((PartCloud::from_points(canonical)?, pose))
}
