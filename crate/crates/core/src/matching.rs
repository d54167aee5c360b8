//! Minimum-cost assignment and ground-truth relabeling of interchangeable
//! parts.
//!
//! Interchangeable parts (four identical legs, say) make per-part
//! supervision ambiguous: the network may pose *a* leg at each corner
//! without matching the arbitrary ground-truth labels. Before computing
//! losses or accuracies we therefore re-label ground truth within every
//! equivalence class, choosing the assignment that minimizes world-space
//! chamfer distance between predicted and ground-truth placements.

use crate::encoding::EquivalencePartition;
use crate::error::{Error, Result};
use crate::geom::{chamfer_points, PartCloud, Pose};

/// Result of solving one assignment problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `assign[i]` is the column chosen for row `i`.
    pub assign: Vec<usize>,
    /// Total cost, summed in row order.
    pub cost: f64,
}

/// Tolerance for recognizing equal-cost assignments during tie-breaking,
/// relative to the optimal cost's scale.
const TIE_TOL: f64 = 1e-9;

/// Minimum-cost perfect assignment on a square cost matrix, O(n^3) per
/// solve. Among all minimum-cost assignments, returns the
/// lexicographically smallest `assign` vector.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::InvalidCostMatrix(format!(
                "matrix is {n} rows but a row has {} entries",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidCostMatrix(format!("non-finite cost {bad}")));
        }
    }
    if n == 0 {
        return Ok(Assignment {
            assign: Vec::new(),
            cost: 0.0,
        });
    }
    let optimal = solve_cost(cost, &(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>());
    let tol = TIE_TOL * (1.0 + optimal.abs());

    // Fix rows in order, testing candidate columns ascending: a column is
    // accepted when some completion of the remaining rows still reaches
    // the optimal total. This yields the lexicographically smallest
    // minimum-cost assignment.
    let mut assign = vec![usize::MAX; n];
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut budget = optimal;
    for i in 0..n {
        let rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (slot, &j) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols
                .iter()
                .copied()
                .filter(|&c| c != j)
                .collect();
            let rest = solve_cost(cost, &rows, &cols);
            if cost[i][j] + rest <= budget + tol {
                chosen = Some((slot, j));
                break;
            }
        }
        let (slot, j) = chosen.expect("optimal assignment always completes");
        assign[i] = j;
        free_cols.remove(slot);
        budget -= cost[i][j];
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment {
        assign,
        cost: total,
    })
}

/// Optimal assignment cost on the submatrix `rows x cols` via potentials
/// and shortest augmenting paths.
fn solve_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return 0.0;
    }
    let at = |r: usize, c: usize| cost[rows[r]][cols[c]];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1]; // owner[j]: row (1-based) holding column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    // Row-order summation keeps the result comparable bit-for-bit with an
    // exhaustive oracle that sums the same way.
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    (0..n).map(|r| at(r, row_to_col[r])).sum()
}

/// A relabeling of ground-truth part indices, bijective and identity
/// outside equivalence classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    perm: Vec<usize>,
}

impl Matching {
    pub fn identity(n: usize) -> Matching {
        Matching {
            perm: (0..n).collect(),
        }
    }

    /// Ground-truth index matched to prediction `i`.
    pub fn gt_for(&self, i: usize) -> usize {
        self.perm[i]
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Reorders a ground-truth-aligned list so element `i` corresponds to
    /// prediction `i`.
    pub fn reorder<T: Clone>(&self, gt: &[T]) -> Vec<T> {
        self.perm.iter().map(|&j| gt[j].clone()).collect()
    }
}

/// Relabels ground truth within each equivalence class by minimum
/// world-space chamfer cost: `cost(i, j)` poses part `i` with prediction
/// `i` and part `j` with ground truth `j`. Singleton classes stay fixed.
pub fn match_equivalent(
    pred: &[Pose],
    gt: &[Pose],
    parts: &[PartCloud],
    partition: &EquivalencePartition,
) -> Result<Matching> {
    let n = parts.len();
    if pred.len() != n {
        return Err(Error::LengthMismatch {
            context: "predicted poses vs parts",
            left: pred.len(),
            right: n,
        });
    }
    if gt.len() != n {
        return Err(Error::LengthMismatch {
            context: "ground-truth poses vs parts",
            left: gt.len(),
            right: n,
        });
    }
    if partition.n_parts() != n {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} parts, got {n}",
            partition.n_parts()
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for class in partition.classes() {
        if class.len() < 2 {
            continue;
        }
        let placed_pred: Vec<Vec<[f64; 3]>> = class
            .iter()
            .map(|&i| parts[i].points().iter().map(|&p| pred[i].apply(p)).collect())
            .collect();
        let placed_gt: Vec<Vec<[f64; 3]>> = class
            .iter()
            .map(|&j| parts[j].points().iter().map(|&p| gt[j].apply(p)).collect())
            .collect();
        let cost: Vec<Vec<f64>> = placed_pred
            .iter()
            .map(|a| placed_gt.iter().map(|b| chamfer_points(a, b)).collect())
            .collect();
        let solution = hungarian(&cost)?;
        for (row, &col) in solution.assign.iter().enumerate() {
            perm[class[row]] = class[col];
        }
    }
    Ok(Matching { perm })
}
