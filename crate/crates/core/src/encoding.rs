//! Instance codes for geometrically equivalent parts.
//!
//! Interchangeable parts (four identical chair legs, say) are
//! indistinguishable to a permutation-equivariant network. Each part
//! therefore receives two one-hot codes: `inter` identifies the part's slot
//! among all parts of the shape, `intra` identifies its geometric
//! equivalence class. Together they give every part a unique, deterministic
//! identity while still telling the network which parts are interchangeable.

use crate::error::{Error, Result};
use crate::geom::PartCloud;

/// Partition of part indices into geometric equivalence classes.
///
/// Classes appear in order of their first member; each class lists member
/// indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalencePartition {
    classes: Vec<Vec<usize>>,
    n_parts: usize,
}

impl EquivalencePartition {
    /// Validates that `classes` form a disjoint, complete partition of
    /// `0..n_parts`.
    pub fn new(classes: Vec<Vec<usize>>, n_parts: usize) -> Result<EquivalencePartition> {
        let mut seen = vec![false; n_parts];
        for class in &classes {
            if class.is_empty() {
                return Err(Error::InvalidPartition("empty class".into()));
            }
            for &m in class {
                if m >= n_parts {
                    return Err(Error::InvalidPartition(format!(
                        "member {m} out of range for {n_parts} parts"
                    )));
                }
                if seen[m] {
                    return Err(Error::InvalidPartition(format!("member {m} repeated")));
                }
                seen[m] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidPartition(format!(
                "part {missing} not covered"
            )));
        }
        Ok(EquivalencePartition { classes, n_parts })
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn n_parts(&self) -> usize {
        self.n_parts
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class index of a part.
    pub fn class_of(&self, part: usize) -> usize {
        self.classes
            .iter()
            .position(|c| c.contains(&part))
            .expect("partition covers every part")
    }

    /// Restriction to a subset of parts given by `keep` (ascending part
    /// indices), with members renumbered to positions in `keep`. Classes
    /// that lose all members disappear.
    pub fn restrict(&self, keep: &[usize]) -> EquivalencePartition {
        let renumber: std::collections::HashMap<usize, usize> =
            keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let classes: Vec<Vec<usize>> = self
            .classes
            .iter()
            .map(|class| {
                class
                    .iter()
                    .filter_map(|m| renumber.get(m).copied())
                    .collect::<Vec<_>>()
            })
            .filter(|c: &Vec<usize>| !c.is_empty())
            .collect();
        EquivalencePartition {
            classes,
            n_parts: keep.len(),
        }
    }
}

/// Default L-infinity gap between canonical AABB extents below which two
/// parts count as geometrically equivalent.
pub const EQUIVALENCE_THRESHOLD: f64 = 0.1;

/// Greedy first-fit clustering of canonicalized parts.
///
/// Parts are scanned in order; a part joins the first existing class whose
/// representative (first member) has a canonical AABB extent within
/// `threshold` of its own under the L-infinity norm, otherwise it opens a
/// new class. Clouds must already be canonicalized so that extent vectors
/// are comparable.
pub fn cluster_equivalent(parts: &[PartCloud], threshold: f64) -> Result<EquivalencePartition> {
    if parts.is_empty() {
        return Err(Error::NoParts);
    }
    let extents: Vec<[f64; 3]> = parts.iter().map(|p| p.aabb().extent()).collect();
    let gap = |a: [f64; 3], b: [f64; 3]| -> f64 {
        (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
    };
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (i, &e) in extents.iter().enumerate() {
        match classes.iter_mut().find(|c| gap(extents[c[0]], e) < threshold) {
            Some(class) => class.push(i),
            None => classes.push(vec![i]),
        }
    }
    EquivalencePartition::new(classes, parts.len())
}

/// Per-part one-hot identity codes, each padded to `max_parts` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCode {
    /// One-hot over part slots: position i for part i.
    pub inter: Vec<f64>,
    /// One-hot over equivalence classes: position k for class k.
    pub intra: Vec<f64>,
}

/// Builds instance codes for every part from its equivalence partition.
///
/// Code vectors have length `max_parts`; an error is returned when the
/// shape has more parts (or classes) than `max_parts`.
pub fn instance_encode(
    partition: &EquivalencePartition,
    max_parts: usize,
) -> Result<Vec<InstanceCode>> {
    let n = partition.n_parts();
    if n == 0 {
        return Err(Error::NoParts);
    }
    if n > max_parts {
        return Err(Error::TooManyParts {
            n_parts: n,
            max_parts,
        });
    }
    let one_hot = |idx: usize| {
        let mut v = vec![0.0; max_parts];
        v[idx] = 1.0;
        v
    };
    let mut codes = Vec::with_capacity(n);
    for part in 0..n {
        codes.push(InstanceCode {
            inter: one_hot(part),
            intra: one_hot(partition.class_of(part)),
        });
    }
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PartCloud;
    use proptest::prelude::*;

    /// Box-corner cloud with the given extents, centered at the origin.
    fn box_cloud(ext: [f64; 3]) -> PartCloud {
        let mut pts = Vec::new();
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    pts.push([sx * ext[0], sy * ext[1], sz * ext[2]]);
                }
            }
        }
        PartCloud::from_points(pts).unwrap()
    }

    #[test]
    fn four_legs_one_class_seat_another() {
        let leg = || box_cloud([0.6, 0.08, 0.08]);
        let seat = box_cloud([1.0, 0.9, 0.1]);
        let parts = vec![leg(), leg(), leg(), leg(), seat];
        let p = cluster_equivalent(&parts, EQUIVALENCE_THRESHOLD).unwrap();
        assert_eq!(p.classes(), &[vec![0, 1, 2, 3], vec![4]]);
    }

    #[test]
    fn distinct_parts_become_singletons() {
        let parts = vec![
            box_cloud([1.0, 0.2, 0.2]),
            box_cloud([0.5, 0.5, 0.2]),
            box_cloud([0.2, 0.2, 0.2]),
        ];
        let p = cluster_equivalent(&parts, EQUIVALENCE_THRESHOLD).unwrap();
        assert_eq!(p.n_classes(), 3);
        assert!(p.classes().iter().all(|c| c.len() == 1));
    }

    #[test]
    fn greedy_first_fit_uses_first_member_as_representative() {
        // Extents 1.00, 1.05, 1.12 with threshold 0.1: the second joins the
        // first (gap 0.05), the third compares against the representative
        // 1.00 (gap 0.12) and opens a new class even though it is within
        // 0.1 of the second.
        let parts = vec![
            box_cloud([1.00, 0.3, 0.3]),
            box_cloud([1.05, 0.3, 0.3]),
            box_cloud([1.12, 0.3, 0.3]),
        ];
        let p = cluster_equivalent(&parts, 0.1).unwrap();
        assert_eq!(p.classes(), &[vec![0, 1], vec![2]]);
    }

    #[test]
    fn codes_are_zero_based_one_hots() {
        let leg = || box_cloud([0.6, 0.08, 0.08]);
        let parts = vec![leg(), leg(), box_cloud([1.0, 0.9, 0.1])];
        let p = cluster_equivalent(&parts, 0.1).unwrap();
        let codes = instance_encode(&p, 20).unwrap();
        assert_eq!(codes.len(), 3);
        for (i, code) in codes.iter().enumerate() {
            assert_eq!(code.inter.len(), 20);
            assert_eq!(code.intra.len(), 20);
            assert_eq!(code.inter.iter().sum::<f64>(), 1.0);
            assert_eq!(code.intra.iter().sum::<f64>(), 1.0);
            // Part i is hot exactly at position i (zero-based).
            assert_eq!(code.inter[i], 1.0);
        }
        // Two legs share the intra code; the seat does not.
        assert_eq!(codes[0].intra, codes[1].intra);
        assert_ne!(codes[0].intra, codes[2].intra);
        assert_eq!(codes[0].intra[0], 1.0);
        assert_eq!(codes[2].intra[1], 1.0);
    }

    #[test]
    fn too_many_parts_is_an_error() {
        let parts: Vec<PartCloud> = (0..5).map(|_| box_cloud([1.0, 0.5, 0.2])).collect();
        let p = cluster_equivalent(&parts, 0.1).unwrap();
        assert!(matches!(
            instance_encode(&p, 4),
            Err(Error::TooManyParts { n_parts: 5, max_parts: 4 })
        ));
    }

    #[test]
    fn partition_validation_rejects_gaps_and_overlaps() {
        assert!(EquivalencePartition::new(vec![vec![0], vec![2]], 3).is_err());
        assert!(EquivalencePartition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(EquivalencePartition::new(vec![vec![0], vec![]], 1).is_err());
        assert!(EquivalencePartition::new(vec![vec![0, 1, 2]], 3).is_ok());
    }

    #[test]
    fn restrict_drops_and_renumbers() {
        let p = EquivalencePartition::new(vec![vec![0, 2, 3], vec![1], vec![4]], 5).unwrap();
        let r = p.restrict(&[1, 2, 4]);
        // Survivors 1, 2, 4 become 0, 1, 2.
        assert_eq!(r.classes(), &[vec![1], vec![0], vec![2]]);
        assert_eq!(r.n_parts(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Permuting non-borderline parts relabels classes but keeps the
        /// grouping identical as a set partition.
        #[test]
        fn clustering_is_stable_under_permutation(perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            // Three well-separated groups, far from the 0.1 threshold edge.
            let groups = [[1.0, 0.3, 0.3], [0.5, 0.5, 0.5], [0.2, 0.9, 0.2]];
            let parts: Vec<PartCloud> = (0..9)
                .map(|i| box_cloud(groups[i % 3]))
                .collect();
            let mut order: Vec<usize> = (0..9).collect();
            order.shuffle(&mut crate::rng::rng_from_seed(perm_seed));
            let permuted: Vec<PartCloud> =
                order.iter().map(|&i| parts[i].clone()).collect();

            let base = cluster_equivalent(&parts, 0.1).unwrap();
            let perm = cluster_equivalent(&permuted, 0.1).unwrap();
            prop_assert_eq!(base.n_classes(), perm.n_classes());
            // Same set partition after mapping permuted indices back.
            let canon = |p: &EquivalencePartition, map: &dyn Fn(usize) -> usize| {
                let mut cs: Vec<Vec<usize>> = p
                    .classes()
                    .iter()
                    .map(|c| {
                        let mut v: Vec<usize> = c.iter().map(|&m| map(m)).collect();
                        v.sort_unstable();
                        v
                    })
                    .collect();
                cs.sort();
                cs
            };
            let identity = canon(&base, &|m| m);
            let mapped = canon(&perm, &|m| order[m]);
            prop_assert_eq!(identity, mapped);
        }
    }
}
