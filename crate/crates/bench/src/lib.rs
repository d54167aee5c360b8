//! Shared fixtures for the criterion benchmarks; see `benches/pipelines.rs`.

use partasm_core::data::{generate, AssemblySample, Category, GeneratorSpec};
use partasm_core::PartCloud;
use partasm_core::rng::rng_from_seed;
use rand::Rng as _;

/// A uniform random cloud in a centered box.
pub fn random_cloud(n: usize, seed: u64) -> PartCloud {
    let mut rng = rng_from_seed(seed);
    PartCloud::from_points(
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.5..0.5)))
            .collect(),
    )
    .unwrap()
}

/// One deterministic chair with `n_pc` points per part.
pub fn one_chair(n_pc: usize, seed: u64) -> AssemblySample {
    generate(
        &GeneratorSpec {
            category: Category::Chair,
            n_pc,
            seed,
        },
        1,
    )
    .unwrap()
    .remove(0)
}

/// A square random cost matrix with entries in [0, 1).
pub fn random_cost(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
        .collect()
}
