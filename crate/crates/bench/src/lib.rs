//! Shared fixtures for the benchmarks in `benches/`.

use durcast_core::{generate_synthetic, split, CaseSet, SyntheticSpec};

/// Train and test parts of a seeded synthetic corpus of `n` cases.
pub fn corpus(n: usize) -> (CaseSet, CaseSet) {
    let all = generate_synthetic(&SyntheticSpec::standard(n, 8), 42).expect("valid spec");
    let (train, _, test) = split(&all, (0.7, 0.1, 0.2), 42).expect("valid ratios");
    (train, test)
}
