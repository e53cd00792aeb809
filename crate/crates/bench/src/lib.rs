//! Criterion benchmarks for the `rimatte` kernels; see `benches/`.
