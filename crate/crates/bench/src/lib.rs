//! Criterion benchmarks for the `equinas` kernels; see `benches/`.
