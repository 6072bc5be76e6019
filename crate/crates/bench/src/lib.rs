//! Criterion benchmarks for the kernels and networks; see `benches/`.
