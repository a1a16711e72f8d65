//! Criterion benchmarks for the attention and mask kernels live in `benches/`.
