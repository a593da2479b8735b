//! Criterion benchmarks for omni-core live in `benches/kernels.rs`.
