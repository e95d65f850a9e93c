//! Criterion benchmarks for the deletion pipeline live under `benches/`.
