//! Criterion benchmarks for the adaptation pipeline live in `benches/`.
