//! Criterion benchmarks for the scoring hot paths; see `benches/`.
