//! Criterion benchmarks for the ranking math and the policy; see `benches/`.
