//! Criterion benchmarks for the ymorse workspace; see `benches/`.
