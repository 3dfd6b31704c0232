//! Benchmarks for the asbunet crate; see `benches/`.
