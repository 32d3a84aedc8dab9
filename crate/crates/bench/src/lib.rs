//! Criterion benchmarks for the attention kernel live in `benches/`; this
//! crate has no library code of its own.
