//! Benchmark-only crate; see `benches/blocks.rs`.
