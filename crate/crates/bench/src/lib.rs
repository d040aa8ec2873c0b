//! Criterion benchmark crate; see `benches/engines.rs`.
