//! Criterion benchmarks for the simulation and training hot paths; see `benches/`.
