//! Benchmarks for the numeric kernels; see `benches/`.
