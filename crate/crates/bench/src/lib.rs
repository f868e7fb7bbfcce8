//! Criterion benchmarks for the denoising pipeline; see `benches/pipeline.rs`.
