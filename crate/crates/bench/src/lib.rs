//! Criterion benchmarks for the hot paths: `cargo bench -p reshoot-bench`.
