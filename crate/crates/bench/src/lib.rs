//! Criterion benchmarks for the design solver and the collection agents.
//! Run with `cargo bench -p pe-design-bench`.
