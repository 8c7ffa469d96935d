//! Criterion benchmarks for the recodiff operators and restorer; run with
//! `cargo bench -p recodiff-bench`.
