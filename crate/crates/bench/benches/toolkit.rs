use criterion::{criterion_group, criterion_main};

criterion_group!(benches, videor4_bench::benchmarks);
criterion_main!(benches);
