//! Criterion benchmarks for hlfp-core live in `benches/`: `inference` times whole networks, `kernels` the tensor ops.
