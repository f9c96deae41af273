//! Criterion benchmarks for the network, the Kalman filter and the particle
//! filter; see `benches/`.
