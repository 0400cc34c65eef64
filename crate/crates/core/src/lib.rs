//! Deterministic desk-scale simulator for private peer-to-peer co-training.
//!
//! Clients first group themselves by the L1 distance between their weights
//! after a single differentially private warm-up epoch, then co-train a
//! shared proxy model per group under per-sample gradient clipping and
//! Gaussian noise, while each client keeps a private noiseless local model
//! coupled to the proxy through mutual KL distillation. Group aggregation
//! can be hardened against poisoning with an anomaly filter and m-Krum.
//!
//! Everything is driven by counter-based RNG streams keyed on
//! `(seed, client, round, step, purpose)`, so results are bitwise
//! reproducible regardless of thread count or scheduling.

pub mod cotrain;
pub mod data;
pub mod grouping;
pub mod harness;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod robustness;

pub use model::WeightVector;
