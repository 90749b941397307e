//! Clustering of curves with mixtures of polynomial or B-spline regressions.
//!
//! Two fitting engines are provided: standard EM with a fixed number of
//! clusters ([`standard::fit_standard_em`]) and an entropy-penalized EM that
//! starts with one cluster per curve and discards clusters as it goes,
//! selecting their number automatically ([`robust::fit_robust_em`]).

pub mod basis;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod robust;
pub mod standard;
