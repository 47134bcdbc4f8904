//! Desk-scale incremental object detection with dynamic query groups.
//!
//! A small set-prediction detector whose decoder query bank grows by one
//! group per phase. Groups attend only within themselves, are matched and
//! supervised in isolation, and old groups are kept alive across phases
//! through pseudo-label distillation and risk-balanced exemplar replay.
//! Everything runs on a self-contained f64 reverse-mode tape so every
//! gradient can be checked against finite differences.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod incremental;
pub mod matchloss;
pub mod model;
pub mod optim;
pub mod replay;
pub mod rng;

pub use error::DetError;

pub type Result<T> = std::result::Result<T, DetError>;
