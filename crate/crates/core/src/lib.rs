//! Parametric image degradation engine.
//!
//! Forward physical models for haze, low light, blur and low resolution, their
//! analytic inverses, a hierarchical `(type, key, value)` tokenizer with
//! quantization-bound harnesses, classical blind estimators, evaluation
//! metrics, and the gated restoration reward.

pub mod cues;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod estimate;
pub mod filter;
pub mod image;
pub mod metrics;
pub mod numeric;
pub mod resample;
pub mod restore;
pub mod reward;
pub mod sensitivity;
pub mod server;
pub mod spec;
pub mod spectrum;
pub mod tokenizer;

pub use error::{Error, Result};
pub use estimate::Prediction;
pub use image::{load_png, save_png, Encoding, Image};
pub use reward::RewardBreakdown;
pub use spec::{DegradationSpec, DegradationType, ParamKey, ParamValue};
