//! Patient-level differentially private federated SGD (P3SGD).
//!
//! * [`numkit`]: parameter vectors, clipping, Gaussian noise, seeded streams
//! * [`models`]: logistic regression and a one-hidden-layer MLP with
//!   analytic gradients, plus text checkpoints
//! * [`patientdb`]: patient-grouped data, synthetic generation, CSV I/O,
//!   splitting and Bernoulli patient sampling
//! * [`dpcore`]: the P3SGD trainer and the non-private SGD baseline
//! * [`accountant`]: moments accountant for the selection and Gaussian steps
//! * [`attack`]: feature-matching inversion attack and PSNR scoring
//!
//! Per-patient work and attack runs use rayon when the `parallel` feature is
//! on (the default); results are identical either way.

pub mod accountant;
pub mod attack;
pub mod dpcore;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod numkit;
pub mod par;
pub mod patientdb;

pub use error::{Error, Result};
pub use numkit::{ParamVector, RandomSource};
