//! Sparse-view CT reconstruction with cold-diffusion sampling.
//!
//! The crate is organised around the degradation operator
//! `D(x, v) = FBP(P_v(A x))`: project an image, keep `v` evenly spaced views
//! and reconstruct with filtered backprojection. On top of it sit
//!
//! * [`schedule`]: the view-level schedule shared by training and sampling,
//! * [`restorer`]: the restoration model interface and a small trainable CNN,
//! * [`sampler`]: the naive cold-diffusion loop and residual-conditioned
//!   self-guided sampling,
//! * [`training`]: direct and error-propagating composite training,
//! * [`phantoms`] and [`metrics`]: synthetic data and fidelity metrics.

pub mod error;
pub mod metrics;
pub mod phantoms;
pub mod restorer;
pub mod sampler;
pub mod schedule;
pub mod tomo;
pub mod training;

pub use error::{Error, Result};
pub use restorer::{
    Architecture, Condition, ConvRestorer, EmaParams, IdentityRestorer, OracleRestorer, Restorer, RestorerParams,
    ZeroRestorer,
};
pub use sampler::{sample_naive, sample_reco, LevelTransition, SampleTrace, SamplerOptions};
pub use schedule::{ScheduleStrategy, ViewSchedule};
pub use tomo::{degrade, fbp, forward_project, subsample_views, Geometry, HuMap, Image, Sinogram, Window};
pub use training::{train, TrainConfig, TrainRecord, Trainer};
