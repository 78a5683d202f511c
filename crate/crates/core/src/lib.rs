//! Mesh-free diffeomorphic registration with a residual network ansatz.
//!
//! The map `f: [0,1]³ → [0,1]³` is a small residual network whose value,
//! spatial Jacobian and Laplacian are propagated together as jets. Losses
//! are Monte Carlo estimates over a fixed sample pool and are differentiated
//! in reverse mode with respect to the network parameters.

pub mod ansatz;
pub mod diffcalc;
pub mod error;
pub mod losses;
pub mod report;
pub mod sampling;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use ansatz::{forward, init_params, read_checkpoint, write_checkpoint, Evaluator, MapEval, NetParams};
pub use diffcalc::{backward, backward_combination, Activation, Architecture, Boundary, GradTape, Jet3, Point};
pub use error::{Error, Result};
pub use losses::{total_loss, Formulation, LossBreakdown, LossTerm, LossWeights, Samples};
pub use report::{det_histogram, jacobian_color, DetHistogram};
pub use sampling::{build_pool, draw_batch, SamplePool, Stream};
pub use synth::LandmarkSet;
pub use trainer::{ablate_boundary, train, AblationReport, TrainConfig, TrainData, TrainOutcome};
pub use volume::Volume3;
