//! Beat-curve regression and maximum-likelihood displacement estimation.

mod beat;
mod likelihood;

pub use beat::{fit_beat_curve, initial_guess, BeatCurve, BeatFitParams, FitOptions, PARAM_NAMES};
pub use likelihood::{
    default_window, estimate, log_likelihood, log_likelihood_derivs, mle_estimate, mle_uncertainty,
    ChannelModel, EstimationResult, FittedCurves, ModelPoint, TableModel,
};

use serde::{Deserialize, Serialize};

/// One scan position of a single channel: mean count and its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub dx: f64,
    pub mean: f64,
    pub err: f64,
}
