//! Momentum-resolved Hong-Ou-Mandel interferometry toolkit.
//!
//! The crate is split along the data flow of an experiment:
//!
//! - [`model`]: source and detector parameters, the far-field pixel to
//!   momentum mapping and the bunching/antibunching coincidence laws.
//! - [`estimation`]: Fisher information of the pixel-resolved measurement
//!   and the classical/quantum Cramér-Rao bounds.
//! - [`montecarlo`]: synthetic coincidence matrices, repeated scans and
//!   synthetic time-tag streams.
//! - [`ingest`]: binary/CSV time-tag streams and coincidence classification.
//! - [`fit`]: beat-curve regression, log-likelihood, maximum-likelihood
//!   displacement estimate and its propagated uncertainty.
//!
//! Lengths are in millimetres and transverse momenta in inverse millimetres
//! throughout, unless a field name says otherwise.

// NaN must fail these guards, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod fit;
pub mod ingest;
pub mod model;
pub mod montecarlo;
pub mod sinc;

pub use error::{Error, ErrorKind, Result};
pub use estimation::{Bound, BoundResult, FisherConfig};
pub use fit::{BeatCurve, BeatFitParams, EstimationResult};
pub use ingest::{CoincidenceWindows, TimeTagRecord};
pub use model::{
    Branch, DetectorArray, OpticalGeometry, PixelIntegration, PixelPair, SourceParams,
};
pub use montecarlo::{CountMatrix, ScanDataset};
