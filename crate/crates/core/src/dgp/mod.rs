//! Simulated state-space processes with a single latent factor.

mod covariance;
mod process;
mod shocks;
mod simulate;
mod spow;

pub use covariance::{build_covariance, CovarianceSpec};
pub use process::{Calibration, DgpSpec, LatentState, MeasurementCurve, RegimeSwitching, STATE_LAGS};
pub use shocks::{sample_shock, ShockDist, TwoPieceT, VectorErrorDensity, VectorErrors};
pub use simulate::{load_dataset, save_dataset, simulate, split, standardize_columns, SimulatedDataset, Splits};
pub use spow::{spow, SpowParams};
