//! Analysis toolkit for linear SPAD arrays.
//!
//! The pipeline runs from photon timestamp streams ([`timestream`]) through
//! TDC calibration ([`calib_tdc`]), count-rate statistics ([`rates`]),
//! pair coincidence histograms ([`coincidence`]) and Gaussian peak fits
//! ([`peakfit`]) to cross-talk curves ([`crosstalk`]) and per-pixel delay
//! calibration ([`offset`]). The [`simulator`] produces streams with known
//! ground truth for every stage.

pub mod calib_tdc;
pub mod coincidence;
pub mod crosstalk;
pub mod offset;
pub mod peakfit;
pub mod rates;
pub mod simulator;
pub mod timestream;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Stream(#[from] timestream::StreamError),
    #[error(transparent)]
    Lut(#[from] calib_tdc::LutError),
    #[error(transparent)]
    Rate(#[from] rates::RateError),
    #[error(transparent)]
    Coincidence(#[from] coincidence::CoincidenceError),
    #[error(transparent)]
    Fit(#[from] peakfit::FitError),
    #[error(transparent)]
    Crosstalk(#[from] crosstalk::CrosstalkError),
    #[error(transparent)]
    Offset(#[from] offset::OffsetError),
    #[error(transparent)]
    Sim(#[from] simulator::SimError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
