use thiserror::Error;

use crate::linearize::Regime;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{quantity} = {value} outside admissible range [{lo}, {hi}]")]
    Domain {
        quantity: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fundamental diagram not admissible: {0}")]
    CalibrationInvalid(String),

    #[error("calibration did not converge ({message}); best {best:?} with residual {residual:e}")]
    Calibration {
        message: String,
        best: Vec<f64>,
        residual: f64,
    },

    #[error("invalid reference state: {0}")]
    InvalidReference(String),

    #[error("observer requires the congested regime, reference is {0:?}")]
    UnsupportedRegime(Regime),

    #[error("degenerate state: density {rho} in cell {cell}")]
    DegenerateState { cell: usize, rho: f64 },

    #[error("numerical blow-up at step {step} (t = {time} s) in cell {cell}: rho = {rho}, v = {v}")]
    BlowUp {
        step: usize,
        time: f64,
        cell: usize,
        rho: f64,
        v: f64,
    },

    #[error("CFL violated: dt = {dt} s exceeds limit {limit} s")]
    Cfl { dt: f64, limit: f64 },

    #[error("observer diverged at t = {time} s: {detail}")]
    ObserverDivergence { time: f64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(quantity: &'static str, value: f64, lo: f64, hi: f64) -> Self {
        Error::Domain {
            quantity,
            value,
            lo,
            hi,
        }
    }

    /// True for errors caused by the numerics diverging rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::Cfl { .. }
                | Error::ObserverDivergence { .. }
                | Error::DegenerateState { .. }
        )
    }

    /// True for errors caused by trajectory or measurement data.
    pub fn is_data(&self) -> bool {
        matches!(self, Error::Data(_) | Error::Csv(_) | Error::GridMismatch(_))
    }
}
