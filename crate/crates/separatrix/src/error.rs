//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state (p={p}, q={q}, z={z:?}) outside the model domain box")]
    OutsideDomain { p: f64, q: f64, z: Vec<f64> },

    #[error("Newton iteration did not converge: {0}")]
    NewtonDiverged(String),

    #[error("converged equilibrium is not a saddle: {0}")]
    NotASaddle(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("energy h={h} incompatible with region {nu}: {msg}")]
    RegionMismatch { h: f64, nu: u8, msg: String },

    #[error("|h|={h:e} below the near-separatrix floor {floor:e}")]
    NearSeparatrix { h: f64, floor: f64 },

    #[error("condition C violated at z={z:?}: Theta3={theta3}")]
    ConditionC { z: Vec<f64>, theta3: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("integration failed at t={t}: {msg}")]
    Integration { t: f64, msg: String },

    #[error("proximity hypothesis not met: {0}")]
    HypothesisNotMet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
