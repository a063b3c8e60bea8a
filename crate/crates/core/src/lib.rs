//! Joint beam selection and digital precoding for multiuser beamspace MIMO
//! with discrete lens arrays.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: complex matrices, the diagonal-reciprocal surrogate, gradient checks
//! - [`channel`]: DFT beamspace channel generation and angular CSI errors
//! - [`baseline`]: sum-rate, ZF, iterative WMMSE, MM / MS / exhaustive beam selection
//! - [`unfolding`]: the unfolded WMMSE precoding network with manual backprop
//! - [`env`]: the beam-selection MDP
//! - [`agent`]: dueling double-DQN with prioritized replay
//! - [`joint`]: alternating training of the agent and the unfolding network

pub mod agent;
pub mod baseline;
pub mod channel;
pub mod env;
pub mod joint;
pub mod numerics;
pub mod unfolding;

pub use numerics::{CMatrix, C64};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diagonal entry {index} has magnitude {magnitude:e}, too small to invert")]
    DegenerateDiagonal { index: usize, magnitude: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("rank-deficient channel: {0}")]
    RankDeficient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("precoder has zero power")]
    ZeroPrecoder,
    #[error("WMMSE weight for user {0} is degenerate")]
    WDegenerate(usize),
    #[error("power bisection failed: {0}")]
    BisectionFail(String),
    #[error("beam {0} selected more than once")]
    DuplicateBeam(usize),
    #[error("beam index {index} out of range for {m_s} beams")]
    OutOfRange { index: usize, m_s: usize },
    #[error("{candidates} candidate selections exceed the enumeration cap {cap}")]
    TooLarge { candidates: u128, cap: u128 },
    #[error("channel carries no ray metadata")]
    MissingRays,
    #[error("episode already finished")]
    EpisodeOver,
    #[error("replay holds {have} transitions, {need} needed")]
    InsufficientSamples { have: usize, need: usize },
    #[error("network architectures differ")]
    ArchMismatch,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
