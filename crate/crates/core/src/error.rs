use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A weighted series term became non-finite.
    #[error("estimator overflow at term {index} (survival probability {survival:.3e})")]
    EstimatorOverflow { index: usize, survival: f64 },

    /// A truncation schedule or index distribution is unusable.
    #[error("invalid truncation schedule: {0}")]
    InvalidSchedule(String),

    /// A normalizer estimate produced a non-finite weight.
    #[error("non-finite importance weight (particle {particle}, stage {stage})")]
    NonFiniteWeight { particle: usize, stage: usize },

    /// All SMC particle weights vanished at one tempering stage.
    #[error("particle degeneracy at tempering stage {stage}")]
    Degeneracy { stage: usize },

    /// Pilot draws cannot support a tilting plan.
    #[error("degenerate normalizer source: {0}")]
    DegenerateSource(String),

    /// Monotone CFTP needs a ferromagnetic coupling.
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    /// CFTP failed to coalesce within the epoch budget.
    #[error("CFTP did not coalesce within {budget} steps")]
    CoalescenceFailure { budget: u64 },

    /// Lattice side exceeds a configured exact-method cap.
    #[error("lattice side {n} exceeds cap {cap} for {method}")]
    SizeCap { n: usize, cap: usize, method: &'static str },

    /// Every retained sign cancelled; the sign-corrected ratio is undefined.
    #[error("degenerate signs: the retained signs sum to zero")]
    DegenerateSigns,

    #[error("empty chain after burn-in")]
    EmptyChain,

    /// Adaptive quadrature failed to reach the requested tolerance.
    #[error("quadrature tolerance {requested:.3e} not reached (achieved {achieved:.3e})")]
    QuadratureTolerance { requested: f64, achieved: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Chain aborted mid-run; carries the iteration for post-mortem.
    #[error("chain aborted at iteration {iteration}: {source}")]
    ChainAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}
