use thiserror::Error;

pub type Result<T, E = CirError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CirError {
    #[error("parameter {name} = {value} is outside its domain ({requirement})")]
    ParameterDomain {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    #[error("invalid moment pair: E[X^2] = {second} is below E[X]^2 = {mean_sq}")]
    MomentDomain { second: f64, mean_sq: f64 },

    #[error("theta = {0} is unsupported; theta >= 1 is required outside research mode")]
    UnsupportedTheta(f64),

    #[error("non-negativity condition 4*alpha*mu >= sigma^2 fails ({lhs} < {rhs}); use research mode to simulate anyway")]
    ConditionViolated { lhs: f64, rhs: f64 },

    #[error("state left the domain at step {step}: value {value}")]
    DomainViolation { step: usize, value: f64 },

    #[error("noise stream exhausted after {0} fine increments")]
    StreamExhausted(u64),

    #[error("insufficient paths: {0}")]
    InsufficientPaths(String),

    #[error("degenerate log-log fit: {0}")]
    DegenerateFit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
