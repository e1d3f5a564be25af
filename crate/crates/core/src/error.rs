use thiserror::Error;

#[derive(Debug, Error)]
pub enum FsiError {
    #[error("geometry: inadmissible profile, min(1+eta) = {min:.3e} below threshold")]
    InadmissibleProfile { min: f64 },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("transform: Gateaux extrapolation disagreement {rel:.3e} exceeds tolerance")]
    IllConditioned { rel: f64 },
    #[error("transform: {0}")]
    Transform(String),
    #[error("resolution mismatch: {0}")]
    Resolution(String),
    #[error("assembly: {0}")]
    Assembly(String),
    #[error("steady state: Newton did not converge after {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("spectrum: {0}")]
    Spectrum(String),
    #[error("criterion failed: {0}")]
    Criterion(String),
    #[error("synthesis: {0}")]
    Synthesis(String),
    #[error("integration: {0}")]
    Integration(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FsiError>;

impl FsiError {
    /// Process exit code: 2 assembly, 3 configuration, 4 criterion or synthesis,
    /// 5 integration.
    pub fn exit_code(&self) -> i32 {
        match self {
            FsiError::Config(_) | FsiError::Json(_) | FsiError::Io(_) => 3,
            FsiError::Criterion(_) | FsiError::Synthesis(_) => 4,
            FsiError::Integration(_) => 5,
            _ => 2,
        }
    }
}
