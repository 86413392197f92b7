use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("activation `{0}` has no analytic second derivative")]
    UnsupportedActivation(String),

    #[error("no usable Hermite order: all Gaussian derivative moments up to order {k_max} are below {threshold:e}")]
    NoValidHermiteOrder { k_max: usize, threshold: f64 },

    #[error("degenerate observation: {0}")]
    DegenerateObservation(String),

    #[error("training rollout diverged at step {step}")]
    Diverged { step: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("probe vector is nearly orthogonal to the estimated subspace (‖Vᵀa‖ = {0:e})")]
    ProbeOrthogonal(f64),

    #[error("defense `{0}` needs training data and cannot be applied to a bare gradient")]
    NotAnObservationTransform(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("candidate reconstruction produced a non-finite objective")]
    NonFiniteObjective,

    #[error("no information left: every gradient coordinate was removed")]
    NoInformation,

    #[error("no real root for the requested privacy parameters")]
    NoRealRoot,

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("config: {0}")]
    Config(String),

    #[error("output already exists at {0}; pass --force to overwrite")]
    OutputExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
