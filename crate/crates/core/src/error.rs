use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty scene")]
    EmptyScene,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("texel index {index} outside {width}x{height} map")]
    TexelOutOfRange {
        index: usize,
        width: usize,
        height: usize,
    },
    #[error("no light: environment map is black")]
    NoLight,
    #[error("degenerate rng stream: drew {0}")]
    DegenerateRng(f64),
    #[error("NaN radiance at pixel ({x}, {y})")]
    NanRadiance { x: usize, y: usize },
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite loss at sample {0}")]
    NonFiniteLoss(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shell too thin: {0}")]
    ShellTooThin(String),
    #[error("degenerate estimate: channel {0} has zero mean")]
    DegenerateEstimate(usize),
    #[error("image {width}x{height} smaller than {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("divergence at iteration {iteration}: loss {loss} exceeds 1e3 x initial {initial}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io error writing image {id}: {source}")]
    ImageWrite {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyScene => "empty_scene",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::PixelOutOfBounds { .. } => "pixel_out_of_bounds",
            Error::TexelOutOfRange { .. } => "texel_out_of_range",
            Error::NoLight => "no_light",
            Error::DegenerateRng(_) => "degenerate_rng",
            Error::NanRadiance { .. } => "nan_radiance",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::NonFiniteActivation { .. } => "non_finite_activation",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ShellTooThin(_) => "shell_too_thin",
            Error::DegenerateEstimate(_) => "degenerate_estimate",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::ImageWrite { .. } => "image_write",
            Error::Json(_) => "json",
        }
    }
}
