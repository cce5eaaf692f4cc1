use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected into {} components: {}", components.len(), describe_components(components))]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("matrix is not positive semi-definite: eigenvalue {min_eigenvalue:e} against largest {max_eigenvalue:e}")]
    NotPsd {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("fixed-effect design is rank deficient: column(s) {columns:?} of [1 : X] depend on earlier columns")]
    Collinear { columns: Vec<usize> },

    #[error("ill-posed constraints: {0}")]
    IllPosedConstraints(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("covariate column {0} has zero variance")]
    ZeroVariance(usize),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure at outer iteration {outer}, inner iteration {inner}: {message}")]
    Numerical {
        outer: usize,
        inner: usize,
        message: String,
    },

    #[error("variance component labels do not match: {0}")]
    LabelMismatch(String),

    #[error("{model} not fitted because {prerequisite} failed: {source}")]
    Upstream {
        model: String,
        prerequisite: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

fn describe_components(components: &[Vec<usize>]) -> String {
    components
        .iter()
        .map(|c| {
            let shown: Vec<String> = c.iter().take(8).map(|i| (i + 1).to_string()).collect();
            if c.len() > 8 {
                format!("{{{}, ...}}", shown.join(", "))
            } else {
                format!("{{{}}}", shown.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 2 = validation, 4 = I/O, 5 = numerical. Non-convergence is not an
    /// error value; the CLI maps it to 3 itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::Csv(e) if e.is_io_error() => 4,
            Error::Numerical { .. } | Error::Singular(_) | Error::IllPosedConstraints(_) => 5,
            Error::Upstream { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
