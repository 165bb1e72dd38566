use thiserror::Error;

/// Errors raised anywhere in the modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("training fault at sample {sample}{}: {detail}", layer.map(|l| format!(", layer {l}")).unwrap_or_default())]
    Training {
        sample: usize,
        layer: Option<usize>,
        detail: String,
    },

    #[error("sampling fault at layer {layer}: {detail}")]
    Sampling { layer: usize, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
