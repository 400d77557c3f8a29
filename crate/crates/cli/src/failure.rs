use std::fmt;
use std::path::Path;

use medextract::embed_eval::EvalError;
use medextract::embeddings::EmbeddingError;
use medextract::files::FileError;
use medextract::metrics::MetricsError;
use medextract::ner::NerError;
use medextract::numkit::NumError;
use medextract::pipeline::PipelineError;
use medextract::rel::RelError;

/// Process exit status with the message printed on stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: DATA, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn non_finite(e: &NumError) -> bool {
    matches!(e, NumError::NonFiniteValue { .. })
}

fn code(config: bool, numeric: bool) -> u8 {
    if numeric {
        NUMERIC
    } else if config {
        CONFIG
    } else {
        DATA
    }
}

impl From<NerError> for Failure {
    fn from(e: NerError) -> Self {
        let c = code(matches!(e, NerError::ConfigInvalid(_)), matches!(&e, NerError::Numeric(n) if non_finite(n)));
        Failure { code: c, message: e.to_string() }
    }
}

impl From<RelError> for Failure {
    fn from(e: RelError) -> Self {
        let c = code(matches!(e, RelError::ConfigInvalid(_)), matches!(&e, RelError::Numeric(n) if non_finite(n)));
        Failure { code: c, message: e.to_string() }
    }
}

impl From<EmbeddingError> for Failure {
    fn from(e: EmbeddingError) -> Self {
        let config = matches!(e, EmbeddingError::InvalidConfig(_) | EmbeddingError::InvalidWindowSize(_));
        Failure { code: code(config, matches!(e, EmbeddingError::Diverged)), message: e.to_string() }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Ner(n) => n.into(),
            EvalError::ConfigInvalid(_) => Failure::config(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let config = matches!(e, PipelineError::ConfigInvalid(_));
        Failure { code: code(config, e.is_numeric()), message: e.to_string() }
    }
}

impl From<FileError> for Failure {
    fn from(e: FileError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::data(e.to_string())
    }
}
