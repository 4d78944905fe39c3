use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateMask { row: usize },

    #[error("index {id} out of range for table with {len} rows")]
    Index { id: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: non-finite gradient in parameter `{0}`")]
    Divergence(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("every target position is masked")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("scene `{0}` has no proposal above the detection threshold")]
    EmptyScene(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensors do not match the model: {}", ShapeList(.0))]
    CheckpointShape(Vec<ShapeMismatch>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMismatch {
    pub name: String,
    pub expected: Option<Vec<usize>>,
    pub found: Option<Vec<usize>>,
}

struct ShapeList<'a>(&'a [ShapeMismatch]);

impl fmt::Display for ShapeList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match (&m.expected, &m.found) {
                (Some(e), Some(g)) => write!(f, "{} (expected {:?}, found {:?})", m.name, e, g)?,
                (Some(e), None) => write!(f, "{} (expected {:?}, missing)", m.name, e)?,
                (None, Some(g)) => write!(f, "{} (unexpected, shape {:?})", m.name, g)?,
                (None, None) => write!(f, "{}", m.name)?,
            }
        }
        Ok(())
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by numbers rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence(_) | Error::NonFinite(_) | Error::NonFiniteLoss { .. })
    }
}
