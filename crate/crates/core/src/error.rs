use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("adapter bank is at capacity ({0} slots)")]
    Capacity(usize),

    #[error("label {label} is not covered by this adapter (classes {classes:?})")]
    Label { label: usize, classes: Vec<usize> },

    #[error("the adapter bank is empty")]
    NoAdapter,

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("replay memory error: {0}")]
    Memory(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("corrupt checkpoint (section {section}): {reason}")]
    Checkpoint { section: String, reason: String },

    #[error("task {task} failed during {phase}: {source}")]
    Task {
        task: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn at_task(self, task: usize, phase: &'static str) -> Self {
        Error::Task {
            task,
            phase,
            source: Box::new(self),
        }
    }
}
