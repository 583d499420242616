use std::path::PathBuf;

/// Errors produced by any layer of the store.
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    // value encoding
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),

    // store file format
    #[error("path already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error("not a store file: {path}: {reason}")]
    NotAStore { path: PathBuf, reason: String },
    #[error("writer lock held on {path} (holder pid {holder})")]
    LockHeld { path: PathBuf, holder: String },
    #[error("checksum mismatch in frame at offset {offset}")]
    ChecksumMismatch { offset: u64 },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("bad locator: offset {offset}, frame length {frame_len}")]
    BadLocator { offset: u64, frame_len: u64 },
    #[error("store is open read-only")]
    ReadOnlyStore,
    #[error("master sequence violation: previous {previous}, attempted {attempted}")]
    SequenceViolation { previous: u64, attempted: u64 },

    // object store
    #[error("container already exists: {0:?}")]
    ContainerExists(String),
    #[error("no such container: {0:?}")]
    NoSuchContainer(String),
    #[error("name already exists: {name:?} in container {container:?}")]
    NameExists { container: String, name: String },
    #[error("invalid name {name:?}: {reason}")]
    InvalidName { name: String, reason: String },
    #[error("not found: {name:?} in container {container:?}")]
    NotFound { container: String, name: String },

    // catalog
    #[error("unknown store: {0:?}")]
    UnknownStore(String),
    #[error("duplicate logical name: {0:?}")]
    DuplicateLogical(String),
    #[error("catalog parse error at line {line}: {reason}")]
    CatalogParse { line: usize, reason: String },

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    /// Raised by the fault-injection harness when a planned crash point is
    /// reached. Test builds only.
    #[cfg(feature = "fault-injection")]
    #[error("simulated crash")]
    SimulatedCrash,
}

pub type Result<T> = std::result::Result<T, StoreError>;
