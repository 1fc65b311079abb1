use thiserror::Error;

/// Errors raised across the detection engine.
#[derive(Debug, Error)]
pub enum DcfError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel mismatch: input has {input} channels but the kernel bank expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },

    #[error("same padding needs an odd kernel size, got {0}")]
    EvenKernelSame(usize),

    #[error("input {height}x{width} is smaller than the required minimum of {required}x{required}")]
    TooSmall {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("corrupt weight file: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad value for config key `{key}`: {value}")]
    ConfigValue { key: String, value: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DcfError>;
