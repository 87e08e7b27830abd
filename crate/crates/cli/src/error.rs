use std::fmt;

/// Stable machine-readable error categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Usage,
    Config,
    Io,
    Data,
    Checkpoint,
    CheckpointVersion,
    Train,
    Decode,
    Eval,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::Usage => "E_USAGE",
            ErrorCode::Config => "E_CONFIG",
            ErrorCode::Io => "E_IO",
            ErrorCode::Data => "E_DATA",
            ErrorCode::Checkpoint => "E_CKPT",
            ErrorCode::CheckpointVersion => "E_CKPT_VERSION",
            ErrorCode::Train => "E_TRAIN",
            ErrorCode::Decode => "E_DECODE",
            ErrorCode::Eval => "E_EVAL",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ErrorCode::Usage | ErrorCode::Config => 2,
            ErrorCode::Io => 3,
            ErrorCode::Data => 4,
            ErrorCode::Checkpoint | ErrorCode::CheckpointVersion => 5,
            ErrorCode::Train => 6,
            ErrorCode::Decode => 7,
            ErrorCode::Eval => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: ErrorCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn io(context: impl fmt::Display, err: std::io::Error) -> Self {
        Self::new(ErrorCode::Io, format!("{context}: {err}"))
    }
}

/// `CODE: message` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message: String = self.message.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        write!(f, "{}: {}", self.code.as_str(), message)
    }
}

impl std::error::Error for CliError {}
