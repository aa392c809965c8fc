//! Fatal errors carry a stable code. `main` prints them as one line:
//! `error code=<CODE> message=<JSON string>`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Usage,
    Config,
    /// A required input file is absent, usually the output of an earlier stage.
    MissingInput,
    /// An input file exists but is malformed.
    Input,
    Index,
    Backend,
    Io,
    Fixtures,
    Audit,
    Internal,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::Usage => "USAGE",
            Code::Config => "CONFIG",
            Code::MissingInput => "MISSING_INPUT",
            Code::Input => "BAD_INPUT",
            Code::Index => "INDEX",
            Code::Backend => "BACKEND",
            Code::Io => "IO",
            Code::Fixtures => "FIXTURES",
            Code::Audit => "AUDIT",
            Code::Internal => "INTERNAL",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Code::Usage | Code::Config => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
pub struct Fail {
    pub code: Code,
    pub message: String,
}

impl Fail {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for Fail {}

/// The code of the first [`Fail`] in the chain, else `INTERNAL`.
pub fn code_of(err: &anyhow::Error) -> Code {
    err.chain()
        .find_map(|e| e.downcast_ref::<Fail>())
        .map_or(Code::Internal, |f| f.code)
}

pub fn render(code: Code, err: &anyhow::Error) -> String {
    let message = format!("{err:#}");
    format!(
        "error code={} message={}",
        code.as_str(),
        serde_json::to_string(&message).expect("strings serialize")
    )
}
