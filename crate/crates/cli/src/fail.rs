use std::fmt;

/// A command failure, classified by exit code.
#[derive(Debug)]
pub enum Fail {
    /// Bad flags or configuration; exit 1.
    Usage(String),
    /// Unreadable or inconsistent input files; exit 2.
    Data(String),
    /// Non-finite losses or a failed numeric check; exit 3.
    Numeric(String),
}

impl Fail {
    pub fn code(&self) -> i32 {
        match self {
            Fail::Usage(_) => 1,
            Fail::Data(_) => 2,
            Fail::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Usage(m) => write!(f, "configuration error: {m}"),
            Fail::Data(m) => write!(f, "data error: {m}"),
            Fail::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for Fail {}

impl From<oracle_attn::Error> for Fail {
    fn from(e: oracle_attn::Error) -> Self {
        use oracle_attn::Error as E;
        match e {
            E::NonFinite(_) | E::Halted { .. } => Fail::Numeric(e.to_string()),
            _ => Fail::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Data(e.to_string())
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Fail>;
