//! Error classification for exit codes.

use std::fmt::Display;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Internal,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Internal => 3,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub err: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl Display) -> Self {
        Failure { kind: Kind::Usage, err: anyhow::anyhow!("{msg}") }
    }

    pub fn data(msg: impl Display) -> Self {
        Failure { kind: Kind::Data, err: anyhow::anyhow!("{msg}") }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Marks any error as a data error with a context line.
pub trait Classify<T> {
    fn data(self, context: impl Display) -> CmdResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn data(self, context: impl Display) -> CmdResult<T> {
        self.map_err(|e| Failure { kind: Kind::Data, err: e.into().context(context.to_string()) })
    }
}
