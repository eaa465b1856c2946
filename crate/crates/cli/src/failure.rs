use rdmkit::Error;

pub const USAGE: u8 = 2;
pub const INPUT: u8 = 3;
pub const NUMERICAL: u8 = 4;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: INPUT,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: NUMERICAL,
            message: message.into(),
        }
    }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Ingestion { .. }
        | Error::Io { .. }
        | Error::Domain { .. }
        | Error::MissingResiduals
        | Error::DegreesOfFreedom { .. }
        | Error::CrossvalidationInfeasible(_) => INPUT,
        Error::Conditioning(_)
        | Error::UndefinedSimilarity(_)
        | Error::DegenerateModel(_)
        | Error::Regularization(_)
        | Error::InsufficientChannels { .. } => NUMERICAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: code_for(&e),
            message: e.to_string(),
        }
    }
}
