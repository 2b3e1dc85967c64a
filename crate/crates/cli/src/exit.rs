use rangeseg::Error;

pub const CHECK_FAILED: u8 = 1;
pub const INPUT: u8 = 2;
pub const MISMATCH: u8 = 3;

/// A failed command: message for stderr plus process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn from_core(err: Error, context: &str) -> Self {
        anyhow::Error::new(err).context(context.to_string()).into()
    }
}

fn root(err: &Error) -> &Error {
    match err {
        Error::Stage { source, .. } => root(source),
        e => e,
    }
}

/// Parameter errors mean the weights do not fit the config; everything
/// else from the library is bad input.
impl From<anyhow::Error> for Exit {
    fn from(err: anyhow::Error) -> Self {
        match err.downcast_ref::<Error>() {
            Some(core) => {
                let code = match root(core) {
                    Error::Parameter(_) => MISMATCH,
                    _ => INPUT,
                };
                Self::new(code, format!("{err:#}"))
            }
            None => Self::new(INPUT, format!("{err:#}")),
        }
    }
}
