use noiseprompt_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Config(msg.into()))
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Contract(msg.into()))
    }

    pub fn aborted(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Aborted(msg.into()))
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Core(CoreError::Config(_)))
    }

    pub fn is_contract(&self) -> bool {
        matches!(self, Error::Core(CoreError::Contract(_)))
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self, Error::Core(CoreError::Aborted(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
