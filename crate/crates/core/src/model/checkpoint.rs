//! Versioned JSON checkpoints.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EventSsm, ModelError};

pub const CHECKPOINT_FORMAT: &str = "evssm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which phase of the decay-rate procedure produced the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStage {
    Initial,
    Free,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub lambda_stage: LambdaStage,
    pub model: EventSsm,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a checkpoint (format tag {0:?})")]
    WrongFormat(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl Checkpoint {
    pub fn new(model: EventSsm, lambda_stage: LambdaStage) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            lambda_stage,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::WrongFormat(ck.format));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(ck.version));
        }
        ck.model.validate()?;
        Ok(ck)
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<(), CheckpointError> {
        sink.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self, CheckpointError> {
        let mut text = String::new();
        source.read_to_string(&mut text)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> EventSsm {
        EventSsm::init(ModelConfig::single_stage(3, 2, 4, 4, 2), 1).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = Checkpoint::new(model(), LambdaStage::Free);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn wrong_tag_and_version_rejected() {
        let mut ck = Checkpoint::new(model(), LambdaStage::Initial);
        ck.version = 7;
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json().unwrap()),
            Err(CheckpointError::UnsupportedVersion(7))
        ));
        ck.version = CHECKPOINT_VERSION;
        ck.format = "other".into();
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json().unwrap()),
            Err(CheckpointError::WrongFormat(_))
        ));
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let mut ck = Checkpoint::new(model(), LambdaStage::Initial);
        ck.model.head_b.push(0.0);
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json().unwrap()),
            Err(CheckpointError::Model(_))
        ));
    }
}
