//! Versioned JSON checkpoints of a [`TrainState`].
//!
//! Layout: `{"format": "dualimpute-checkpoint", "version": 1, "state": …}`.
//! The state holds every tensor with its name and shape, the optimiser
//! moments and step count, the epoch counter, the generator's RNG (seed,
//! stream and word position), the loss EMAs and the history. Floats are
//! written with round-trip precision, so a load restores the state exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::TrainState;

pub const CHECKPOINT_FORMAT: &str = "dualimpute-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<S> {
    format: String,
    version: u32,
    state: S,
}

pub fn checkpoint_to_string(state: &TrainState) -> Result<String> {
    Ok(serde_json::to_string(&Envelope {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        state,
    })?)
}

pub fn checkpoint_from_str(text: &str) -> Result<TrainState> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let header: Header = serde_json::from_str(text)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
            header.format, header.version
        )));
    }
    let env: Envelope<TrainState> = serde_json::from_str(text)?;
    Ok(env.state)
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
