//! Token codecs for symbolic music.
//!
//! [`jsb`] serializes four-voice sixteenth-note grids; [`performance`]
//! serializes expressive piano performances into note-on, note-off,
//! time-shift and velocity events. [`notes`] reads the plain-text note-list
//! format both accept.

pub mod augment;
pub mod jsb;
pub mod notes;
pub mod pedal;
pub mod performance;
pub mod tokens;

use serde::{Deserialize, Serialize};

pub use augment::augment;
pub use jsb::{jsb_deserialize, jsb_serialize, Grid};
pub use notes::{ingest_notes, parse_notes, NoteEvent, PedalEvent};
pub use pedal::apply_sustain_pedal;
pub use performance::{performance_decode, performance_encode};
pub use tokens::TokenSequence;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecId {
    JsbGrid,
    Performance,
}

impl CodecId {
    pub fn vocab_size(self) -> usize {
        match self {
            CodecId::JsbGrid => jsb::VOCAB_SIZE,
            CodecId::Performance => performance::VOCAB_SIZE,
        }
    }
}

impl std::str::FromStr for CodecId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsb" | "jsb_grid" => Ok(CodecId::JsbGrid),
            "performance" => Ok(CodecId::Performance),
            other => Err(Error::Config(format!("unknown codec {other:?} (expected jsb or performance)"))),
        }
    }
}
