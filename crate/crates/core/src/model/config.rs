use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{Error, Result};

/// Number of voices carried by the instrument one-hot channels.
pub const INSTRUMENT_VOICES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Global,
    Local,
}

/// How absolute position enters the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// No absolute signal; position is seen only through relative attention.
    None,
    AddSinusoid,
    ConcatSinusoid,
    ConcatSinusoidAndInstrument,
}

/// What to do with positions at or past `max_len` in the absolute modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionOverflow {
    Refuse,
    /// Reuse positions modulo `max_len`.
    Wrap,
    /// Evaluate the sinusoid formula past the trained range.
    Extrapolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    Pre,
    Post,
}

/// Which codec's conventions give tokens their pitch and onset time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeScheme {
    Jsb,
    Performance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchTimeConfig {
    /// Time distances clip to `±max_time_distance` steps.
    pub max_time_distance: usize,
    /// Pitch intervals clip to `±max_pitch_interval` semitones.
    pub max_pitch_interval: usize,
    /// Longest sequence for which the quadratic gather is allowed.
    pub gather_cap: usize,
    pub scheme: AttributeScheme,
}

impl Default for PitchTimeConfig {
    fn default() -> Self {
        Self { max_time_distance: 64, max_pitch_interval: 24, gather_cap: 1024, scheme: AttributeScheme::Jsb }
    }
}

impl PitchTimeConfig {
    pub fn time_rows(&self) -> usize {
        2 * self.max_time_distance + 1
    }

    /// Interval rows plus the trailing "no interval" row.
    pub fn pitch_rows(&self) -> usize {
        2 * self.max_pitch_interval + 2
    }
}

/// Hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub depth: usize,
    pub heads: usize,
    pub layers: usize,
    pub feedforward_size: usize,
    pub attention: AttentionKind,
    /// Block length for local attention.
    pub block_length: usize,
    pub position_mode: PositionMode,
    pub position_overflow: PositionOverflow,
    /// Channels reserved for the sinusoid in the concat modes.
    pub sinusoid_width: usize,
    /// Defaults to `max_len / 2` in global mode.
    pub relative_max_distance: Option<usize>,
    pub use_relative: bool,
    pub use_pitch_time_relative: bool,
    pub pitch_time: PitchTimeConfig,
    pub norm: NormPlacement,
    pub dropout: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 388,
            max_len: 128,
            depth: 128,
            heads: 4,
            layers: 3,
            feedforward_size: 512,
            attention: AttentionKind::Global,
            block_length: 32,
            position_mode: PositionMode::None,
            position_overflow: PositionOverflow::Refuse,
            sinusoid_width: 32,
            relative_max_distance: None,
            use_relative: true,
            use_pitch_time_relative: false,
            pitch_time: PitchTimeConfig::default(),
            norm: NormPlacement::Pre,
            dropout: 0.1,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.max_len == 0 || self.depth == 0 || self.layers == 0 {
            return bad("vocab_size, max_len, depth and layers must be positive".into());
        }
        if self.heads == 0 || !self.depth.is_multiple_of(self.heads) {
            return bad(format!("depth {} is not divisible by {} heads", self.depth, self.heads));
        }
        if self.feedforward_size == 0 {
            return bad("feedforward_size must be positive".into());
        }
        if self.attention == AttentionKind::Local && self.block_length == 0 {
            return bad("block_length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let reserved = self.reserved_channels();
        if self.is_concat() && (self.sinusoid_width == 0 || !self.sinusoid_width.is_multiple_of(2)) {
            return bad(format!("sinusoid_width {} must be even and positive", self.sinusoid_width));
        }
        if reserved >= self.depth {
            return bad(format!(
                "concat widths do not fit: {} reserved channels leave nothing of depth {}",
                reserved, self.depth
            ));
        }
        if self.position_mode == PositionMode::AddSinusoid && !self.depth.is_multiple_of(2) {
            return bad("add_sinusoid needs an even depth".into());
        }
        if self.use_pitch_time_relative && self.pitch_time.gather_cap == 0 {
            return bad("pitch_time.gather_cap must be positive".into());
        }
        Ok(())
    }

    fn is_concat(&self) -> bool {
        matches!(self.position_mode, PositionMode::ConcatSinusoid | PositionMode::ConcatSinusoidAndInstrument)
    }

    /// Channels taken by the concatenated sinusoid and instrument labels.
    pub fn reserved_channels(&self) -> usize {
        match self.position_mode {
            PositionMode::None | PositionMode::AddSinusoid => 0,
            PositionMode::ConcatSinusoid => self.sinusoid_width,
            PositionMode::ConcatSinusoidAndInstrument => self.sinusoid_width + INSTRUMENT_VOICES,
        }
    }

    /// Width of the learned token embedding.
    pub fn embedding_width(&self) -> usize {
        self.depth - self.reserved_channels()
    }

    pub fn head_dim(&self) -> usize {
        self.depth / self.heads
    }

    pub fn attention_mode(&self) -> AttentionMode {
        match self.attention {
            AttentionKind::Global => AttentionMode::Global,
            AttentionKind::Local => AttentionMode::Local { block_length: self.block_length },
        }
    }

    /// Rows of each global relative table.
    pub fn global_table_rows(&self) -> usize {
        self.relative_max_distance.unwrap_or(self.max_len / 2) + 1
    }

    /// Rows of the (left, current-block) tables in local mode.
    pub fn local_table_rows(&self) -> (usize, usize) {
        (2 * self.block_length - 1, self.block_length)
    }

    /// Parameters in one layer's relative tables, summed over heads.
    pub fn relative_params_per_layer(&self) -> usize {
        if !self.use_relative {
            return 0;
        }
        let rows = match self.attention {
            AttentionKind::Global => self.global_table_rows(),
            AttentionKind::Local => {
                let (l, r) = self.local_table_rows();
                l + r
            }
        };
        self.heads * rows * self.head_dim()
    }

    pub fn pitch_time_params(&self) -> usize {
        if !self.use_pitch_time_relative {
            return 0;
        }
        self.heads * (self.pitch_time.time_rows() + self.pitch_time.pitch_rows()) * self.head_dim()
    }

    /// Exact number of learned scalars.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.depth, self.feedforward_size);
        let embedding = v * self.embedding_width();
        let norms = 4 * d;
        let layer = 4 * d * d + self.relative_params_per_layer() + 2 * d * f + f + d + norms;
        let head = 2 * d + d * v + v;
        embedding + self.layers * layer + self.pitch_time_params() + head
    }

    /// Checks whether a sequence of `len` positions can be processed.
    pub fn check_length(&self, len: usize) -> Result<()> {
        if len <= self.max_len
            || self.position_mode == PositionMode::None
            || self.position_overflow != PositionOverflow::Refuse
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "length {len} exceeds max_len {} and absolute positions are not available past it; \
                 set position_overflow to wrap or extrapolate to override",
                self.max_len
            )))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn concat_widths_must_fit() {
        let cfg = ModelConfig {
            depth: 36,
            heads: 4,
            sinusoid_width: 32,
            position_mode: PositionMode::ConcatSinusoidAndInstrument,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = ModelConfig { depth: 40, ..cfg };
        ok.validate().unwrap();
        assert_eq!(ok.embedding_width(), 4);
    }

    #[test]
    fn heads_must_divide_depth() {
        let cfg = ModelConfig { depth: 10, heads: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig {
            attention: AttentionKind::Local,
            block_length: 8,
            relative_max_distance: Some(5),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn refuses_long_absolute_sequences() {
        let cfg = ModelConfig { position_mode: PositionMode::AddSinusoid, max_len: 16, ..Default::default() };
        assert!(cfg.check_length(16).is_ok());
        assert!(cfg.check_length(17).is_err());
        let wrap = ModelConfig { position_overflow: PositionOverflow::Wrap, ..cfg.clone() };
        assert!(wrap.check_length(100).is_ok());
        let rel = ModelConfig { position_mode: PositionMode::None, ..cfg };
        assert!(rel.check_length(100).is_ok());
    }
}
