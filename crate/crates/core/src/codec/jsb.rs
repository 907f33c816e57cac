use std::path::Path;

use super::notes::NoteEvent;
use crate::error::{Error, Result};
use crate::model::TokenAttributes;

/// Token id of a silent voice.
pub const REST: u32 = 128;
pub const VOCAB_SIZE: usize = 129;
pub const VOICES: usize = 4;

/// Four voices (soprano, alto, tenor, bass) by sixteenth-note steps.
/// `None` is a rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub voices: Vec<Vec<Option<u8>>>,
}

impl Grid {
    pub fn new(voices: Vec<Vec<Option<u8>>>) -> Result<Self> {
        if voices.len() != VOICES {
            return Err(Error::Format(format!("a grid needs {VOICES} voices, got {}", voices.len())));
        }
        let t = voices[0].len();
        if voices.iter().any(|v| v.len() != t) {
            return Err(Error::Format("grid voices have different lengths".into()));
        }
        if voices.iter().flatten().flatten().any(|&p| p > 127) {
            return Err(Error::Format("grid pitch above 127".into()));
        }
        Ok(Self { voices })
    }

    pub fn steps(&self) -> usize {
        self.voices[0].len()
    }

    /// Reads 4 rows of space-separated pitches, `R` for rests. Rows may be
    /// prefixed with a voice label such as `S:` and use commas.
    pub fn parse(text: &str) -> Result<Self> {
        let mut voices = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let body = match line.split_once(':') {
                Some((_, rest)) => rest,
                None => line,
            };
            let row = body
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "R" | "r" => Ok(None),
                    _ => s
                        .parse::<u8>()
                        .ok()
                        .filter(|&p| p <= 127)
                        .map(Some)
                        .ok_or_else(|| Error::Format(format!("line {}: bad grid entry {s:?}", ln + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            voices.push(row);
        }
        Self::new(voices)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.voices {
            let row: Vec<String> = v.iter().map(|p| p.map_or("R".into(), |p| p.to_string())).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Places voiced notes on a grid of `step_ms` steps. Each note covers the
    /// steps whose start lies in `[onset, offset)`.
    pub fn from_notes(notes: &[NoteEvent], step_ms: u64) -> Result<Self> {
        if notes.is_empty() {
            return Err(Error::Format("the grid codec needs notes for all four voices, got none".into()));
        }
        if step_ms == 0 {
            return Err(Error::config("step_ms must be positive"));
        }
        let origin = notes.iter().map(|n| n.onset_ms).min().unwrap_or(0);
        let end = notes.iter().map(|n| n.offset_ms).max().unwrap_or(0);
        let steps = (end - origin).div_ceil(step_ms) as usize;
        let mut voices = vec![vec![None; steps]; VOICES];
        for n in notes {
            let v =
                n.voice.ok_or_else(|| Error::Format(format!("note {n:?} has no voice for the grid codec")))? as usize;
            let first = (n.onset_ms - origin).div_ceil(step_ms) as usize;
            let last = (n.offset_ms - origin).div_ceil(step_ms) as usize;
            for slot in voices[v].iter_mut().take(last).skip(first) {
                *slot = Some(n.pitch);
            }
        }
        Self::new(voices)
    }
}

/// Interleaves the voices step by step: `S₁ A₁ T₁ B₁ S₂ A₂ T₂ B₂ …`.
pub fn jsb_serialize(grid: &Grid) -> Vec<u32> {
    let mut out = Vec::with_capacity(grid.steps() * VOICES);
    for t in 0..grid.steps() {
        for v in &grid.voices {
            out.push(v[t].map_or(REST, u32::from));
        }
    }
    out
}

pub fn jsb_deserialize(tokens: &[u32]) -> Result<Grid> {
    if !tokens.len().is_multiple_of(VOICES) {
        return Err(Error::Format(format!("{} grid tokens do not divide into {VOICES} voices", tokens.len())));
    }
    let mut voices = vec![Vec::with_capacity(tokens.len() / VOICES); VOICES];
    for (i, &t) in tokens.iter().enumerate() {
        let entry = match t {
            REST => None,
            p if p < 128 => Some(p as u8),
            other => return Err(Error::Format(format!("grid token {other} outside vocabulary of {VOCAB_SIZE}"))),
        };
        voices[i % VOICES].push(entry);
    }
    Grid::new(voices)
}

/// Time is the sixteenth-note step; rests carry no pitch.
pub fn token_attributes(tokens: &[u32]) -> TokenAttributes {
    TokenAttributes {
        times: (0..tokens.len()).map(|i| (i / VOICES) as i64).collect(),
        pitches: tokens.iter().map(|&t| (t < 128).then_some(t as u8)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_column_round_trips() {
        let g = Grid::new(vec![vec![Some(60)], vec![None], vec![Some(50)], vec![Some(40)]]).unwrap();
        assert_eq!(jsb_serialize(&g), vec![60, REST, 50, 40]);
        assert_eq!(jsb_deserialize(&jsb_serialize(&g)).unwrap(), g);
    }

    #[test]
    fn wrong_voice_count_is_a_format_error() {
        assert!(matches!(Grid::new(vec![vec![Some(1)]; 3]), Err(Error::Format(_))));
        assert!(jsb_deserialize(&[1, 2, 3]).is_err());
        assert!(jsb_deserialize(&[1, 2, 3, 129]).is_err());
    }

    #[test]
    fn grid_text_round_trip() {
        let g = Grid::parse("S: 67, 67\nA: 62 R\n59 59\n43 43\n").unwrap();
        assert_eq!(g.voices[1], vec![Some(62), None]);
        assert_eq!(Grid::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn from_notes_places_voices() {
        let mut notes = vec![];
        for (v, p) in [(0u8, 67u8), (1, 62), (2, 59), (3, 43)] {
            notes.push(NoteEvent { voice: Some(v), ..NoteEvent::new(p, 80, 0, 250) });
        }
        let g = Grid::from_notes(&notes, 125).unwrap();
        assert_eq!(jsb_serialize(&g), vec![67, 62, 59, 43, 67, 62, 59, 43]);
        assert!(Grid::from_notes(&[], 125).is_err());
    }
}
