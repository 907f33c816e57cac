use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sounding note. Times are in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_ms: u64,
    pub offset_ms: u64,
    /// Voice index 0..4 for chorale material.
    pub voice: Option<u8>,
}

impl NoteEvent {
    pub fn new(pitch: u8, velocity: u8, onset_ms: u64, offset_ms: u64) -> Self {
        Self { pitch, velocity, onset_ms, offset_ms, voice: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pitch > 127 || !(1..=127).contains(&self.velocity) {
            return Err(Error::Format(format!("note {self:?} has pitch or velocity out of range")));
        }
        if self.offset_ms <= self.onset_ms {
            return Err(Error::Format(format!("note {self:?} does not end after it starts")));
        }
        if self.voice.is_some_and(|v| v > 3) {
            return Err(Error::Format(format!("note {self:?} has a voice outside 0..4")));
        }
        Ok(())
    }
}

/// A sustain-pedal control change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PedalEvent {
    pub time_ms: u64,
    pub value: u8,
}

impl PedalEvent {
    pub fn is_down(&self) -> bool {
        self.value >= 64
    }
}

struct Field<'a> {
    text: &'a str,
    column: usize,
}

fn fields(line: &str) -> Vec<Field<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices().chain(std::iter::once((line.len(), ' '))) {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(Field { text: &line[s..i], column: s + 1 });
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Parses the note-list format: one record per line,
/// `note pitch velocity onset_ms offset_ms [voice]` or `pedal time_ms value`.
/// `#` starts a comment. Results are sorted chronologically.
pub fn parse_notes(text: &str, path: Option<&Path>) -> Result<(Vec<NoteEvent>, Vec<PedalEvent>)> {
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let f = fields(line);
        if f.is_empty() {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            path: path.map(Path::to_path_buf),
            line: ln + 1,
            column,
            message,
        };
        let int = |i: usize, name: &str, max: u64| -> Result<u64> {
            let fld = f.get(i).ok_or_else(|| err(line.trim_end().len() + 1, format!("missing {name}")))?;
            let v: u64 = fld
                .text
                .parse()
                .map_err(|_| err(fld.column, format!("{name} {:?} is not a non-negative integer", fld.text)))?;
            if v > max {
                return Err(err(fld.column, format!("{name} {v} is out of range (max {max})")));
            }
            Ok(v)
        };
        match f[0].text {
            "note" => {
                if f.len() > 6 {
                    return Err(err(f[6].column, "unexpected field after voice".into()));
                }
                let pitch = int(1, "pitch", 127)? as u8;
                let velocity = int(2, "velocity", 127)? as u8;
                if velocity == 0 {
                    return Err(err(f[2].column, "velocity must be at least 1".into()));
                }
                let onset_ms = int(3, "onset_ms", u64::MAX)?;
                let offset_ms = int(4, "offset_ms", u64::MAX)?;
                if offset_ms <= onset_ms {
                    return Err(err(f[4].column, format!("offset {offset_ms} is not after onset {onset_ms}")));
                }
                let voice = if f.len() == 6 { Some(int(5, "voice", 3)? as u8) } else { None };
                notes.push(NoteEvent { pitch, velocity, onset_ms, offset_ms, voice });
            }
            "pedal" => {
                if f.len() > 3 {
                    return Err(err(f[3].column, "unexpected field after value".into()));
                }
                let time_ms = int(1, "time_ms", u64::MAX)?;
                let value = int(2, "value", 127)? as u8;
                pedals.push(PedalEvent { time_ms, value });
            }
            other => return Err(err(f[0].column, format!("unknown record {other:?}; expected note or pedal"))),
        }
    }
    notes.sort_by_key(|n| (n.onset_ms, n.pitch, n.offset_ms, n.velocity, n.voice));
    pedals.sort_by_key(|p| p.time_ms);
    Ok((notes, pedals))
}

pub fn ingest_notes(path: &Path) -> Result<(Vec<NoteEvent>, Vec<PedalEvent>)> {
    let text = std::fs::read_to_string(path)?;
    parse_notes(&text, Some(path))
}

/// Renders notes and pedals in the format [`parse_notes`] reads.
pub fn format_notes(notes: &[NoteEvent], pedals: &[PedalEvent]) -> String {
    let mut out = String::new();
    for n in notes {
        out.push_str(&format!("note {} {} {} {}", n.pitch, n.velocity, n.onset_ms, n.offset_ms));
        if let Some(v) = n.voice {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    for p in pedals {
        out.push_str(&format!("pedal {} {}\n", p.time_ms, p.value));
    }
    out
}
