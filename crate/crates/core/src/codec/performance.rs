use std::collections::{BTreeMap, VecDeque};

use super::notes::NoteEvent;
use crate::error::{Error, Result};
use crate::model::TokenAttributes;

pub const NOTE_ON: u32 = 0;
pub const NOTE_OFF: u32 = 128;
pub const TIME_SHIFT: u32 = 256;
pub const SET_VELOCITY: u32 = 356;
pub const VOCAB_SIZE: usize = 388;

pub const STEP_MS: u64 = 10;
pub const MAX_SHIFT_STEPS: u64 = 100;
pub const VELOCITY_BINS: u32 = 32;

/// Velocity used for note-ons that precede any velocity event.
const DEFAULT_VELOCITY: u8 = 64;

/// A decoded token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    NoteOn(u8),
    NoteOff(u8),
    /// Forward shift in 10 ms steps, 1..=100.
    TimeShift(u32),
    /// Velocity bin 0..32.
    SetVelocity(u32),
}

impl Event {
    pub fn from_id(id: u32) -> Result<Self> {
        Ok(match id {
            0..=127 => Event::NoteOn(id as u8),
            128..=255 => Event::NoteOff((id - NOTE_OFF) as u8),
            256..=355 => Event::TimeShift(id - TIME_SHIFT + 1),
            356..=387 => Event::SetVelocity(id - SET_VELOCITY),
            other => {
                return Err(Error::Format(format!("performance token {other} outside vocabulary of {VOCAB_SIZE}")))
            }
        })
    }

    pub fn id(self) -> u32 {
        match self {
            Event::NoteOn(p) => NOTE_ON + p as u32,
            Event::NoteOff(p) => NOTE_OFF + p as u32,
            Event::TimeShift(steps) => TIME_SHIFT + steps - 1,
            Event::SetVelocity(bin) => SET_VELOCITY + bin,
        }
    }
}

impl std::fmt::Display for Event {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Event::NoteOn(p) => write!(f, "NOTE_ON<{p}>"),
            Event::NoteOff(p) => write!(f, "NOTE_OFF<{p}>"),
            Event::TimeShift(s) => write!(f, "TIME_SHIFT<{}>", *s as u64 * STEP_MS),
            Event::SetVelocity(b) => write!(f, "SET_VELOCITY<{b}>"),
        }
    }
}

/// `floor(v · 32 / 128)`.
pub fn velocity_bin(velocity: u8) -> u32 {
    velocity as u32 * VELOCITY_BINS / 128
}

/// Center of a velocity bin.
pub fn bin_velocity(bin: u32) -> u8 {
    (bin * 4 + 2) as u8
}

fn quantize(ms: u64) -> u64 {
    (ms + STEP_MS / 2) / STEP_MS
}

fn push_shift(out: &mut Vec<u32>, mut steps: u64) {
    while steps > 0 {
        let s = steps.min(MAX_SHIFT_STEPS);
        out.push(Event::TimeShift(s as u32).id());
        steps -= s;
    }
}

/// Serializes notes (already pedal-extended) to event tokens.
///
/// Times are rounded to the 10 ms grid with the first onset as origin. A
/// note that quantizes to zero length keeps one step. At equal times
/// note-offs come first, then note-ons in ascending pitch, each preceded by
/// a velocity event when its bin differs from the current one.
pub fn performance_encode(notes: &[NoteEvent]) -> Result<Vec<u32>> {
    for n in notes {
        n.validate()?;
    }
    let Some(origin) = notes.iter().map(|n| quantize(n.onset_ms)).min() else {
        return Ok(Vec::new());
    };
    // (time, kind, pitch, bin); kind 0 = off, 1 = on
    let mut events = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        let on = quantize(n.onset_ms) - origin;
        let off = (quantize(n.offset_ms) - origin).max(on + 1);
        let bin = velocity_bin(n.velocity);
        events.push((on, 1u8, n.pitch, bin));
        events.push((off, 0u8, n.pitch, 0));
    }
    events.sort_unstable();

    let mut out = Vec::new();
    let mut now = 0;
    let mut current_bin = None;
    for (t, kind, pitch, bin) in events {
        push_shift(&mut out, t - now);
        now = t;
        if kind == 0 {
            out.push(Event::NoteOff(pitch).id());
        } else {
            if current_bin != Some(bin) {
                out.push(Event::SetVelocity(bin).id());
                current_bin = Some(bin);
            }
            out.push(Event::NoteOn(pitch).id());
        }
    }
    Ok(out)
}

/// Rebuilds notes on the 10 ms grid with bin-center velocities. A note-off
/// with no open note is dropped with a warning; notes still open at the end
/// close at the final time (one step later if that would leave them empty).
/// Repeated note-ons of a pitch are closed first-in, first-out.
pub fn performance_decode(tokens: &[u32]) -> Result<Vec<NoteEvent>> {
    let mut now = 0u64;
    let mut velocity = DEFAULT_VELOCITY;
    let mut open: BTreeMap<u8, VecDeque<(u64, u8)>> = BTreeMap::new();
    let mut notes = Vec::new();
    for &id in tokens {
        match Event::from_id(id)? {
            Event::TimeShift(s) => now += s as u64,
            Event::SetVelocity(b) => velocity = bin_velocity(b),
            Event::NoteOn(p) => open.entry(p).or_default().push_back((now, velocity)),
            Event::NoteOff(p) => match open.get_mut(&p).and_then(VecDeque::pop_front) {
                Some((on, vel)) => notes.push(NoteEvent::new(p, vel, on * STEP_MS, now.max(on + 1) * STEP_MS)),
                None => log::warn!("NOTE_OFF<{p}> at {} ms has no open note; dropped", now * STEP_MS),
            },
        }
    }
    for (p, queue) in open {
        for (on, vel) in queue {
            notes.push(NoteEvent::new(p, vel, on * STEP_MS, now.max(on + 1) * STEP_MS));
        }
    }
    notes.sort_by_key(|n| (n.onset_ms, n.pitch, n.offset_ms));
    Ok(notes)
}

/// Time in 10 ms steps at which each token occurs; pitch for note events.
pub fn token_attributes(tokens: &[u32]) -> TokenAttributes {
    let mut now = 0i64;
    let mut attrs = TokenAttributes::default();
    for &id in tokens {
        attrs.times.push(now);
        match Event::from_id(id) {
            Ok(Event::NoteOn(p)) | Ok(Event::NoteOff(p)) => attrs.pitches.push(Some(p)),
            Ok(Event::TimeShift(s)) => {
                attrs.pitches.push(None);
                now += s as i64;
            }
            _ => attrs.pitches.push(None),
        }
    }
    attrs
}

/// Human-readable event names.
pub fn describe(tokens: &[u32]) -> Result<Vec<String>> {
    tokens.iter().map(|&t| Event::from_id(t).map(|e| e.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_ids() {
        assert_eq!(Event::TimeShift(1).id(), 256);
        assert_eq!(Event::TimeShift(100).id(), 355);
        assert_eq!(Event::SetVelocity(31).id(), 387);
        for id in 0..VOCAB_SIZE as u32 {
            assert_eq!(Event::from_id(id).unwrap().id(), id);
        }
        assert!(Event::from_id(388).is_err());
    }

    #[test]
    fn velocity_bins() {
        assert_eq!(velocity_bin(80), 20);
        assert_eq!(velocity_bin(100), 25);
        assert_eq!(velocity_bin(127), 31);
        assert_eq!(velocity_bin(1), 0);
        for b in 0..32 {
            assert_eq!(velocity_bin(bin_velocity(b)), b);
        }
    }

    #[test]
    fn single_note() {
        let t = performance_encode(&[NoteEvent::new(60, 80, 0, 1000)]).unwrap();
        assert_eq!(t, vec![376, 60, 355, 188]);
        assert!(performance_encode(&[]).unwrap().is_empty());
    }

    #[test]
    fn long_shift_uses_maximal_chunks() {
        let t = performance_encode(&[NoteEvent::new(60, 80, 0, 1050)]).unwrap();
        assert_eq!(t, vec![376, 60, 355, 260, 188]);
    }

    #[test]
    fn stray_note_off_is_dropped_and_dangling_note_closed() {
        let notes = performance_decode(&[188, 60, 300]).unwrap();
        assert_eq!(notes, vec![NoteEvent::new(60, 64, 0, 450)]);
        let notes = performance_decode(&[60]).unwrap();
        assert_eq!(notes, vec![NoteEvent::new(60, 64, 0, 10)]);
    }

    #[test]
    fn attributes_follow_shifts() {
        let a = token_attributes(&[376, 60, 305, 64, 188]);
        assert_eq!(a.times, vec![0, 0, 0, 50, 50]);
        assert_eq!(a.pitches, vec![None, Some(60), None, Some(64), Some(60)]);
    }
}
