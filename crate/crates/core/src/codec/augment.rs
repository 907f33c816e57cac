use super::notes::NoteEvent;
use crate::error::{Error, Result};

pub const TRANSPOSITIONS: [i32; 7] = [-3, -2, -1, 0, 1, 2, 3];
pub const STRETCHES: [f64; 5] = [0.95, 0.975, 1.0, 1.025, 1.05];

/// Transposes by `transpose_steps` semitones and scales all times by
/// `stretch_factor`, rounding to whole milliseconds. Notes pushed outside
/// 0..=127 are dropped with a warning.
pub fn augment(notes: &[NoteEvent], transpose_steps: i32, stretch_factor: f64) -> Result<Vec<NoteEvent>> {
    if !TRANSPOSITIONS.contains(&transpose_steps) {
        return Err(Error::Config(format!("transposition {transpose_steps} outside -3..=3")));
    }
    if !STRETCHES.iter().any(|s| (s - stretch_factor).abs() < 1e-9) {
        return Err(Error::Config(format!("time stretch {stretch_factor} is not one of {STRETCHES:?}")));
    }
    let scale = |t: u64| (t as f64 * stretch_factor).round() as u64;
    let mut out = Vec::with_capacity(notes.len());
    let mut dropped = 0;
    for n in notes {
        let p = n.pitch as i32 + transpose_steps;
        if !(0..=127).contains(&p) {
            dropped += 1;
            continue;
        }
        let onset_ms = scale(n.onset_ms);
        out.push(NoteEvent { pitch: p as u8, onset_ms, offset_ms: scale(n.offset_ms).max(onset_ms + 1), ..*n });
    }
    if dropped > 0 {
        log::warn!("transposition by {transpose_steps} dropped {dropped} notes outside the MIDI range");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::performance::performance_encode;

    #[test]
    fn transposes_and_identity_stretch() {
        let n = [NoteEvent::new(60, 80, 100, 600)];
        assert_eq!(augment(&n, 3, 1.0).unwrap()[0].pitch, 63);
        assert_eq!(augment(&n, 0, 1.0).unwrap(), n.to_vec());
    }

    #[test]
    fn stretch_changes_shift_tokens() {
        let n = [NoteEvent::new(60, 80, 0, 1000)];
        let s = augment(&n, 0, 1.05).unwrap();
        assert_eq!(s[0].offset_ms, 1050);
        // TIME_SHIFT<1000> then TIME_SHIFT<50>
        assert_eq!(performance_encode(&s).unwrap(), vec![376, 60, 355, 260, 188]);
    }

    #[test]
    fn rejects_out_of_set_parameters() {
        assert!(augment(&[], 4, 1.0).is_err());
        assert!(augment(&[], 0, 1.1).is_err());
    }

    #[test]
    fn drops_notes_leaving_range() {
        let n = [NoteEvent::new(126, 80, 0, 10), NoteEvent::new(60, 80, 0, 10)];
        assert_eq!(augment(&n, 3, 1.0).unwrap().len(), 1);
    }
}
