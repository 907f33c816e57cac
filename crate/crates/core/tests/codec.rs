use proptest::prelude::*;
use reltrans::codec::performance::{bin_velocity, describe, velocity_bin};
use reltrans::codec::{
    apply_sustain_pedal, jsb_deserialize, jsb_serialize, performance_decode, performance_encode, Grid, NoteEvent,
    PedalEvent,
};

fn chorale_grid() -> Grid {
    let s = |v: &[u8]| v.iter().map(|&p| Some(p)).collect::<Vec<_>>();
    Grid::new(vec![s(&[67, 67, 67, 67]), s(&[62, 62, 62, 62]), s(&[59, 59, 57, 57]), s(&[43, 43, 45, 45])]).unwrap()
}

#[test]
fn chorale_excerpt_serializes_exactly() {
    let tokens = jsb_serialize(&chorale_grid());
    assert_eq!(tokens, vec![67, 62, 59, 43, 67, 62, 59, 43, 67, 62, 57, 45, 67, 62, 57, 45]);
    assert_eq!(jsb_deserialize(&tokens).unwrap(), chorale_grid());
}

fn pedalled_notes() -> (Vec<NoteEvent>, Vec<PedalEvent>) {
    let notes = vec![
        NoteEvent::new(60, 80, 0, 200),
        NoteEvent::new(64, 80, 500, 700),
        NoteEvent::new(67, 80, 1000, 1200),
        NoteEvent::new(65, 100, 2500, 3000),
    ];
    let pedals = vec![PedalEvent { time_ms: 0, value: 127 }, PedalEvent { time_ms: 2000, value: 0 }];
    (notes, pedals)
}

const PEDALLED_TOKENS: [u32; 15] = [376, 60, 305, 64, 305, 67, 355, 188, 192, 195, 305, 381, 65, 305, 193];

#[test]
fn pedalled_excerpt_encodes_exactly() {
    let (notes, pedals) = pedalled_notes();
    let extended = apply_sustain_pedal(&notes, &pedals);
    assert!(extended[..3].iter().all(|n| n.offset_ms == 2000));
    assert_eq!(performance_encode(&extended).unwrap(), PEDALLED_TOKENS.to_vec());
    let names = describe(&PEDALLED_TOKENS).unwrap();
    assert_eq!(names[0], "SET_VELOCITY<20>");
    assert_eq!(velocity_bin(80), 20);
    assert_eq!(velocity_bin(100), 25);
    assert_eq!(names[6], "TIME_SHIFT<1000>");
    assert_eq!(names[7], "NOTE_OFF<60>");
}

#[test]
fn pedalled_excerpt_round_trips() {
    let (notes, pedals) = pedalled_notes();
    let extended = apply_sustain_pedal(&notes, &pedals);
    let decoded = performance_decode(&PEDALLED_TOKENS).unwrap();
    assert_eq!(decoded.len(), 4);
    for (a, b) in extended.iter().zip(&decoded) {
        assert_eq!(a.pitch, b.pitch);
        assert!(a.onset_ms.abs_diff(b.onset_ms) <= 5 && a.offset_ms.abs_diff(b.offset_ms) <= 5);
        assert!(velocity_bin(a.velocity).abs_diff(velocity_bin(b.velocity)) <= 1);
    }
}

#[test]
fn velocity_bins_partition_the_range() {
    for v in 1..=127u8 {
        let b = velocity_bin(v);
        assert!(b < 32);
        assert_eq!(b, v as u32 / 4);
        assert_eq!(velocity_bin(bin_velocity(b)), b);
    }
}

#[test]
fn encoding_is_idempotent_through_decode() {
    let (notes, pedals) = pedalled_notes();
    let once = performance_encode(&apply_sustain_pedal(&notes, &pedals)).unwrap();
    let twice = performance_encode(&performance_decode(&once).unwrap()).unwrap();
    assert_eq!(once, twice);
}

/// Notes with no same-pitch overlap, at least 10 ms long.
fn note_lists() -> impl Strategy<Value = Vec<NoteEvent>> {
    prop::collection::vec((0u8..128, 1u8..128, 0u64..20_000, 10u64..3_000), 1..40).prop_map(|raw| {
        let mut notes: Vec<NoteEvent> = Vec::new();
        for (pitch, vel, onset, dur) in raw {
            let n = NoteEvent::new(pitch, vel, onset, onset + dur);
            let clash = notes
                .iter()
                .any(|m| m.pitch == pitch && m.onset_ms <= n.offset_ms + 10 && n.onset_ms <= m.offset_ms + 10);
            if !clash {
                notes.push(n);
            }
        }
        notes
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_note_lists_round_trip(notes in note_lists()) {
        let tokens = performance_encode(&notes).unwrap();
        let decoded = performance_decode(&tokens).unwrap();
        prop_assert_eq!(decoded.len(), notes.len());
        let origin = notes.iter().map(|n| (n.onset_ms + 5) / 10 * 10).min().unwrap();
        let mut sorted = notes.clone();
        sorted.sort_by_key(|n| ((n.onset_ms + 5) / 10, n.pitch));
        for (a, b) in sorted.iter().zip(&decoded) {
            prop_assert_eq!(a.pitch, b.pitch);
            prop_assert!(a.onset_ms.abs_diff(b.onset_ms + origin) <= 5);
            prop_assert!(a.offset_ms.abs_diff(b.offset_ms + origin) <= 5);
            prop_assert!(velocity_bin(a.velocity).abs_diff(velocity_bin(b.velocity)) <= 1);
        }
        let again = performance_encode(&decoded).unwrap();
        prop_assert_eq!(again, tokens);
    }

    #[test]
    fn random_grids_round_trip(
        steps in 1usize..32,
        cells in prop::collection::vec(prop::option::weighted(0.8, 0u8..128), 128),
    ) {
        let voices: Vec<Vec<Option<u8>>> =
            (0..4).map(|v| cells[v * 32..v * 32 + steps].to_vec()).collect();
        let grid = Grid::new(voices).unwrap();
        let tokens = jsb_serialize(&grid);
        prop_assert_eq!(tokens.len(), 4 * steps);
        prop_assert_eq!(jsb_deserialize(&tokens).unwrap(), grid.clone());
        prop_assert_eq!(Grid::parse(&grid.to_text()).unwrap(), grid);
    }

    #[test]
    fn pedal_matches_event_sweep(
        notes in note_lists(),
        raw_pedals in prop::collection::vec((0u64..25_000, 0u8..128), 0..8),
    ) {
        let pedals: Vec<PedalEvent> =
            raw_pedals.into_iter().map(|(time_ms, value)| PedalEvent { time_ms, value }).collect();
        let got = apply_sustain_pedal(&notes, &pedals);
        prop_assert_eq!(got, sweep(&notes, &pedals));
    }
}

/// Walks pedal changes, onsets and releases in time order. A note released
/// with the pedal down stays held until the pedal lifts, the same pitch is
/// struck again, or the piece ends.
fn sweep(notes: &[NoteEvent], pedals: &[PedalEvent]) -> Vec<NoteEvent> {
    if pedals.is_empty() {
        return notes.to_vec();
    }
    let end = notes.iter().map(|n| n.offset_ms).chain(pedals.iter().map(|p| p.time_ms)).max().unwrap();
    // (time, order, index): pedal first, then onsets, then releases
    let mut events: Vec<(u64, u8, usize)> = Vec::new();
    for (i, p) in pedals.iter().enumerate() {
        events.push((p.time_ms, 0, i));
    }
    for (i, n) in notes.iter().enumerate() {
        events.push((n.onset_ms, 1, i));
        events.push((n.offset_ms, 2, i));
    }
    events.sort();
    let mut out = notes.to_vec();
    let mut down = false;
    let mut held: Vec<usize> = Vec::new();
    for (t, kind, i) in events {
        match kind {
            0 => {
                let pressed = pedals[i].value >= 64;
                if down && !pressed {
                    for j in held.drain(..) {
                        out[j].offset_ms = t;
                    }
                }
                down = pressed;
            }
            1 => {
                held.retain(|&j| {
                    let same = notes[j].pitch == notes[i].pitch;
                    if same {
                        out[j].offset_ms = t;
                    }
                    !same
                });
            }
            _ => {
                if down {
                    held.push(i);
                }
            }
        }
    }
    for j in held {
        out[j].offset_ms = end;
    }
    for (o, n) in out.iter_mut().zip(notes) {
        o.offset_ms = o.offset_ms.max(n.offset_ms);
    }
    out
}

#[test]
fn stray_note_off_is_dropped() {
    let notes = performance_decode(&[188, 60, 256, 188]).unwrap();
    assert_eq!(notes, vec![NoteEvent::new(60, 64, 0, 10)]);
}

#[test]
fn malformed_note_file_reports_position() {
    let err = reltrans::codec::parse_notes("note 60 80 0 100\nnote 60 80 zero 100\n", None).unwrap_err();
    assert!(matches!(err, reltrans::Error::Parse { line: 2, column: 12, .. }), "{err}");
}
