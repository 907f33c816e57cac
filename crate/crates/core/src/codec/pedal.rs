use super::notes::{NoteEvent, PedalEvent};

/// Intervals `[down, up)` during which the sustain pedal is held. A pedal
/// still down after the last event stays down until `end`.
pub fn sustain_intervals(pedals: &[PedalEvent], end: u64) -> Vec<(u64, u64)> {
    let mut sorted = pedals.to_vec();
    sorted.sort_by_key(|p| p.time_ms);
    let mut out = Vec::new();
    let mut down_at = None;
    for p in sorted {
        match (p.is_down(), down_at) {
            (true, None) => down_at = Some(p.time_ms),
            (false, Some(d)) => {
                out.push((d, p.time_ms));
                down_at = None;
            }
            _ => {}
        }
    }
    if let Some(d) = down_at {
        out.push((d, end.max(d)));
    }
    out
}

/// Extends notes released while the pedal is down to the pedal release or
/// the next onset of the same pitch, whichever comes first. Notes are never
/// shortened.
pub fn apply_sustain_pedal(notes: &[NoteEvent], pedals: &[PedalEvent]) -> Vec<NoteEvent> {
    if pedals.is_empty() {
        return notes.to_vec();
    }
    let end = notes.iter().map(|n| n.offset_ms).chain(pedals.iter().map(|p| p.time_ms)).max().unwrap_or(0);
    let intervals = sustain_intervals(pedals, end);
    notes
        .iter()
        .map(|n| {
            let Some(&(_, up)) = intervals.iter().find(|&&(d, u)| d <= n.offset_ms && n.offset_ms < u) else {
                return *n;
            };
            let next_same = notes
                .iter()
                .filter(|m| m.pitch == n.pitch && m.onset_ms > n.onset_ms)
                .map(|m| m.onset_ms)
                .min()
                .unwrap_or(u64::MAX);
            NoteEvent { offset_ms: n.offset_ms.max(up.min(next_same)), ..*n }
        })
        .collect()
}
