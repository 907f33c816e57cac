//! Central finite-difference checks of the model's analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::model::Model;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries whose true
/// gradient is near zero from being judged on round-off alone.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct SlotCheck {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub floor: f64,
    pub loss: f64,
    pub slots: Vec<SlotCheck>,
    pub max_relative_error: f64,
    pub worst_slot: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares the gradient of the mean next-token loss on `tokens` with
/// central differences of step `h` for every parameter.
pub fn check_model(model: &Model, tokens: &[u32], h: f64, floor: f64) -> Result<GradCheckReport> {
    let (loss, grads) = model.loss_and_gradients(tokens, None)?;
    let loss_at = |m: &Model| -> Result<f64> {
        let (sum, n) = m.sequence_nll(tokens)?;
        Ok(sum / n as f64)
    };
    let mut probe = model.clone();
    let names: Vec<String> = model.weights.slots().into_iter().map(|(n, _)| n).collect();
    let grad_slots = grads.slots();
    let mut slots = Vec::new();
    for (si, name) in names.iter().enumerate() {
        let analytic = grad_slots[si].1.data().to_vec();
        let mut check =
            SlotCheck { name: name.clone(), entries: analytic.len(), max_relative_error: 0.0, max_absolute_error: 0.0 };
        for (k, &a) in analytic.iter().enumerate() {
            let original = probe.weights.slots()[si].1.data()[k];
            let set = |m: &mut Model, v: f64| m.weights.slots_mut().swap_remove(si).1.data_mut()[k] = v;
            set(&mut probe, original + h);
            let up = loss_at(&probe)?;
            set(&mut probe, original - h);
            let down = loss_at(&probe)?;
            set(&mut probe, original);
            let numeric = (up - down) / (2.0 * h);
            check.max_relative_error = check.max_relative_error.max(relative_error(a, numeric, floor));
            check.max_absolute_error = check.max_absolute_error.max((a - numeric).abs());
        }
        slots.push(check);
    }
    let worst = slots
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .map(|s| (s.name.clone(), s.max_relative_error))
        .unwrap_or_default();
    Ok(GradCheckReport { step: h, floor, loss, slots, max_relative_error: worst.1, worst_slot: worst.0 })
}
