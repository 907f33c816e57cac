use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{Adam, AdamConfig, Schedule};
use super::transformer::Model;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Tokens per training crop. Defaults to the model's `max_len`.
    pub crop_len: Option<usize>,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub eval_every: u64,
    /// Validation window in tokens. Defaults to the crop length.
    pub eval_window: Option<usize>,
    /// Evaluations without improvement before stopping.
    pub patience: Option<usize>,
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            crop_len: None,
            peak_lr: 1e-3,
            warmup_steps: 400,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            eval_every: 250,
            eval_window: None,
            patience: Some(8),
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.crop_len.is_some_and(|c| c < 2) || self.eval_window.is_some_and(|c| c < 2) {
            return Err(Error::config("crop_len and eval_window must be at least 2"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Everything that changes while training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    schedule: Schedule,
    clip_norm: Option<f64>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Adam::new(cfg.adam, &model.weights);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            schedule: Schedule { peak_lr: cfg.peak_lr, warmup_steps: cfg.warmup_steps },
            clip_norm: cfg.clip_norm,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Resumes from a checkpoint. The data stream is reseeded from `cfg.seed` and the step.
    pub fn resume(ck: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut s = Self::new(ck.model, cfg)?;
        s.step = ck.step;
        if let Some(o) = ck.optimizer {
            s.optimizer = o;
        }
        s.rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ck.step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), step: self.step, optimizer: Some(self.optimizer.clone()) }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One optimizer update on the mean loss over `batch`.
pub fn train_step(state: &mut TrainState, batch: &[Vec<u32>]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let step = state.step + 1;
    let mut total = None;
    let mut loss = 0.0;
    for seq in batch {
        let (l, g) = state.model.loss_and_gradients(seq, Some(&mut state.rng))?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(t) => t.accumulate(&g)?,
        }
    }
    let mut grads = total.expect("non-empty batch");
    let n = batch.len() as f64;
    grads.scale_in_place(1.0 / n);
    loss /= n;
    let grad_norm = grads.sum_squares().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged { step, detail: format!("loss {loss}, gradient norm {grad_norm}") });
    }
    if let Some(c) = state.clip_norm {
        if grad_norm > c {
            grads.scale_in_place(c / grad_norm);
        }
    }
    let lr = state.schedule.lr(step);
    state.optimizer.update(&mut state.model.weights, &grads, lr)?;
    state.step = step;
    Ok(StepMetrics { step, loss, grad_norm, lr })
}

/// Random crops of `crop_len` tokens (whole sequences when shorter).
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    sequences: &[Vec<u32>],
    batch_size: usize,
    crop_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let usable: Vec<&Vec<u32>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::config("corpus has no sequence of two or more tokens"));
    }
    Ok((0..batch_size)
        .map(|_| {
            let s = usable[rng.gen_range(0..usable.len())];
            if s.len() <= crop_len {
                s.clone()
            } else {
                let start = rng.gen_range(0..=s.len() - crop_len);
                s[start..start + crop_len].to_vec()
            }
        })
        .collect())
}

/// Mean next-token NLL over non-overlapping windows of `window` tokens.
pub fn evaluate(model: &Model, sequences: &[Vec<u32>], window: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in sequences {
        let mut start = 0;
        while start + 1 < s.len() {
            let end = (start + window).min(s.len());
            let (l, n) = model.sequence_nll(&s[start..end])?;
            sum += l;
            count += n;
            start = end;
        }
    }
    if count == 0 {
        return Err(Error::config("validation set has nothing to predict"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step(StepMetrics),
    Eval { step: u64, valid_nll: f64 },
    Checkpoint(&'a TrainState),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub final_loss: f64,
    pub evaluations: Vec<(u64, f64)>,
    pub best_valid_nll: Option<f64>,
    pub stopped_early: bool,
}

/// Runs `cfg.steps` updates with periodic validation and early stopping.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    corpus: &Corpus,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let crop = cfg.crop_len.unwrap_or(state.model.config.max_len);
    let window = cfg.eval_window.unwrap_or(crop);
    let valid = if corpus.valid.is_empty() { &corpus.train } else { &corpus.valid };
    let mut report = TrainReport {
        steps: state.step,
        final_loss: f64::NAN,
        evaluations: Vec::new(),
        best_valid_nll: None,
        stopped_early: false,
    };
    let mut since_best = 0;
    while state.step < cfg.steps {
        let batch = sample_batch(&mut state.rng, &corpus.train, cfg.batch_size, crop)?;
        let m = train_step(state, &batch)?;
        report.final_loss = m.loss;
        on_event(TrainEvent::Step(m))?;
        if cfg.checkpoint_every.is_some_and(|k| k > 0 && state.step.is_multiple_of(k)) {
            on_event(TrainEvent::Checkpoint(state))?;
        }
        let last = state.step == cfg.steps;
        if cfg.eval_every > 0 && (state.step.is_multiple_of(cfg.eval_every) || last) {
            let nll = evaluate(&state.model, valid, window)?;
            report.evaluations.push((state.step, nll));
            on_event(TrainEvent::Eval { step: state.step, valid_nll: nll })?;
            if report.best_valid_nll.is_none_or(|b| nll < b) {
                report.best_valid_nll = Some(nll);
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    log::info!("validation NLL has not improved for {since_best} evaluations; stopping");
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    report.steps = state.step;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    #[test]
    fn batch_crops_have_requested_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs = vec![(0..50).collect::<Vec<u32>>(), vec![1, 2, 3]];
        for s in sample_batch(&mut rng, &seqs, 20, 10).unwrap() {
            assert!(s.len() == 10 || s == vec![1, 2, 3]);
        }
        assert!(sample_batch(&mut rng, &[vec![1]], 2, 10).is_err());
    }

    #[test]
    fn gradient_norm_is_finite_on_random_data() {
        let cfg = ModelConfig {
            vocab_size: 10,
            max_len: 16,
            depth: 8,
            heads: 2,
            layers: 1,
            feedforward_size: 8,
            ..Default::default()
        };
        let mut state = TrainState::new(Model::init(cfg).unwrap(), &TrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let batch: Vec<Vec<u32>> = (0..2).map(|_| (0..16).map(|_| rng.gen_range(0..10)).collect()).collect();
            let m = train_step(&mut state, &batch).unwrap();
            assert!(m.grad_norm.is_finite() && m.loss.is_finite());
        }
        assert_eq!(state.step, 5);
    }
}
