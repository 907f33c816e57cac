use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::{AttentionTrace, Model};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    /// Total length including the prime.
    pub length: usize,
    /// `0` picks the most likely token.
    pub temperature: f64,
    pub seed: u64,
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<u32>,
    /// Attention of every sampled position over the final sequence.
    pub trace: Option<AttentionTrace>,
}

fn pick(rng: &mut ChaCha8Rng, logits: &[f64], temperature: f64) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in w.iter().enumerate() {
        if u < p {
            return i as u32;
        }
        u -= p;
    }
    (w.len() - 1) as u32
}

/// Extends `prime` autoregressively to `opts.length` tokens.
pub fn sample(model: &Model, prime: &[u32], opts: &SampleOptions) -> Result<SampleOutput> {
    if prime.is_empty() {
        return Err(Error::config("sampling needs at least one prime token"));
    }
    if prime.len() >= opts.length {
        return Err(Error::Config(format!(
            "prime of {} tokens is not shorter than the requested length {}",
            prime.len(),
            opts.length
        )));
    }
    if !(opts.temperature >= 0.0) || !opts.temperature.is_finite() {
        return Err(Error::config("temperature must be a non-negative number"));
    }
    model.config.check_length(opts.length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tokens = prime.to_vec();
    while tokens.len() < opts.length {
        let logits = model.forward(&tokens)?;
        let next = pick(&mut rng, logits.row(tokens.len() - 1), opts.temperature);
        tokens.push(next);
    }
    let trace = if opts.trace {
        let queries: Vec<usize> = (prime.len()..tokens.len()).collect();
        Some(model.forward_with_trace(&tokens, Some(&queries))?.1)
    } else {
        None
    };
    Ok(SampleOutput { tokens, trace })
}
