use super::config::{AttributeScheme, PitchTimeConfig};
use super::weights::PitchTimeWeights;
use crate::attention::LogitBias;
use crate::codec;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Per-token onset time (codec time steps) and pitch, if the token has one.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenAttributes {
    pub times: Vec<i64>,
    pub pitches: Vec<Option<u8>>,
}

impl TokenAttributes {
    pub fn from_tokens(scheme: AttributeScheme, tokens: &[u32]) -> Self {
        match scheme {
            AttributeScheme::Jsb => codec::jsb::token_attributes(tokens),
            AttributeScheme::Performance => codec::performance::token_attributes(tokens),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Extends to `len` with pitchless tokens at the last time.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        let t = self.times.last().copied().unwrap_or(0);
        out.times.resize(len.max(self.len()), t);
        out.pitches.resize(len.max(self.len()), None);
        out
    }
}

fn time_row(cfg: &PitchTimeConfig, ti: i64, tj: i64) -> usize {
    let m = cfg.max_time_distance as i64;
    ((tj - ti).clamp(-m, m) + m) as usize
}

fn pitch_row(cfg: &PitchTimeConfig, pi: Option<u8>, pj: Option<u8>) -> usize {
    let m = cfg.max_pitch_interval as i64;
    match (pi, pj) {
        (Some(a), Some(b)) => ((b as i64 - a as i64).clamp(-m, m) + m) as usize,
        _ => cfg.pitch_rows() - 1,
    }
}

fn check(cfg: &PitchTimeConfig, q: &Tensor, attrs: &TokenAttributes, e_t: &Tensor, e_p: &Tensor) -> Result<()> {
    let l = q.rows();
    if l > cfg.gather_cap {
        return Err(Error::Config(format!(
            "sequence length {l} exceeds the pitch/time gather cap {}; disable use_pitch_time_relative \
             or raise pitch_time.gather_cap",
            cfg.gather_cap
        )));
    }
    if attrs.len() < l {
        return Err(Error::config("token attributes are shorter than the sequence"));
    }
    if e_t.shape() != [cfg.time_rows(), q.cols()] {
        return Err(Error::shape("pitch_time_relative_logits", e_t.shape(), &[cfg.time_rows(), q.cols()]));
    }
    if e_p.shape() != [cfg.pitch_rows(), q.cols()] {
        return Err(Error::shape("pitch_time_relative_logits", e_p.shape(), &[cfg.pitch_rows(), q.cols()]));
    }
    Ok(())
}

/// `out[i][j] = q_i · (E^t[time(j)-time(i)] + E^p[pitch(j)-pitch(i)])` for
/// `j <= i`; zero above the diagonal. Quadratic in `L`, so refused past the
/// gather cap.
pub fn pitch_time_relative_logits(
    cfg: &PitchTimeConfig,
    q: &Tensor,
    attrs: &TokenAttributes,
    e_t: &Tensor,
    e_p: &Tensor,
) -> Result<Tensor> {
    check(cfg, q, attrs, e_t, e_p)?;
    let l = q.rows();
    let mut out = Tensor::zeros(&[l, l]);
    for i in 0..l {
        let qi = q.row(i);
        for j in 0..=i {
            let rt = time_row(cfg, attrs.times[i], attrs.times[j]);
            let rp = pitch_row(cfg, attrs.pitches[i], attrs.pitches[j]);
            out.set(i, j, dot(qi, e_t.row(rt)) + dot(qi, e_p.row(rp)));
        }
    }
    Ok(out)
}

/// Returns `(dq, dE^t, dE^p)`.
pub fn pitch_time_relative_backward(
    cfg: &PitchTimeConfig,
    q: &Tensor,
    attrs: &TokenAttributes,
    e_t: &Tensor,
    e_p: &Tensor,
    d_logits: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check(cfg, q, attrs, e_t, e_p)?;
    let (l, dh) = (q.rows(), q.cols());
    let mut dq = Tensor::zeros(q.shape());
    let mut dt = Tensor::zeros(e_t.shape());
    let mut dp = Tensor::zeros(e_p.shape());
    for i in 0..l {
        for j in 0..=i {
            let g = d_logits.get(i, j);
            if g == 0.0 {
                continue;
            }
            let rt = time_row(cfg, attrs.times[i], attrs.times[j]);
            let rp = pitch_row(cfg, attrs.pitches[i], attrs.pitches[j]);
            for c in 0..dh {
                let qc = q.get(i, c);
                dq.row_mut(i)[c] += g * (e_t.get(rt, c) + e_p.get(rp, c));
                dt.row_mut(rt)[c] += g * qc;
                dp.row_mut(rp)[c] += g * qc;
            }
        }
    }
    Ok((dq, dt, dp))
}

/// First-layer logit source for [`MultiHeadAttention`](crate::attention::MultiHeadAttention).
pub struct PitchTimeBias<'a> {
    pub cfg: &'a PitchTimeConfig,
    pub weights: &'a PitchTimeWeights,
    pub attrs: &'a TokenAttributes,
}

impl LogitBias<f64> for PitchTimeBias<'_> {
    type Grad = (Tensor, Tensor);

    fn logits(&self, head: usize, q: &Tensor) -> Result<Tensor> {
        pitch_time_relative_logits(self.cfg, q, self.attrs, &self.weights.time[head], &self.weights.pitch[head])
    }

    fn backward(&self, head: usize, q: &Tensor, d_logits: &Tensor) -> Result<(Tensor, Self::Grad)> {
        let (dq, dt, dp) = pitch_time_relative_backward(
            self.cfg,
            q,
            self.attrs,
            &self.weights.time[head],
            &self.weights.pitch[head],
            d_logits,
        )?;
        Ok((dq, (dt, dp)))
    }
}
