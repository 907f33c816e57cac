use super::config::{ModelConfig, PositionMode, PositionOverflow, INSTRUMENT_VOICES};
use super::weights::{FeedForwardWeights, NormWeights};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies gain and offset.
pub fn layer_norm(x: &Tensor, w: &NormWeights) -> Result<(Tensor, NormCache)> {
    let d = x.cols();
    if w.gain.len() != d || w.bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), w.gain.shape()));
    }
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(s);
        let (g, b) = (w.gain.data(), w.bias.data());
        for c in 0..d {
            let n = (row[c] - mean) * s;
            normalized.row_mut(i)[c] = n;
            y.row_mut(i)[c] = n * g[c] + b[c];
        }
    }
    Ok((y, NormCache { normalized, inv_std }))
}

/// Returns `(dx, d_gain, d_bias)`.
pub fn layer_norm_backward(cache: &NormCache, w: &NormWeights, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, d) = (dy.rows(), dy.cols());
    if cache.normalized.shape() != dy.shape() {
        return Err(Error::shape("layer_norm_backward", dy.shape(), cache.normalized.shape()));
    }
    let g = w.gain.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = Tensor::zeros(&[d]);
    let mut db = Tensor::zeros(&[d]);
    let mut dn = vec![0.0; d];
    for i in 0..rows {
        let n = cache.normalized.row(i);
        let dyr = dy.row(i);
        for c in 0..d {
            dg.data_mut()[c] += dyr[c] * n[c];
            db.data_mut()[c] += dyr[c];
            dn[c] = dyr[c] * g[c];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = cache.inv_std[i];
        for c in 0..d {
            dx.row_mut(i)[c] = s * (dn[c] - mean_dn - n[c] * mean_dn_n);
        }
    }
    Ok((dx, dg, db))
}

fn add_bias(m: &mut Tensor, b: &Tensor) {
    let b = b.data();
    for i in 0..m.rows() {
        for (x, &v) in m.row_mut(i).iter_mut().zip(b) {
            *x += v;
        }
    }
}

fn column_sums(m: &Tensor) -> Tensor {
    let mut s = Tensor::zeros(&[m.cols()]);
    for i in 0..m.rows() {
        for (a, &v) in s.data_mut().iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    s
}

/// `ReLU(z W₁ + b₁) W₂ + b₂`, row by row.
pub fn feedforward(z: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let ffn = FeedForwardWeights { w1: w1.clone(), b1: b1.clone(), w2: w2.clone(), b2: b2.clone() };
    feedforward_taped(z, &ffn, None).map(|(y, _)| y)
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    input: Tensor,
    /// Post-ReLU, post-dropout activations.
    hidden: Tensor,
    pre: Tensor,
    dropout: Option<Tensor>,
}

pub fn feedforward_taped(
    z: &Tensor,
    w: &FeedForwardWeights,
    dropout: Option<Tensor>,
) -> Result<(Tensor, FeedForwardCache)> {
    if w.b1.len() != w.w1.cols() || w.w2.rows() != w.w1.cols() || w.b2.len() != w.w2.cols() {
        return Err(Error::shape("feedforward", w.w1.shape(), w.w2.shape()));
    }
    let mut pre = matmul(z, &w.w1)?;
    add_bias(&mut pre, &w.b1);
    let mut hidden = pre.map(|x| x.max(0.0));
    if let Some(mask) = &dropout {
        hidden = hidden.hadamard(mask)?;
    }
    let mut y = matmul(&hidden, &w.w2)?;
    add_bias(&mut y, &w.b2);
    let cache = FeedForwardCache { input: z.clone(), hidden, pre, dropout };
    Ok((y, cache))
}

/// Returns `dz` and the four weight gradients as a [`FeedForwardWeights`].
pub fn feedforward_backward(
    cache: &FeedForwardCache,
    w: &FeedForwardWeights,
    dy: &Tensor,
) -> Result<(Tensor, FeedForwardWeights)> {
    let dw2 = matmul_tn(&cache.hidden, dy)?;
    let db2 = column_sums(dy);
    let mut dh = matmul_nt(dy, &w.w2)?;
    if let Some(mask) = &cache.dropout {
        dh = dh.hadamard(mask)?;
    }
    let dpre = dh.zip_map(&cache.pre, "relu_backward", |g, p| if p > 0.0 { g } else { 0.0 })?;
    let dw1 = matmul_tn(&cache.input, &dpre)?;
    let db1 = column_sums(&dpre);
    let dz = matmul_nt(&dpre, &w.w1)?;
    Ok((dz, FeedForwardWeights { w1: dw1, b1: db1, w2: dw2, b2: db2 }))
}

/// Sinusoid of `width` channels at `pos`: channel `2k` is
/// `sin(pos / 10000^(2k/width))` and channel `2k+1` the matching cosine.
pub fn sinusoid(pos: usize, width: usize, out: &mut [f64]) {
    for k in 0..width / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / width as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
}

/// `L×D` positional input. The token embedding fills channels
/// `0..embedding_width`; this signal fills the rest in concat modes and
/// all of them in add mode. `instruments` defaults to `position % 4`.
pub fn positional_signal(cfg: &ModelConfig, positions: &[usize], instruments: Option<&[usize]>) -> Result<Tensor> {
    cfg.validate()?;
    let d = cfg.depth;
    let mut out = Tensor::zeros(&[positions.len(), d]);
    if cfg.position_mode == PositionMode::None {
        return Ok(out);
    }
    if let Some(inst) = instruments {
        if inst.len() != positions.len() {
            return Err(Error::config("one instrument label per position is required"));
        }
    }
    let e = cfg.embedding_width();
    for (row, &p) in positions.iter().enumerate() {
        let p = if p < cfg.max_len {
            p
        } else {
            match cfg.position_overflow {
                PositionOverflow::Refuse => {
                    return Err(Error::Config(format!(
                        "position {p} is past max_len {} for absolute position mode",
                        cfg.max_len
                    )))
                }
                PositionOverflow::Wrap => p % cfg.max_len,
                PositionOverflow::Extrapolate => p,
            }
        };
        let r = out.row_mut(row);
        match cfg.position_mode {
            PositionMode::None => {}
            PositionMode::AddSinusoid => sinusoid(p, d, r),
            PositionMode::ConcatSinusoid => sinusoid(p, cfg.sinusoid_width, &mut r[e..]),
            PositionMode::ConcatSinusoidAndInstrument => {
                sinusoid(p, cfg.sinusoid_width, &mut r[e..e + cfg.sinusoid_width]);
                let voice = instruments.map_or(positions[row] % INSTRUMENT_VOICES, |v| v[row]);
                if voice >= INSTRUMENT_VOICES {
                    return Err(Error::Config(format!("instrument label {voice} out of range")));
                }
                r[e + cfg.sinusoid_width + voice] = 1.0;
            }
        }
    }
    Ok(out)
}
