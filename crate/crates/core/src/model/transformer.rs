use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AttentionKind, ModelConfig, NormPlacement, PositionMode};
use super::layers::{
    feedforward_backward, feedforward_taped, layer_norm, layer_norm_backward, positional_signal, FeedForwardCache,
    NormCache,
};
use super::pitch_time::{PitchTimeBias, TokenAttributes};
use super::weights::{ModelWeights, NormWeights};
use crate::attention::{HeadTables, MhaGrads, MhaTape, MultiHeadAttention, NoBias};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Post-softmax attention weights for selected query positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sequence_length: usize,
    pub heads: Vec<HeadTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub layer: usize,
    pub head: usize,
    pub rows: Vec<TraceRow>,
}

/// Weights of one query over keys `0..=query`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub query: usize,
    pub weights: Vec<f64>,
}

struct LayerTape {
    norm1: NormCache,
    norm2: NormCache,
    mha: MhaTape,
    ffn: FeedForwardCache,
}

struct Tape {
    tokens: Vec<u32>,
    attrs: Option<TokenAttributes>,
    layers: Vec<LayerTape>,
    final_norm: NormCache,
    normalized: Tensor,
}

struct Run {
    logits: Tensor,
    tape: Option<Tape>,
    head_weights: Vec<Vec<Tensor>>,
}

/// A configured decoder and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

fn add_bias_row(m: &mut Tensor, b: &Tensor) {
    for i in 0..m.rows() {
        for (x, &v) in m.row_mut(i).iter_mut().zip(b.data()) {
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

fn dropout_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Mean cross-entropy of `logits` rows against `targets`, and its gradient.
pub fn nll_with_grad(logits: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape("nll", logits.shape(), &[targets.len()]));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::Config(format!("target {t} outside vocabulary of {}", row.len())));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[t];
        let g = grad.row_mut(i);
        for (c, x) in row.iter().enumerate() {
            g[c] = (x - lse).exp() / n;
        }
        g[t] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

/// Mean negative log-likelihood in nats.
pub fn loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    nll_with_grad(logits, targets).map(|(l, _)| l)
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let expected = ModelWeights::zeros(&config)?.slot_shapes();
        if weights.slot_shapes() != expected {
            return Err(Error::Checkpoint("weights do not match the model configuration".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let weights = ModelWeights::init(&config)?;
        Ok(Self { config, weights })
    }

    /// Logits `L×V` for every position of `tokens`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.run(tokens, None, false, false)?.logits)
    }

    /// Forward pass that also exports attention weights for `queries`
    /// (all positions when `None`).
    pub fn forward_with_trace(&self, tokens: &[u32], queries: Option<&[usize]>) -> Result<(Tensor, AttentionTrace)> {
        let run = self.run(tokens, None, false, true)?;
        let all: Vec<usize> = (0..tokens.len()).collect();
        let queries = queries.unwrap_or(&all);
        if let Some(&q) = queries.iter().find(|&&q| q >= tokens.len()) {
            return Err(Error::Config(format!("trace query {q} outside sequence of {}", tokens.len())));
        }
        let mut heads = Vec::new();
        for (layer, per_head) in run.head_weights.iter().enumerate() {
            for (head, w) in per_head.iter().enumerate() {
                let rows = queries.iter().map(|&q| TraceRow { query: q, weights: w.row(q)[..=q].to_vec() }).collect();
                heads.push(HeadTrace { layer, head, rows });
            }
        }
        let trace = AttentionTrace { sequence_length: tokens.len(), heads };
        Ok((run.logits, trace))
    }

    /// Shifted next-token NLL of a whole sequence: `(sum, count)`.
    pub fn sequence_nll(&self, tokens: &[u32]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Ok((0.0, 0));
        }
        let logits = self.forward(&tokens[..tokens.len() - 1])?;
        let n = tokens.len() - 1;
        Ok((loss(&logits, &tokens[1..])? * n as f64, n))
    }

    /// Mean shifted NLL of `tokens` and the gradient of every parameter.
    /// Dropout is applied when `rng` is given.
    pub fn loss_and_gradients(&self, tokens: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<(f64, ModelWeights)> {
        if tokens.len() < 2 {
            return Err(Error::config("need at least two tokens for a next-token loss"));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let run = self.run(inputs, rng, true, false)?;
        let (value, dlogits) = nll_with_grad(&run.logits, &tokens[1..])?;
        let grads = self.backward(run.tape.expect("taped run"), &dlogits)?;
        Ok((value, grads))
    }

    fn padded_len(&self, len: usize) -> usize {
        match self.config.attention {
            AttentionKind::Global => len,
            AttentionKind::Local => len.div_ceil(self.config.block_length) * self.config.block_length,
        }
    }

    fn embed(&self, tokens: &[u32], len: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let e = cfg.embedding_width();
        let mut x = if cfg.position_mode == PositionMode::None {
            Tensor::zeros(&[tokens.len(), cfg.depth])
        } else {
            // padding rows reuse the last real position; they never reach real outputs
            let positions: Vec<usize> = (0..tokens.len()).map(|i| i.min(len - 1)).collect();
            positional_signal(cfg, &positions, None)?
        };
        for (i, &t) in tokens.iter().enumerate() {
            let src = self.weights.embedding.row(t as usize);
            for (a, &b) in x.row_mut(i)[..e].iter_mut().zip(src) {
                *a += b;
            }
        }
        Ok(x)
    }

    fn run(&self, tokens: &[u32], mut rng: Option<&mut ChaCha8Rng>, keep: bool, trace: bool) -> Result<Run> {
        let cfg = &self.config;
        let len = tokens.len();
        if len == 0 {
            return Err(Error::config("empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Config(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        cfg.check_length(len)?;
        let lp = self.padded_len(len);
        let mut padded = tokens.to_vec();
        padded.resize(lp, 0);

        let attrs =
            cfg.use_pitch_time_relative.then(|| TokenAttributes::from_tokens(cfg.pitch_time.scheme, tokens).padded(lp));
        let p = if rng.is_some() { cfg.dropout } else { 0.0 };
        let attn_mask_shape = match cfg.attention {
            AttentionKind::Global => [lp, lp],
            AttentionKind::Local => [lp, 2 * cfg.block_length],
        };

        let mut x = self.embed(&padded, len)?;
        let mut layer_tapes = Vec::new();
        let mut head_weights = Vec::new();
        for (li, lw) in self.weights.layers.iter().enumerate() {
            let mha = MultiHeadAttention {
                weights: &lw.attention,
                tables: &lw.tables,
                heads: cfg.heads,
                mode: cfg.attention_mode(),
            };
            let mut attn_drop = None;
            let mut ffn_drop = None;
            if let (Some(r), true) = (rng.as_deref_mut(), p > 0.0) {
                attn_drop = Some((0..cfg.heads).map(|_| dropout_mask(r, &attn_mask_shape, p)).collect::<Vec<_>>());
                ffn_drop = Some(dropout_mask(r, &[lp, cfg.feedforward_size], p));
            }
            let attend = |input: &Tensor| match (&self.weights.pitch_time, &attrs, li) {
                (Some(pt), Some(a), 0) => {
                    let bias = PitchTimeBias { cfg: &cfg.pitch_time, weights: pt, attrs: a };
                    mha.forward_taped(input, Some(&bias), attn_drop.as_deref())
                }
                _ => mha.forward_taped::<NoBias>(input, None, attn_drop.as_deref()),
            };
            let (next, tape, weights) = match cfg.norm {
                NormPlacement::Pre => {
                    let (a, norm1) = layer_norm(&x, &lw.norm1)?;
                    let (out, mha_tape) = attend(&a)?;
                    let h = x.add(&out.y)?;
                    let (b, norm2) = layer_norm(&h, &lw.norm2)?;
                    let (f, ffn) = feedforward_taped(&b, &lw.ffn, ffn_drop)?;
                    let y = h.add(&f)?;
                    (y, LayerTape { norm1, norm2, mha: mha_tape, ffn }, out.head_weights)
                }
                NormPlacement::Post => {
                    let (out, mha_tape) = attend(&x)?;
                    let (h, norm1) = layer_norm(&x.add(&out.y)?, &lw.norm1)?;
                    let (f, ffn) = feedforward_taped(&h, &lw.ffn, ffn_drop)?;
                    let (y, norm2) = layer_norm(&h.add(&f)?, &lw.norm2)?;
                    (y, LayerTape { norm1, norm2, mha: mha_tape, ffn }, out.head_weights)
                }
            };
            x = next;
            if keep {
                layer_tapes.push(tape);
            }
            if trace {
                head_weights.push(weights);
            }
        }
        let (normalized, final_norm) = layer_norm(&x, &self.weights.final_norm)?;
        let mut logits = matmul(&normalized, &self.weights.w_out)?;
        add_bias_row(&mut logits, &self.weights.b_out);
        if lp != len {
            logits = logits.row_block(0..len)?;
        }
        let tape = keep.then(|| Tape { tokens: padded, attrs, layers: layer_tapes, final_norm, normalized });
        Ok(Run { logits, tape, head_weights })
    }

    fn backward(&self, tape: Tape, dlogits: &Tensor) -> Result<ModelWeights> {
        let cfg = &self.config;
        let w = &self.weights;
        let lp = tape.tokens.len();
        let mut grads = w.zeros_like();
        let mut dl = Tensor::zeros(&[lp, cfg.vocab_size]);
        for i in 0..dlogits.rows() {
            dl.row_mut(i).copy_from_slice(dlogits.row(i));
        }

        grads.w_out = matmul_tn(&tape.normalized, &dl)?;
        grads.b_out = column_sums(&dl);
        let dy = matmul_nt(&dl, &w.w_out)?;
        let (mut dx, dg, db) = layer_norm_backward(&tape.final_norm, &w.final_norm, &dy)?;
        grads.final_norm = NormWeights { gain: dg, bias: db };

        for (li, lt) in tape.layers.iter().enumerate().rev() {
            let lw = &w.layers[li];
            let mha = MultiHeadAttention {
                weights: &lw.attention,
                tables: &lw.tables,
                heads: cfg.heads,
                mode: cfg.attention_mode(),
            };
            let attend_back = |d: &Tensor, grads: &mut ModelWeights| -> Result<Tensor> {
                let g = match (&w.pitch_time, &tape.attrs, li) {
                    (Some(pt), Some(a), 0) => {
                        let bias = PitchTimeBias { cfg: &cfg.pitch_time, weights: pt, attrs: a };
                        let g = mha.backward(&lt.mha, Some(&bias), d)?;
                        let gpt = grads.pitch_time.as_mut().expect("pitch/time grads");
                        for (h, (dt, dp)) in g.bias.iter().enumerate() {
                            gpt.time[h] = dt.clone();
                            gpt.pitch[h] = dp.clone();
                        }
                        strip_bias(g)
                    }
                    _ => mha.backward::<NoBias>(&lt.mha, None, d)?,
                };
                store_attention_grads(&mut grads.layers[li], g.projections, &g.d_tables, &g.d_tables_left)?;
                Ok(g.dx)
            };
            match cfg.norm {
                NormPlacement::Pre => {
                    let (db_in, dffn) = feedforward_backward(&lt.ffn, &lw.ffn, &dx)?;
                    let (dh2, dg2, db2) = layer_norm_backward(&lt.norm2, &lw.norm2, &db_in)?;
                    let mut dh = dx;
                    dh.add_assign(&dh2)?;
                    let da = attend_back(&dh, &mut grads)?;
                    let (dx1, dg1, db1) = layer_norm_backward(&lt.norm1, &lw.norm1, &da)?;
                    dh.add_assign(&dx1)?;
                    dx = dh;
                    let gl = &mut grads.layers[li];
                    gl.ffn = dffn;
                    gl.norm1 = NormWeights { gain: dg1, bias: db1 };
                    gl.norm2 = NormWeights { gain: dg2, bias: db2 };
                }
                NormPlacement::Post => {
                    let (ds2, dg2, db2) = layer_norm_backward(&lt.norm2, &lw.norm2, &dx)?;
                    let (dhf, dffn) = feedforward_backward(&lt.ffn, &lw.ffn, &ds2)?;
                    let dh = ds2.add(&dhf)?;
                    let (mut ds1, dg1, db1) = layer_norm_backward(&lt.norm1, &lw.norm1, &dh)?;
                    let da = attend_back(&ds1, &mut grads)?;
                    ds1.add_assign(&da)?;
                    dx = ds1;
                    let gl = &mut grads.layers[li];
                    gl.ffn = dffn;
                    gl.norm1 = NormWeights { gain: dg1, bias: db1 };
                    gl.norm2 = NormWeights { gain: dg2, bias: db2 };
                }
            }
        }

        let e = cfg.embedding_width();
        for (i, &t) in tape.tokens.iter().enumerate() {
            let dst = grads.embedding.row_mut(t as usize);
            for (a, &b) in dst.iter_mut().zip(&dx.row(i)[..e]) {
                *a += b;
            }
        }
        Ok(grads)
    }
}

fn strip_bias<G>(g: MhaGrads<f64, G>) -> MhaGrads<f64, ()> {
    MhaGrads {
        dx: g.dx,
        projections: g.projections,
        d_tables: g.d_tables,
        d_tables_left: g.d_tables_left,
        bias: Vec::new(),
    }
}

fn store_attention_grads(
    layer: &mut super::weights::LayerWeights,
    projections: crate::attention::ProjectionWeights,
    d_tables: &[Option<Tensor>],
    d_tables_left: &[Option<Tensor>],
) -> Result<()> {
    layer.attention = projections;
    let missing = || Error::State("missing relative table gradient".into());
    match &mut layer.tables {
        HeadTables::None => {}
        HeadTables::Global(t) => {
            for (h, table) in t.iter_mut().enumerate() {
                *table.embeddings_mut() = d_tables[h].clone().ok_or_else(missing)?;
            }
        }
        HeadTables::Local { left, right } => {
            for h in 0..left.len() {
                *right[h].embeddings_mut() = d_tables[h].clone().ok_or_else(missing)?;
                *left[h].embeddings_mut() = d_tables_left[h].clone().ok_or_else(missing)?;
            }
        }
    }
    Ok(())
}
