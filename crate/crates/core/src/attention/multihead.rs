use super::global::{relative_attention_global_backward, relative_attention_global_taped, GlobalTape};
use super::local::{
    relative_attention_local_backward, relative_attention_local_taped, LocalAttentionConfig, LocalTape,
};
use super::table::RelativeEmbeddingTable;
use super::{AttentionExtras, CausalMask};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Element, Tensor};

/// The four `D×D` projections of one attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<T: Element = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Element> ProjectionWeights<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    pub fn depth(&self) -> usize {
        self.wq.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Global,
    Local { block_length: usize },
}

/// Per-head relative tables for one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadTables<T: Element = f64> {
    /// Absolute attention only.
    None,
    Global(Vec<RelativeEmbeddingTable<T>>),
    Local {
        left: Vec<RelativeEmbeddingTable<T>>,
        right: Vec<RelativeEmbeddingTable<T>>,
    },
}

impl<T: Element> HeadTables<T> {
    fn check(&self, heads: usize, mode: AttentionMode) -> Result<()> {
        match (self, mode) {
            (HeadTables::None, _) => Ok(()),
            (HeadTables::Global(t), AttentionMode::Global) if t.len() == heads => Ok(()),
            (HeadTables::Local { left, right }, AttentionMode::Local { .. })
                if left.len() == heads && right.len() == heads =>
            {
                Ok(())
            }
            _ => Err(Error::config("relative tables do not match the attention mode or head count")),
        }
    }

    fn head(&self, h: usize) -> (Option<&RelativeEmbeddingTable<T>>, Option<&RelativeEmbeddingTable<T>>) {
        match self {
            HeadTables::None => (None, None),
            HeadTables::Global(t) => (Some(&t[h]), None),
            HeadTables::Local { left, right } => (Some(&right[h]), Some(&left[h])),
        }
    }
}

/// Source of additional per-head logits that depend on the head's queries.
pub trait LogitBias<T: Element> {
    type Grad;

    /// Dense `L×L` logits for `head` given its `L×D_h` queries.
    fn logits(&self, head: usize, q: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns the gradient with respect to `q` and the bias's own gradient.
    fn backward(&self, head: usize, q: &Tensor<T>, d_logits: &Tensor<T>) -> Result<(Tensor<T>, Self::Grad)>;
}

/// A [`LogitBias`] that contributes nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoBias;

impl<T: Element> LogitBias<T> for NoBias {
    type Grad = ();

    fn logits(&self, _: usize, q: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(&[q.rows(), q.rows()]))
    }

    fn backward(&self, _: usize, q: &Tensor<T>, _: &Tensor<T>) -> Result<(Tensor<T>, ())> {
        Ok((Tensor::zeros(q.shape()), ()))
    }
}

#[derive(Clone, Debug)]
enum HeadTape<T: Element> {
    Global(GlobalTape<T>),
    Local(LocalTape<T>),
}

#[derive(Clone, Debug)]
pub struct MhaTape<T: Element = f64> {
    x: Tensor<T>,
    q: Tensor<T>,
    concat: Tensor<T>,
    heads: Vec<HeadTape<T>>,
    has_bias: bool,
}

#[derive(Clone, Debug)]
pub struct MhaOutput<T: Element = f64> {
    pub y: Tensor<T>,
    /// Post-softmax weights per head, `L×L` on absolute key positions.
    pub head_weights: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct MhaGrads<T: Element, G> {
    pub dx: Tensor<T>,
    pub projections: ProjectionWeights<T>,
    /// Global or current-block table gradient per head.
    pub d_tables: Vec<Option<Tensor<T>>>,
    pub d_tables_left: Vec<Option<Tensor<T>>>,
    pub bias: Vec<G>,
}

/// Multi-head relative self-attention with output projection.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention<'a, T: Element = f64> {
    pub weights: &'a ProjectionWeights<T>,
    pub tables: &'a HeadTables<T>,
    pub heads: usize,
    pub mode: AttentionMode,
}

impl<'a, T: Element> MultiHeadAttention<'a, T> {
    fn head_dim(&self) -> Result<usize> {
        let d = self.weights.depth();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!("depth {d} is not divisible by {} heads", self.heads)));
        }
        Ok(d / self.heads)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<MhaOutput<T>> {
        self.run::<NoBias>(x, None, None, false).map(|(o, _)| o)
    }

    /// Full forward. `dropout`, if given, holds one weight mask per head.
    pub fn forward_taped<B: LogitBias<T>>(
        &self,
        x: &Tensor<T>,
        bias: Option<&B>,
        dropout: Option<&[Tensor<T>]>,
    ) -> Result<(MhaOutput<T>, MhaTape<T>)> {
        let (o, t) = self.run(x, bias, dropout, true)?;
        Ok((o, t.expect("tape requested")))
    }

    pub fn forward_with<B: LogitBias<T>>(
        &self,
        x: &Tensor<T>,
        bias: Option<&B>,
        dropout: Option<&[Tensor<T>]>,
    ) -> Result<MhaOutput<T>> {
        self.run(x, bias, dropout, false).map(|(o, _)| o)
    }

    fn run<B: LogitBias<T>>(
        &self,
        x: &Tensor<T>,
        bias: Option<&B>,
        dropout: Option<&[Tensor<T>]>,
        keep_tape: bool,
    ) -> Result<(MhaOutput<T>, Option<MhaTape<T>>)> {
        let dh = self.head_dim()?;
        let d = self.weights.depth();
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::shape("multi_head_attention", x.shape(), &[d, d]));
        }
        self.tables.check(self.heads, self.mode)?;
        if dropout.is_some_and(|m| m.len() != self.heads) {
            return Err(Error::config("need one dropout mask per head"));
        }
        let l = x.rows();
        let q = matmul(x, &self.weights.wq)?;
        let k = matmul(x, &self.weights.wk)?;
        let v = matmul(x, &self.weights.wv)?;
        let local_cfg = match self.mode {
            AttentionMode::Local { block_length } => Some(LocalAttentionConfig::new(block_length, l)?),
            AttentionMode::Global => None,
        };
        let mask = CausalMask::new(l);

        let mut concat = Tensor::zeros(&[l, d]);
        let mut head_weights = Vec::with_capacity(self.heads);
        let mut tapes = Vec::new();
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.columns(cols.clone())?;
            let kh = k.columns(cols.clone())?;
            let vh = v.columns(cols.clone())?;
            let extra = bias.map(|b| b.logits(h, &qh)).transpose()?;
            let extras = AttentionExtras { extra_logits: extra.as_ref(), dropout: dropout.map(|m| &m[h]) };
            let (main, left) = self.tables.head(h);
            let (z, weights, tape) = match local_cfg {
                None => {
                    let (out, tape) = relative_attention_global_taped(&qh, &kh, &vh, main, &mask, extras)?;
                    (out.z, out.weights, HeadTape::Global(tape))
                }
                Some(cfg) => {
                    let (out, tape) = relative_attention_local_taped(&qh, &kh, &vh, left, main, cfg, extras)?;
                    let dense = out.dense_weights();
                    (out.z, dense, HeadTape::Local(tape))
                }
            };
            concat.write_columns(h * dh, &z)?;
            head_weights.push(weights);
            if keep_tape {
                tapes.push(tape);
            }
        }
        let y = matmul(&concat, &self.weights.wo)?;
        let tape = keep_tape.then(|| MhaTape { x: x.clone(), q, concat, heads: tapes, has_bias: bias.is_some() });
        Ok((MhaOutput { y, head_weights }, tape))
    }

    pub fn backward<B: LogitBias<T>>(
        &self,
        tape: &MhaTape<T>,
        bias: Option<&B>,
        dy: &Tensor<T>,
    ) -> Result<MhaGrads<T, B::Grad>> {
        let dh = self.head_dim()?;
        if bias.is_some() != tape.has_bias {
            return Err(Error::State("logit bias does not match the recorded forward pass".into()));
        }
        let l = tape.x.rows();
        let d = self.weights.depth();
        let dwo = matmul_tn(&tape.concat, dy)?;
        let dconcat = matmul_nt(dy, &self.weights.wo)?;

        let mut dq = Tensor::zeros(&[l, d]);
        let mut dk = Tensor::zeros(&[l, d]);
        let mut dv = Tensor::zeros(&[l, d]);
        let mut d_tables = Vec::with_capacity(self.heads);
        let mut d_tables_left = Vec::with_capacity(self.heads);
        let mut bias_grads = Vec::new();
        for (h, head_tape) in tape.heads.iter().enumerate() {
            let dz = dconcat.columns(h * dh..(h + 1) * dh)?;
            let (main, left) = self.tables.head(h);
            let g = match head_tape {
                HeadTape::Global(t) => relative_attention_global_backward(t, main, &dz)?,
                HeadTape::Local(t) => relative_attention_local_backward(t, left, main, &dz)?,
            };
            let mut dqh = g.dq;
            if let Some(b) = bias {
                let qh = tape.q.columns(h * dh..(h + 1) * dh)?;
                let d_extra = g.d_extra.ok_or_else(|| Error::State("missing extra-logit gradient".into()))?;
                let (dq_bias, bg) = b.backward(h, &qh, &d_extra)?;
                dqh.add_assign(&dq_bias)?;
                bias_grads.push(bg);
            }
            dq.write_columns(h * dh, &dqh)?;
            dk.write_columns(h * dh, &g.dk)?;
            dv.write_columns(h * dh, &g.dv)?;
            d_tables.push(g.d_table);
            d_tables_left.push(g.d_table_left);
        }
        let projections = ProjectionWeights {
            wq: matmul_tn(&tape.x, &dq)?,
            wk: matmul_tn(&tape.x, &dk)?,
            wv: matmul_tn(&tape.x, &dv)?,
            wo: dwo,
        };
        let mut dx = matmul_nt(&dq, &self.weights.wq)?;
        dx.add_assign(&matmul_nt(&dk, &self.weights.wk)?)?;
        dx.add_assign(&matmul_nt(&dv, &self.weights.wv)?)?;
        Ok(MhaGrads { dx, projections, d_tables, d_tables_left, bias: bias_grads })
    }
}

/// Projects `x` to per-head queries, keys and values, runs relative
/// attention in `mode` on each head, concatenates and applies `W^O`.
pub fn multi_head_attention<T: Element>(
    x: &Tensor<T>,
    weights: &ProjectionWeights<T>,
    tables: &HeadTables<T>,
    heads: usize,
    mode: AttentionMode,
) -> Result<Tensor<T>> {
    MultiHeadAttention { weights, tables, heads, mode }.forward(x).map(|o| o.y)
}
