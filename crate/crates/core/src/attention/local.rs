//! Blocked local attention: the sequence is cut into `M` blocks of `N`
//! positions and each block attends to itself (causally) and, unmasked, to
//! the block before it.

use super::global::add_rows;
use super::skew::{skew_global_backward, skew_global_owned, skew_local, skew_local_backward};
use super::table::{RelativeEmbeddingTable, TableMode};
use super::{AttentionExtras, AttentionGrads};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Element, Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalAttentionConfig {
    block_length: usize,
    num_blocks: usize,
}

impl LocalAttentionConfig {
    pub fn new(block_length: usize, seq_len: usize) -> Result<Self> {
        if block_length == 0 {
            return Err(Error::config("block length must be at least 1"));
        }
        if !seq_len.is_multiple_of(block_length) {
            return Err(Error::config(format!(
                "sequence length {seq_len} is not a multiple of block length {block_length}"
            )));
        }
        Ok(Self { block_length, num_blocks: seq_len / block_length })
    }

    pub fn block_length(&self) -> usize {
        self.block_length
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn seq_len(&self) -> usize {
        self.block_length * self.num_blocks
    }
}

/// Output of local attention. `weights` is `L × 2N`: for the queries of
/// block `b`, columns `0..N` address the keys of block `b-1` and columns
/// `N..2N` the keys of block `b`.
#[derive(Clone, Debug)]
pub struct LocalAttentionOutput<T: Element = f64> {
    pub z: Tensor<T>,
    pub weights: Tensor<T>,
    pub block_length: usize,
}

impl<T: Element> LocalAttentionOutput<T> {
    /// Weights scattered onto absolute key positions, `L × L`.
    pub fn dense_weights(&self) -> Tensor<T> {
        densify(&self.weights, self.block_length)
    }
}

pub(crate) fn densify<T: Element>(weights: &Tensor<T>, n: usize) -> Tensor<T> {
    let l = weights.rows();
    let mut out = Tensor::zeros(&[l, l]);
    for i in 0..l {
        let b = i / n;
        let row = weights.row(i);
        if b > 0 {
            out.row_mut(i)[(b - 1) * n..b * n].copy_from_slice(&row[..n]);
        }
        out.row_mut(i)[b * n..(b + 1) * n].copy_from_slice(&row[n..]);
    }
    out
}

#[derive(Clone, Debug)]
pub struct LocalTape<T: Element = f64> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    cfg: LocalAttentionConfig,
    right_effective: Option<Tensor<T>>,
    has_left: bool,
    weights: Tensor<T>,
    dropout: Option<Tensor<T>>,
    has_extra: bool,
}

impl<T: Element> LocalTape<T> {
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
}

fn check_tables<T: Element>(
    dh: usize,
    left: Option<&RelativeEmbeddingTable<T>>,
    right: Option<&RelativeEmbeddingTable<T>>,
    cfg: &LocalAttentionConfig,
) -> Result<()> {
    if let Some(left) = left {
        if left.mode() != TableMode::LocalLeft {
            return Err(Error::config("previous-block table must be in local-left mode"));
        }
        if left.num_distances() != 2 * cfg.block_length - 1 {
            return Err(Error::config(format!(
                "local-left table has {} rows, block length {} needs {}",
                left.num_distances(),
                cfg.block_length,
                2 * cfg.block_length - 1
            )));
        }
        if left.head_dim() != dh {
            return Err(Error::shape("local-left table", left.embeddings().shape(), &[dh]));
        }
    }
    if let Some(right) = right {
        if right.mode() != TableMode::Global {
            return Err(Error::config("current-block table must be in global mode"));
        }
        if right.head_dim() != dh {
            return Err(Error::shape("current-block table", right.embeddings().shape(), &[dh]));
        }
    }
    Ok(())
}

/// Relative local attention for one head.
///
/// `extras.extra_logits`, when present, is a dense `L×L` matrix from which
/// the two-block span is read; `extras.dropout` is shaped like the weights.
pub fn relative_attention_local<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table_left: Option<&RelativeEmbeddingTable<T>>,
    table_right: Option<&RelativeEmbeddingTable<T>>,
    cfg: LocalAttentionConfig,
    extras: AttentionExtras<'_, T>,
) -> Result<LocalAttentionOutput<T>> {
    forward(q, k, v, table_left, table_right, cfg, extras, false).map(|(o, _)| o)
}

#[allow(clippy::too_many_arguments)]
pub fn relative_attention_local_taped<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table_left: Option<&RelativeEmbeddingTable<T>>,
    table_right: Option<&RelativeEmbeddingTable<T>>,
    cfg: LocalAttentionConfig,
    extras: AttentionExtras<'_, T>,
) -> Result<(LocalAttentionOutput<T>, LocalTape<T>)> {
    let (o, t) = forward(q, k, v, table_left, table_right, cfg, extras, true)?;
    Ok((o, t.expect("tape requested")))
}

#[allow(clippy::too_many_arguments)]
fn forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table_left: Option<&RelativeEmbeddingTable<T>>,
    table_right: Option<&RelativeEmbeddingTable<T>>,
    cfg: LocalAttentionConfig,
    extras: AttentionExtras<'_, T>,
    keep_tape: bool,
) -> Result<(LocalAttentionOutput<T>, Option<LocalTape<T>>)> {
    let l = q.rows();
    if q.rank() != 2 || k.shape() != q.shape() || v.rows() != l {
        return Err(Error::shape("relative_attention_local", q.shape(), k.shape()));
    }
    if cfg.seq_len() != l {
        return Err(Error::config(format!("local config covers {} positions, input has {l}", cfg.seq_len())));
    }
    let dh = q.cols();
    check_tables(dh, table_left, table_right, &cfg)?;
    let n = cfg.block_length;
    if let Some(extra) = extras.extra_logits {
        if extra.shape() != [l, l] {
            return Err(Error::shape("local extra logits", extra.shape(), &[l, l]));
        }
    }
    if let Some(d) = extras.dropout {
        if d.shape() != [l, 2 * n] {
            return Err(Error::shape("local dropout mask", d.shape(), &[l, 2 * n]));
        }
    }
    let scale = T::from_f64((dh as f64).sqrt());
    let right_effective = table_right.map(|t| t.gather_global(n)).transpose()?;

    let mut weights = Tensor::zeros(&[l, 2 * n]);
    let mut z = Tensor::zeros(&[l, v.cols()]);
    let first_mask = Mask::from_fn(n, 2 * n, |i, j| j >= n && j - n <= i);
    let mask = Mask::from_fn(n, 2 * n, |i, j| j < n || j - n <= i);

    for b in 0..cfg.num_blocks {
        let rows = b * n..(b + 1) * n;
        let qb = q.row_block(rows.clone())?;
        let kb = k.row_block(rows.clone())?;
        let vb = v.row_block(rows.clone())?;

        let mut right = matmul_nt(&qb, &kb)?;
        if let Some(e) = &right_effective {
            right.add_assign(&skew_global_owned(matmul_nt(&qb, e)?)?)?;
        }
        if let Some(extra) = extras.extra_logits {
            right.add_assign(&extra.slice(&[rows.clone(), rows.clone()])?)?;
        }
        let mut logits = Tensor::zeros(&[n, 2 * n]);
        logits.write_columns(n, &right)?;
        if b > 0 {
            let prev = (b - 1) * n..b * n;
            let kp = k.row_block(prev.clone())?;
            let mut left = matmul_nt(&qb, &kp)?;
            if let Some(t) = table_left {
                left.add_assign(&skew_local(&matmul_nt(&qb, t.embeddings())?)?)?;
            }
            if let Some(extra) = extras.extra_logits {
                left.add_assign(&extra.slice(&[rows.clone(), prev])?)?;
            }
            logits.write_columns(0, &left)?;
        }
        let logits = logits.map(|x| x / scale);
        let w = softmax_rows(&logits, Some(if b == 0 { &first_mask } else { &mask }))?;
        let wd = match extras.dropout {
            Some(d) => w.hadamard(&d.row_block(rows.clone())?)?,
            None => w.clone(),
        };
        let mut zb = matmul(&wd.columns(n..2 * n)?, &vb)?;
        if b > 0 {
            let vp = v.row_block((b - 1) * n..b * n)?;
            zb.add_assign(&matmul(&wd.columns(0..n)?, &vp)?)?;
        }
        add_rows(&mut z, b * n, &zb);
        add_rows(&mut weights, b * n, &w);
    }

    let tape = keep_tape.then(|| LocalTape {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        cfg,
        right_effective: right_effective.clone(),
        has_left: table_left.is_some(),
        weights: weights.clone(),
        dropout: extras.dropout.cloned(),
        has_extra: extras.extra_logits.is_some(),
    });
    Ok((LocalAttentionOutput { z, weights, block_length: n }, tape))
}

pub fn relative_attention_local_backward<T: Element>(
    tape: &LocalTape<T>,
    table_left: Option<&RelativeEmbeddingTable<T>>,
    table_right: Option<&RelativeEmbeddingTable<T>>,
    dz: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let LocalTape { q, k, v, cfg, right_effective, has_left, weights, dropout, has_extra } = tape;
    if dz.shape() != v.shape() {
        return Err(Error::shape("local attention backward", dz.shape(), v.shape()));
    }
    if table_left.is_some() != *has_left || table_right.is_some() != right_effective.is_some() {
        return Err(Error::State("relative tables do not match the recorded forward pass".into()));
    }
    let n = cfg.block_length;
    let l = q.rows();
    let scale = T::from_f64((q.cols() as f64).sqrt());

    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut d_right_eff = right_effective.as_ref().map(|e| Tensor::zeros(e.shape()));
    let mut d_left = table_left.map(|t| Tensor::zeros(t.embeddings().shape()));
    let mut d_extra = has_extra.then(|| Tensor::zeros(&[l, l]));

    for b in 0..cfg.num_blocks {
        let rows = b * n..(b + 1) * n;
        let qb = q.row_block(rows.clone())?;
        let kb = k.row_block(rows.clone())?;
        let vb = v.row_block(rows.clone())?;
        let dzb = dz.row_block(rows.clone())?;
        let w = weights.row_block(rows.clone())?;
        let drop_b = dropout.as_ref().map(|d| d.row_block(rows.clone())).transpose()?;
        let wd = match &drop_b {
            Some(d) => w.hadamard(d)?,
            None => w.clone(),
        };

        let mut dw = Tensor::zeros(&[n, 2 * n]);
        dw.write_columns(n, &matmul_nt(&dzb, &vb)?)?;
        add_rows(&mut dv, b * n, &matmul_tn(&wd.columns(n..2 * n)?, &dzb)?);
        if b > 0 {
            let vp = v.row_block((b - 1) * n..b * n)?;
            dw.write_columns(0, &matmul_nt(&dzb, &vp)?)?;
            add_rows(&mut dv, (b - 1) * n, &matmul_tn(&wd.columns(0..n)?, &dzb)?);
        }
        if let Some(d) = &drop_b {
            dw = dw.hadamard(d)?;
        }
        let dlogits = softmax_rows_backward(&w, &dw)?.map(|x| x / scale);
        let d_right = dlogits.columns(n..2 * n)?;

        let mut dqb = matmul(&d_right, &kb)?;
        add_rows(&mut dk, b * n, &matmul_tn(&d_right, &qb)?);
        if let (Some(e), Some(de)) = (right_effective, d_right_eff.as_mut()) {
            let dqe = skew_global_backward(&d_right)?;
            dqb.add_assign(&matmul(&dqe, e)?)?;
            de.add_assign(&matmul_tn(&dqe, &qb)?)?;
        }
        if let Some(dx) = d_extra.as_mut() {
            for i in 0..n {
                dx.row_mut(b * n + i)[b * n..(b + 1) * n].copy_from_slice(d_right.row(i));
            }
        }
        if b > 0 {
            let prev = (b - 1) * n..b * n;
            let d_left_logits = dlogits.columns(0..n)?;
            let kp = k.row_block(prev.clone())?;
            dqb.add_assign(&matmul(&d_left_logits, &kp)?)?;
            add_rows(&mut dk, prev.start, &matmul_tn(&d_left_logits, &qb)?);
            if let (Some(t), Some(dl)) = (table_left, d_left.as_mut()) {
                let dqe = skew_local_backward(&d_left_logits)?;
                dqb.add_assign(&matmul(&dqe, t.embeddings())?)?;
                dl.add_assign(&matmul_tn(&dqe, &qb)?)?;
            }
            if let Some(dx) = d_extra.as_mut() {
                for i in 0..n {
                    dx.row_mut(b * n + i)[prev.clone()].copy_from_slice(d_left_logits.row(i));
                }
            }
        }
        add_rows(&mut dq, b * n, &dqb);
    }

    let d_table = match (table_right, d_right_eff) {
        (Some(t), Some(de)) => Some(t.scatter_global_grad(n, &de)?),
        _ => None,
    };
    Ok(AttentionGrads { dq, dk, dv, d_table, d_table_left: d_left, d_extra })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_ragged_length() {
        assert!(LocalAttentionConfig::new(3, 10).is_err());
        assert!(LocalAttentionConfig::new(0, 0).is_err());
        let c = LocalAttentionConfig::new(4, 12).unwrap();
        assert_eq!((c.block_length(), c.num_blocks()), (4, 3));
    }

    #[test]
    fn wrong_left_table_size_is_config_error() {
        let q = Tensor::<f64>::zeros(&[4, 2]);
        let left = RelativeEmbeddingTable::zeros(TableMode::LocalLeft, 5, 2).unwrap();
        let cfg = LocalAttentionConfig::new(2, 4).unwrap();
        let r = relative_attention_local(&q, &q, &q, Some(&left), None, cfg, Default::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn dense_weights_place_blocks() {
        let n = 2;
        let w = Tensor::new(&[4, 4], (0..16).map(|x| x as f64).collect()).unwrap();
        let d = densify(&w, n);
        assert_eq!(d.row(0), &[2.0, 3.0, 0.0, 0.0]);
        assert_eq!(d.row(3), &[12.0, 13.0, 14.0, 15.0]);
    }
}
