use super::skew::{skew_global_backward, skew_global_owned};
use super::table::{RelativeEmbeddingTable, TableMode};
use super::{add_into, AttentionExtras, AttentionGrads, AttentionOutput, CausalMask};
use crate::error::{Error, Result};
use crate::meter::{self, Category};
use crate::tensor::{self, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Element, Tensor};

/// Relative logits through the explicit `(L, L, D_h)` gather tensor `R`,
/// then `S[i][j] = q_i · R[i][j]`. Entries with `j > i` are zero.
///
/// This is the quadratic-memory reference the skewed path is checked against.
pub fn naive_srel_global<T: Element>(q: &Tensor<T>, table: &RelativeEmbeddingTable<T>) -> Result<Tensor<T>> {
    check_global_table(q, table)?;
    let l = q.rows();
    let dh = q.cols();
    let src = table.embeddings().data();
    let r = meter::tagged(Category::RelativeEmbedding, || {
        let mut r = Tensor::<T>::zeros(&[l, l, dh]);
        let data = r.data_mut();
        for i in 0..l {
            for j in 0..=i {
                let row = table.row_for_distance(j as isize - i as isize);
                let dst = (i * l + j) * dh;
                data[dst..dst + dh].copy_from_slice(&src[row * dh..(row + 1) * dh]);
            }
        }
        r
    });
    let rd = r.data();
    Ok(meter::tagged(Category::RelativeLogits, || {
        Tensor::from_fn(&[l, l], |k| {
            let (i, j) = (k / l, k % l);
            tensor::dot(q.row(i), &rd[(i * l + j) * dh..(i * l + j + 1) * dh])
        })
    }))
}

/// Relative logits via `skew(Q Eᵀ)`; only `O(L·D_h)` of relative embedding
/// intermediates. Entries above the diagonal are unspecified.
pub fn efficient_srel_global<T: Element>(q: &Tensor<T>, table: &RelativeEmbeddingTable<T>) -> Result<Tensor<T>> {
    check_global_table(q, table)?;
    let e = table.gather_global(q.rows())?;
    srel_from_effective(q, &e)
}

fn srel_from_effective<T: Element>(q: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
    let qe = meter::tagged(Category::RelativeLogits, || matmul_nt(q, e))?;
    skew_global_owned(qe)
}

fn check_global_table<T: Element>(q: &Tensor<T>, table: &RelativeEmbeddingTable<T>) -> Result<()> {
    if table.mode() != TableMode::Global {
        return Err(Error::config("global relative attention needs a global-mode table"));
    }
    if q.rank() != 2 || q.cols() != table.head_dim() {
        return Err(Error::shape("relative logits", q.shape(), table.embeddings().shape()));
    }
    Ok(())
}

/// Everything the backward pass needs from a global attention forward.
#[derive(Clone, Debug)]
pub struct GlobalTape<T: Element = f64> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    effective_table: Option<Tensor<T>>,
    weights: Tensor<T>,
    dropout: Option<Tensor<T>>,
    has_extra: bool,
}

impl<T: Element> GlobalTape<T> {
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
}

/// `softmax((Q Kᵀ + S^rel + extra) / √D_h, causal) · V` for one head.
///
/// With `table == None` this is plain scaled dot-product attention.
pub fn relative_attention_global<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table: Option<&RelativeEmbeddingTable<T>>,
    mask: &CausalMask,
    extras: AttentionExtras<'_, T>,
) -> Result<AttentionOutput<T>> {
    forward(q, k, v, table, mask, extras, false).map(|(out, _)| out)
}

/// Like [`relative_attention_global`], also returning the tape for
/// [`relative_attention_global_backward`].
pub fn relative_attention_global_taped<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table: Option<&RelativeEmbeddingTable<T>>,
    mask: &CausalMask,
    extras: AttentionExtras<'_, T>,
) -> Result<(AttentionOutput<T>, GlobalTape<T>)> {
    let (out, tape) = forward(q, k, v, table, mask, extras, true)?;
    Ok((out, tape.expect("tape requested")))
}

fn forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table: Option<&RelativeEmbeddingTable<T>>,
    mask: &CausalMask,
    extras: AttentionExtras<'_, T>,
    keep_tape: bool,
) -> Result<(AttentionOutput<T>, Option<GlobalTape<T>>)> {
    let l = q.rows();
    if q.rank() != 2 || k.shape() != q.shape() || v.rows() != l {
        return Err(Error::shape("relative_attention_global", q.shape(), k.shape()));
    }
    if mask.len() != l {
        return Err(Error::shape("causal mask", &[mask.len()], &[l]));
    }
    let dh = q.cols();
    let scale = T::from_f64((dh as f64).sqrt());

    let mut logits = matmul_nt(q, k)?;
    let mut effective_table = None;
    if let Some(table) = table {
        check_global_table(q, table)?;
        let e = table.gather_global(l)?;
        let srel = srel_from_effective(q, &e)?;
        logits.add_assign(&srel)?;
        effective_table = Some(e);
    }
    if let Some(extra) = extras.extra_logits {
        logits.add_assign(extra)?;
    }
    let logits = logits.map(|x| x / scale);
    let weights = softmax_rows(&logits, Some(&mask.to_mask()))?;
    let z = match extras.dropout {
        Some(d) => matmul(&weights.hadamard(d)?, v)?,
        None => matmul(&weights, v)?,
    };
    let tape = keep_tape.then(|| GlobalTape {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        effective_table,
        weights: weights.clone(),
        dropout: extras.dropout.cloned(),
        has_extra: extras.extra_logits.is_some(),
    });
    Ok((AttentionOutput { z, weights }, tape))
}

pub fn relative_attention_global_backward<T: Element>(
    tape: &GlobalTape<T>,
    table: Option<&RelativeEmbeddingTable<T>>,
    dz: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let GlobalTape { q, k, v, effective_table, weights, dropout, has_extra } = tape;
    if dz.shape() != v.shape() {
        return Err(Error::shape("attention backward", dz.shape(), v.shape()));
    }
    if table.is_some() != effective_table.is_some() {
        return Err(Error::State("relative table does not match the recorded forward pass".into()));
    }
    let l = q.rows();
    let scale = T::from_f64((q.cols() as f64).sqrt());

    let (dv, d_weights) = match dropout {
        Some(d) => {
            let wd = weights.hadamard(d)?;
            (matmul_tn(&wd, dz)?, matmul_nt(dz, v)?.hadamard(d)?)
        }
        None => (matmul_tn(weights, dz)?, matmul_nt(dz, v)?),
    };
    let d_logits = softmax_rows_backward(weights, &d_weights)?.map(|x| x / scale);
    let mut dq = matmul(&d_logits, k)?;
    let dk = matmul_tn(&d_logits, q)?;

    let mut d_table = None;
    if let (Some(table), Some(e)) = (table, effective_table) {
        let dqe = skew_global_backward(&d_logits)?;
        dq.add_assign(&matmul(&dqe, e)?)?;
        let de = matmul_tn(&dqe, q)?;
        d_table = Some(table.scatter_global_grad(l, &de)?);
    }
    let d_extra = has_extra.then(|| d_logits.clone());
    Ok(AttentionGrads { dq, dk, dv, d_table, d_table_left: None, d_extra })
}

/// Adds `src` into rows `start..` of `dst`.
pub(crate) fn add_rows<T: Element>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let c = dst.cols();
    let n = src.len();
    add_into(&mut dst.data_mut()[start * c..start * c + n], src.data());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn naive_two_by_two_hand_expansion() {
        let q = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // e_{-1} = (1, 0), e_0 = (0, 1)
        let table =
            RelativeEmbeddingTable::new(TableMode::Global, Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
                .unwrap();
        let s = naive_srel_global(&q, &table).unwrap();
        assert_eq!(s.get(0, 0), 2.0);
        assert_eq!(s.get(1, 0), 3.0);
        assert_eq!(s.get(1, 1), 4.0);
    }

    #[test]
    fn efficient_matches_naive_bitwise_on_triangle() {
        for &(l, rows) in &[(1, 1), (5, 5), (9, 4), (12, 20)] {
            let q = Tensor::<f64>::from_fn(&[l, 3], lcg(l as u64));
            let table = RelativeEmbeddingTable::new(TableMode::Global, Tensor::from_fn(&[rows, 3], lcg(99))).unwrap();
            let a = naive_srel_global(&q, &table).unwrap();
            let b = efficient_srel_global(&q, &table).unwrap();
            for i in 0..l {
                for j in 0..=i {
                    assert_eq!(a.get(i, j).to_bits(), b.get(i, j).to_bits(), "L={l} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn local_table_is_rejected() {
        let q = Tensor::<f64>::zeros(&[3, 2]);
        let t = RelativeEmbeddingTable::zeros(TableMode::LocalLeft, 5, 2).unwrap();
        let err = relative_attention_global(&q, &q, &q, Some(&t), &CausalMask::new(3), Default::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let l = 7;
        let q = Tensor::<f64>::from_fn(&[l, 4], lcg(1));
        let k = Tensor::<f64>::from_fn(&[l, 4], lcg(2));
        let v = Tensor::<f64>::from_fn(&[l, 4], lcg(3));
        let t = RelativeEmbeddingTable::new(TableMode::Global, Tensor::from_fn(&[l, 4], lcg(4))).unwrap();
        let out = relative_attention_global(&q, &k, &v, Some(&t), &CausalMask::new(l), Default::default()).unwrap();
        for i in 0..l {
            let s: f64 = out.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.weights.row(i)[i + 1..].iter().all(|&w| w == 0.0));
        }
    }
}
