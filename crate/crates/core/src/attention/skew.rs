//! The pad → reshape → slice transforms that turn an absolute-by-relative
//! `(i, r)` matrix of query/embedding dot products into the
//! absolute-by-absolute `(i, j)` layout of `Q Kᵀ`.
//!
//! Both transforms are pure data movement; every value in the output is a
//! bitwise copy of an input value or of padding.

use crate::error::{Error, Result};
use crate::meter::{self, Category};
use crate::tensor::{Element, Tensor};

/// Global skew of an `L×L` matrix `qe`, where `qe[i][r]` is the dot product
/// of query `i` with the embedding for distance `r - (L-1)`.
///
/// Returns `S` with `S[i][j] = qe[i][j - i + L - 1]` for `j <= i`. Entries
/// above the diagonal hold leftovers of the reshape and must be masked.
pub fn skew_global<T: Element>(qe: &Tensor<T>) -> Result<Tensor<T>> {
    if qe.rank() != 2 || qe.rows() != qe.cols() {
        return Err(Error::shape("skew_global", qe.shape(), &[]));
    }
    let l = qe.rows();
    meter::tagged(Category::RelativeLogits, || {
        let padded = qe.pad(&[(0, 0), (1, 0)])?;
        skew_padded_global(padded, l)
    })
}

/// Same as [`skew_global`] but consumes `qe`, so that at most two `L×L`
/// buffers are alive at once.
pub(crate) fn skew_global_owned<T: Element>(qe: Tensor<T>) -> Result<Tensor<T>> {
    if qe.rank() != 2 || qe.rows() != qe.cols() {
        return Err(Error::shape("skew_global", qe.shape(), &[]));
    }
    let l = qe.rows();
    meter::tagged(Category::RelativeLogits, || {
        let padded = qe.pad(&[(0, 0), (1, 0)])?;
        drop(qe);
        skew_padded_global(padded, l)
    })
}

fn skew_padded_global<T: Element>(padded: Tensor<T>, l: usize) -> Result<Tensor<T>> {
    let reshaped = padded.reshape(&[l + 1, l])?;
    reshaped.slice(&[1..l + 1, 0..l])
}

/// Scatters the causal triangle of `d_srel` back to the `(i, r)` layout.
/// Entries of the result that no output position reads from are zero.
pub fn skew_global_backward<T: Element>(d_srel: &Tensor<T>) -> Result<Tensor<T>> {
    if d_srel.rank() != 2 || d_srel.rows() != d_srel.cols() {
        return Err(Error::shape("skew_global_backward", d_srel.shape(), &[]));
    }
    let l = d_srel.rows();
    let mut out = Tensor::zeros(&[l, l]);
    for i in 0..l {
        for j in 0..=i {
            out.set(i, j + l - 1 - i, d_srel.get(i, j));
        }
    }
    Ok(out)
}

/// Local skew for one block of length `N`: `qe` is `N×(2N-1)`, with
/// column `r` holding distance `r - (2N-1)` into the previous block.
///
/// Returns the `N×N` matrix `S[i][j] = qe[i][j - i + N - 1]`, indexed by
/// query `i` of the current block and key `j` of the previous block.
pub fn skew_local<T: Element>(qe: &Tensor<T>) -> Result<Tensor<T>> {
    if qe.rank() != 2 || qe.rows() == 0 || qe.cols() != 2 * qe.rows() - 1 {
        return Err(Error::shape("skew_local", qe.shape(), &[]));
    }
    let n = qe.rows();
    let w = 2 * n - 1;
    meter::tagged(Category::RelativeLogits, || {
        let padded = qe.pad(&[(0, 0), (0, 1)])?;
        let flat = padded.reshape(&[n * 2 * n])?;
        let flat = flat.pad(&[(0, n - 1)])?;
        let grid = flat.reshape(&[n + 1, w])?;
        grid.slice(&[0..n, n - 1..w])
    })
}

/// Inverse index map of [`skew_local`].
pub fn skew_local_backward<T: Element>(d_srel: &Tensor<T>) -> Result<Tensor<T>> {
    if d_srel.rank() != 2 || d_srel.rows() != d_srel.cols() || d_srel.rows() == 0 {
        return Err(Error::shape("skew_local_backward", d_srel.shape(), &[]));
    }
    let n = d_srel.rows();
    let mut out = Tensor::zeros(&[n, 2 * n - 1]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j + n - 1 - i, d_srel.get(i, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn global_identity_case() {
        let s = skew_global(&m(&[&[4.5]])).unwrap();
        assert_eq!(s.data(), &[4.5]);
    }

    #[test]
    fn global_three_by_three_lower_triangle() {
        // a..i = 1..9
        let qe = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let s = skew_global(&qe).unwrap();
        assert_eq!(s.get(0, 0), 3.0);
        assert_eq!((s.get(1, 0), s.get(1, 1)), (5.0, 6.0));
        assert_eq!(s.row(2), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn local_examples() {
        assert_eq!(skew_local(&m(&[&[2.0]])).unwrap().data(), &[2.0]);
        // [[a,b,c],[d,e,f]] -> [[b,c],[d,e]]
        let qe = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(skew_local(&qe).unwrap(), m(&[&[2.0, 3.0], &[4.0, 5.0]]));
    }

    #[test]
    fn shape_errors() {
        assert!(skew_global(&Tensor::<f64>::zeros(&[2, 3])).is_err());
        assert!(skew_local(&Tensor::<f64>::zeros(&[2, 2])).is_err());
        assert!(skew_local(&Tensor::<f64>::zeros(&[0, 0])).is_err());
    }

    #[test]
    fn backward_inverts_forward_on_the_read_region() {
        let l = 5;
        let ds = Tensor::<f64>::from_fn(&[l, l], |k| {
            let (i, j) = (k / l, k % l);
            if j <= i {
                (k + 1) as f64
            } else {
                0.0
            }
        });
        let s = skew_global(&skew_global_backward(&ds).unwrap()).unwrap();
        for i in 0..l {
            for j in 0..=i {
                assert_eq!(s.get(i, j), ds.get(i, j));
            }
        }

        let n = 4;
        let ds = Tensor::<f64>::from_fn(&[n, n], |k| k as f64 - 3.5);
        let back = skew_local(&skew_local_backward(&ds).unwrap()).unwrap();
        assert!(back.bitwise_eq(&ds));
    }
}
