use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter::{self, Category};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMode {
    /// Rows cover distances `-(n-1) ..= 0`, farthest first.
    Global,
    /// Rows cover distances `-(2N-1) ..= -1` into the previous block.
    LocalLeft,
}

/// Learned per-head embeddings indexed by relative distance.
///
/// Row `r` of a global table with `n` rows encodes distance `r - (n - 1)`.
/// Row `r` of a local-left table for block length `N` encodes distance
/// `r - (2N - 1)`. Distances past the farthest row clip to it.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeEmbeddingTable<T: Element = f64> {
    mode: TableMode,
    embeddings: Tensor<T>,
}

impl<T: Element> RelativeEmbeddingTable<T> {
    pub fn new(mode: TableMode, embeddings: Tensor<T>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() == 0 {
            return Err(Error::config(format!(
                "relative table needs a non-empty (distances, head_dim) matrix, got {:?}",
                embeddings.shape()
            )));
        }
        if mode == TableMode::LocalLeft && embeddings.rows().is_multiple_of(2) {
            return Err(Error::config(format!("local-left table must have 2N-1 rows, got {}", embeddings.rows())));
        }
        Ok(Self { mode, embeddings })
    }

    pub fn zeros(mode: TableMode, num_distances: usize, head_dim: usize) -> Result<Self> {
        Self::new(mode, Tensor::zeros(&[num_distances, head_dim]))
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    pub fn num_distances(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor<T> {
        &mut self.embeddings
    }

    pub fn into_embeddings(self) -> Tensor<T> {
        self.embeddings
    }

    /// Block length `N` served by a local-left table.
    pub fn block_length(&self) -> Option<usize> {
        match self.mode {
            TableMode::LocalLeft => Some(self.num_distances().div_ceil(2)),
            TableMode::Global => None,
        }
    }

    /// Relative distance encoded by row `r`.
    pub fn distance_of_row(&self, r: usize) -> isize {
        let n = self.num_distances() as isize;
        match self.mode {
            TableMode::Global => r as isize - (n - 1),
            TableMode::LocalLeft => r as isize - n,
        }
    }

    /// Row holding `distance`, clipped into the table.
    pub fn row_for_distance(&self, distance: isize) -> usize {
        let n = self.num_distances() as isize;
        let r = match self.mode {
            TableMode::Global => distance + (n - 1),
            TableMode::LocalLeft => distance + n,
        };
        r.clamp(0, n - 1) as usize
    }

    /// Table rows feeding each column of `Q Eᵀ` for a sequence of `len`:
    /// column `r` holds distance `r - (len - 1)`.
    pub fn global_row_indices(&self, len: usize) -> Vec<usize> {
        (0..len).map(|r| self.row_for_distance(r as isize - (len as isize - 1))).collect()
    }

    /// The `(len, head_dim)` effective table for a global-mode sequence of
    /// `len`, with clipping applied. Metered as a relative embedding.
    pub fn gather_global(&self, len: usize) -> Result<Tensor<T>> {
        if self.mode != TableMode::Global {
            return Err(Error::config("global gather on a local-left table"));
        }
        let dh = self.head_dim();
        let rows = self.global_row_indices(len);
        let src = self.embeddings.data();
        Ok(meter::tagged(Category::RelativeEmbedding, || {
            let mut data = Vec::with_capacity(len * dh);
            for &r in &rows {
                data.extend_from_slice(&src[r * dh..(r + 1) * dh]);
            }
            Tensor::new(&[len, dh], data).expect("gathered shape")
        }))
    }

    /// Backward of [`gather_global`](Self::gather_global): sums the gradient
    /// of each effective row into the table row it was read from.
    pub fn scatter_global_grad(&self, len: usize, d_effective: &Tensor<T>) -> Result<Tensor<T>> {
        if d_effective.shape() != [len, self.head_dim()] {
            return Err(Error::shape("scatter_global_grad", d_effective.shape(), &[len, self.head_dim()]));
        }
        let mut grad = Tensor::zeros(self.embeddings.shape());
        for (col, r) in self.global_row_indices(len).into_iter().enumerate() {
            for (g, &d) in grad.row_mut(r).iter_mut().zip(d_effective.row(col)) {
                *g = *g + d;
            }
        }
        Ok(grad)
    }
}
