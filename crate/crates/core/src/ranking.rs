//! Exact Euclidean distance matrices and per-row ascending ranks.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::embedstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::Scalar;

/// Rows per block of the blocked distance computation.
const BLOCK_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix<T> {
    values: Array2<T>,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn new(values: Array2<T>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        if values.dim() != (row_ids.len(), col_ids.len()) {
            return Err(Error::ShapeMismatch {
                context: "distance matrix ids",
                expected: (row_ids.len(), col_ids.len()),
                found: values.dim(),
            });
        }
        Ok(DistanceMatrix {
            values,
            row_ids,
            col_ids,
        })
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.values.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[[i, j]]
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }
}

/// `values[i][j] = |a_i - b_j|`.
///
/// Uses `|a-b|^2 = |a|^2 + |b|^2 - 2 a.b` over blocks of rows, clamping small
/// negative squares to zero. When `a` and `b` are the same object the result
/// is exactly symmetric with a zero diagonal.
pub fn pairwise_distances<T: Scalar>(
    a: &EmbeddingSet<T>,
    b: &EmbeddingSet<T>,
) -> Result<DistanceMatrix<T>> {
    if std::ptr::eq(a, b) {
        return Ok(self_distances(a));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let values = blocked_distances(a.vectors(), b.vectors());
    DistanceMatrix::new(values, a.ids().to_vec(), b.ids().to_vec())
}

/// Distances of a set against itself: symmetric, zero diagonal.
pub fn self_distances<T: Scalar>(a: &EmbeddingSet<T>) -> DistanceMatrix<T> {
    let mut values = blocked_distances(a.vectors(), a.vectors());
    let n = values.nrows();
    for i in 0..n {
        values[[i, i]] = T::zero();
        for j in (i + 1)..n {
            values[[j, i]] = values[[i, j]];
        }
    }
    DistanceMatrix {
        values,
        row_ids: a.ids().to_vec(),
        col_ids: a.ids().to_vec(),
    }
}

fn blocked_distances<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let sq_norms = |m: &Array2<T>| -> Array1<T> { m.outer_iter().map(|r| r.dot(&r)).collect() };
    let a_norms = sq_norms(a);
    let b_norms = sq_norms(b);
    let b_t = b.t();
    let mut values = Array2::<T>::zeros((a.nrows(), b.nrows()));
    let two = T::lit(2.0);
    values
        .axis_chunks_iter_mut(Axis(0), BLOCK_ROWS)
        .into_par_iter()
        .enumerate()
        .for_each(|(block, mut out)| {
            let start = block * BLOCK_ROWS;
            let end = start + out.nrows();
            let gram = a.slice(s![start..end, ..]).dot(&b_t);
            for ((r, c), v) in out.indexed_iter_mut() {
                let sq = a_norms[start + r] + b_norms[c] - two * gram[[r, c]];
                *v = sq.max(T::zero()).sqrt();
            }
        });
    values
}

/// Per-row ascending orderings with 1-based ranks.
///
/// `order[i][k]` is the column at position `k` (0-based) for reference `i`;
/// `ranks[i][j]` is the 1-based position of column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankMatrix {
    order: Array2<u32>,
    ranks: Array2<u32>,
}

impl RankMatrix {
    /// 1-based rank of column `j` relative to reference `i`.
    pub fn rank(&self, i: usize, j: usize) -> usize {
        self.ranks[[i, j]] as usize
    }

    pub fn order_row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.order.row(i).into_iter().map(|&c| c as usize)
    }

    pub fn ranks(&self) -> &Array2<u32> {
        &self.ranks
    }

    pub fn order(&self) -> &Array2<u32> {
        &self.order
    }

    pub fn rows(&self) -> usize {
        self.ranks.nrows()
    }

    pub fn cols(&self) -> usize {
        self.ranks.ncols()
    }
}

/// Ranks every row by ascending distance; ties go to the lower column index.
pub fn rank_rows<T: Scalar>(d: &DistanceMatrix<T>) -> RankMatrix {
    let (rows, cols) = d.values.dim();
    assert!(
        cols <= u32::MAX as usize,
        "rank matrix supports at most u32::MAX columns"
    );
    let mut order = Array2::<u32>::zeros((rows, cols));
    let mut ranks = Array2::<u32>::zeros((rows, cols));
    order
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(ranks.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(i, (mut order_row, mut rank_row))| {
            let sorted = argsort_view(d.values.row(i));
            for (pos, &col) in sorted.iter().enumerate() {
                order_row[pos] = col as u32;
                rank_row[col] = (pos + 1) as u32;
            }
        });
    RankMatrix { order, ranks }
}

/// Indices of `values` in ascending order; equal values keep index order.
pub fn argsort<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&x, &y| cmp_values(values[x], values[y]));
    idx
}

fn argsort_view<T: Scalar>(values: ArrayView1<'_, T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&x, &y| cmp_values(values[x], values[y]));
    idx
}

fn cmp_values<T: Scalar>(x: T, y: T) -> Ordering {
    x.partial_cmp(&y).unwrap_or(Ordering::Equal)
}

/// Inverts an ordering into 1-based ranks: `ranks[order[k]] = k + 1`.
pub fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (pos, &item) in order.iter().enumerate() {
        ranks[item] = pos + 1;
    }
    ranks
}

/// Writes the matrix as CSV with a header of column ids and a leading id column.
pub fn write_distance_csv<T: Scalar>(d: &DistanceMatrix<T>, path: &Path) -> Result<()> {
    let rows = d
        .values
        .outer_iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>());
    write_matrix_csv(path, &d.row_ids, &d.col_ids, rows)
}

pub fn write_rank_csv(r: &RankMatrix, row_ids: &[String], col_ids: &[String], path: &Path) -> Result<()> {
    let rows = r
        .ranks
        .outer_iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>());
    write_matrix_csv(path, row_ids, col_ids, rows)
}

fn write_matrix_csv(
    path: &Path,
    row_ids: &[String],
    col_ids: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("id").chain(col_ids.iter().map(String::as_str)))?;
    for (id, row) in row_ids.iter().zip(rows) {
        w.write_record(std::iter::once(id.clone()).chain(row))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    write_atomic(path, &bytes)
}
