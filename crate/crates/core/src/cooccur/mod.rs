//! Corpus ingestion and sparse co-occurrence storage.
//!
//! Counts are `X_ij = sum over sentences of 1/d` for every in-vocabulary
//! pair at token distance `d <= k`. The matrix is symmetric by construction
//! and stored as sorted `(row, col, weight)` triplets, either in memory
//! ([`SparseMatrix`]) or in a flat little-endian file ([`CooccurrenceStore`]).

mod count;
mod stats;
mod store;
mod vocab;

use thiserror::Error;

use crate::model::SparseRow;

pub use count::{
    count_cooccurrences, count_to_store, CorpusFile, CountConfig, SentenceSource, MAX_WINDOW,
};
pub use stats::{compute_row_stats, RowStats};
pub use store::{
    apply_log1p_file, CooccurrenceStore, RowCursor, StoreHeader, StoreReader, StoreWriter,
    STORE_MAGIC, STORE_VERSION,
};
pub use vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("window size {0} outside 1..={MAX_WINDOW}")]
    Window(usize),
    #[error("log1p transform already applied")]
    AlreadyTransformed,
    #[error("row {requested} requested after row {last}; sequential cursor cannot move backwards")]
    StaleCursor { requested: usize, last: usize },
    #[error("row {0} out of range")]
    RowOutOfRange(usize),
    #[error("triplets out of order or duplicated at ({row}, {col})")]
    Unsorted { row: u32, col: u32 },
    #[error("invalid weight {weight} at ({row}, {col})")]
    Weight { row: u32, col: u32, weight: f64 },
}

/// Sequential row access used by the trainer and the statistics pass.
///
/// Rows must be requested in non-decreasing index order between rewinds.
pub trait RowSource: Send {
    fn n(&self) -> usize;
    fn rewind(&mut self) -> Result<(), StoreError>;
    fn next_row(&mut self, i: usize) -> Result<SparseRow, StoreError>;
}

/// In-memory compressed-row matrix of positive cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    pub window: u32,
    pub total_tokens: u64,
    pub log1p: bool,
}

impl SparseMatrix {
    /// Builds from triplets sorted strictly by `(row, col)` with positive weights.
    pub fn from_sorted_triplets(
        n: usize,
        triplets: impl IntoIterator<Item = (u32, u32, f64)>,
    ) -> Result<Self, StoreError> {
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut last: Option<(u32, u32)> = None;
        for (r, c, w) in triplets {
            if r as usize >= n || c as usize >= n {
                return Err(StoreError::RowOutOfRange(r.max(c) as usize));
            }
            if last.is_some_and(|l| l >= (r, c)) {
                return Err(StoreError::Unsorted { row: r, col: c });
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(StoreError::Weight {
                    row: r,
                    col: c,
                    weight: w,
                });
            }
            last = Some((r, c));
            row_ptr[r as usize + 1] += 1;
            cols.push(c);
            weights.push(w);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            weights,
            window: 0,
            total_tokens: 0,
            log1p: false,
        })
    }

    /// Builds from a dense row-major matrix, keeping entries `> 0`.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self, StoreError> {
        assert_eq!(dense.len(), n * n);
        Self::from_sorted_triplets(
            n,
            (0..n).flat_map(|i| {
                (0..n).filter_map(move |j| {
                    let v = dense[i * n + j];
                    (v > 0.0).then_some((i as u32, j as u32, v))
                })
            }),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> SparseRow {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        SparseRow {
            index: i,
            cols: self.cols[range.clone()].to_vec(),
            weights: self.weights[range].to_vec(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = SparseRow> + '_ {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn triplets(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i as u32, self.cols[k], self.weights[k]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.weights[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for (r, c, w) in self.triplets() {
            out[r as usize * self.n + c as usize] = w;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t: Vec<(u32, u32, f64)> = self.triplets().map(|(r, c, w)| (c, r, w)).collect();
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut out = Self::from_sorted_triplets(self.n, t).expect("transpose of a valid matrix");
        out.window = self.window;
        out.total_tokens = self.total_tokens;
        out.log1p = self.log1p;
        out
    }

    /// Exact symmetry check `X_ij == X_ji`.
    pub fn is_symmetric(&self) -> bool {
        self.triplets()
            .all(|(r, c, w)| self.get(c as usize, r as usize) == w)
    }

    /// Replaces every weight `x` by `ln(1 + x)`. Zeros stay implicit.
    pub fn apply_log1p(&mut self) -> Result<(), StoreError> {
        if self.log1p {
            return Err(StoreError::AlreadyTransformed);
        }
        for w in &mut self.weights {
            *w = w.ln_1p();
        }
        self.log1p = true;
        Ok(())
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            n: self.n as u64,
            total_tokens: self.total_tokens,
            window: self.window,
            log1p: self.log1p,
            records: self.nnz() as u64,
        }
    }

    pub fn write_store(&self, path: &std::path::Path) -> Result<StoreHeader, StoreError> {
        let mut w = StoreWriter::create(
            path,
            self.n as u64,
            self.window,
            self.total_tokens,
            self.log1p,
        )?;
        for (r, c, v) in self.triplets() {
            w.push(r, c, v)?;
        }
        w.finish()
    }

    pub fn reader(&self) -> MatrixReader<'_> {
        MatrixReader {
            matrix: self,
            last: None,
        }
    }
}

/// [`RowSource`] over a borrowed [`SparseMatrix`].
#[derive(Debug)]
pub struct MatrixReader<'a> {
    matrix: &'a SparseMatrix,
    last: Option<usize>,
}

impl RowSource for MatrixReader<'_> {
    fn n(&self) -> usize {
        self.matrix.n
    }

    fn rewind(&mut self) -> Result<(), StoreError> {
        self.last = None;
        Ok(())
    }

    fn next_row(&mut self, i: usize) -> Result<SparseRow, StoreError> {
        if i >= self.matrix.n {
            return Err(StoreError::RowOutOfRange(i));
        }
        if let Some(last) = self.last.filter(|&l| l > i) {
            return Err(StoreError::StaleCursor { requested: i, last });
        }
        self.last = Some(i);
        Ok(self.matrix.row(i))
    }
}
