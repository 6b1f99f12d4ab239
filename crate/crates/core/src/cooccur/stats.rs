use super::{RowSource, StoreError};
use crate::model::SparseRow;

/// Moments of one row over all `n` cells, implicit zeros included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowStats {
    pub mean: f64,
    /// Population variance (denominator `n`).
    pub variance: f64,
    pub nnz: usize,
    /// Population skewness; zero for a constant row.
    pub skewness: f64,
}

impl RowStats {
    pub fn from_row(row: &SparseRow, n: usize) -> Self {
        let nf = n as f64;
        let mean = row.weights.iter().sum::<f64>() / nf;
        let zeros = (n - row.nnz()) as f64;
        let (mut m2, mut m3) = (zeros * mean * mean, -zeros * mean * mean * mean);
        for &y in &row.weights {
            let d = y - mean;
            m2 += d * d;
            m3 += d * d * d;
        }
        let variance = (m2 / nf).max(0.0);
        let skewness = if variance > 0.0 {
            (m3 / nf) / variance.powf(1.5)
        } else {
            0.0
        };
        Self {
            mean,
            variance,
            nnz: row.nnz(),
            skewness,
        }
    }
}

/// One sequential pass over all rows.
pub fn compute_row_stats(source: &mut dyn RowSource) -> Result<Vec<RowStats>, StoreError> {
    let n = source.n();
    source.rewind()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(RowStats::from_row(&source.next_row(i)?, n));
    }
    source.rewind()?;
    Ok(out)
}
