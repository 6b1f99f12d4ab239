//! The shared-parameter alternating Tweedie regression surface.
//!
//! Cell `(i, j)` has linear predictor `eta_ij = w_i . wt_j + b_i + bt_j`,
//! mean `mu_ij = exp(eta_ij)`, power `p_ij = p_i + pt_j` and dispersion
//! `phi_ij = phi_i * phit_j`. With the column block `(Wt, bt)` held fixed,
//! row `i` is an ordinary Tweedie GLM in `beta_i = (w_i, b_i)` whose
//! covariates are the rows `(wt_j, 1)`; columns are the mirror image.
//!
//! Zero cells are never stored. Each block evaluation walks all `n` cells
//! of the other side once (their parameters are in memory) and patches the
//! coefficients of the stored non-zero cells, so the zero-part sums come out
//! as "full sum minus stored sum" without materialising the zeros.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::par::{self, Parallelism};

/// Linear predictors are clamped here before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid dispersion assignment: {0}")]
    Dispersion(String),
    #[error("invalid sparse row {index}: {reason}")]
    Row { index: usize, reason: String },
}

/// Row and column embeddings with their biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// `n x d`, row `i` is `w_i`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// `n x d`, row `j` is `wt_j`.
    pub wt: Array2<f64>,
    pub bt: Array1<f64>,
}

impl EmbeddingParams {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            w: Array2::zeros((n, d)),
            b: Array1::zeros(n),
            wt: Array2::zeros((n, d)),
            bt: Array1::zeros(n),
        }
    }

    /// Builds parameters, checking shapes and finiteness. `d = 0` gives a
    /// bias-only model.
    pub fn new(
        w: Array2<f64>,
        b: Array1<f64>,
        wt: Array2<f64>,
        bt: Array1<f64>,
    ) -> Result<Self, ModelError> {
        let n = w.nrows();
        if n == 0 {
            return Err(ModelError::Dimension("n must be at least 1".into()));
        }
        if wt.dim() != w.dim() || b.len() != n || bt.len() != n {
            return Err(ModelError::Dimension(format!(
                "W {:?}, b {}, Wt {:?}, bt {}",
                w.dim(),
                b.len(),
                wt.dim(),
                bt.len()
            )));
        }
        let p = Self { w, b, wt, bt };
        if !p.is_finite() {
            return Err(ModelError::Dimension("non-finite parameter entry".into()));
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.wt.iter().all(|v| v.is_finite())
            && self.bt.iter().all(|v| v.is_finite())
    }

    /// `beta_i = (w_i, b_i)` or `betat_j = (wt_j, bt_j)`.
    pub fn block(&self, side: Side, index: usize) -> Array1<f64> {
        let (m, bias) = self.side(side);
        let d = m.ncols();
        let mut out = Array1::zeros(d + 1);
        out.slice_mut(s![..d]).assign(&m.row(index));
        out[d] = bias[index];
        out
    }

    pub fn set_block(&mut self, side: Side, index: usize, beta: ArrayView1<f64>) {
        let d = self.dim();
        let (m, bias) = match side {
            Side::Row => (&mut self.w, &mut self.b),
            Side::Col => (&mut self.wt, &mut self.bt),
        };
        m.row_mut(index).assign(&beta.slice(s![..d]));
        bias[index] = beta[d];
    }

    fn side(&self, side: Side) -> (&Array2<f64>, &Array1<f64>) {
        match side {
            Side::Row => (&self.w, &self.b),
            Side::Col => (&self.wt, &self.bt),
        }
    }
}

/// Which parameter block a computation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// `beta_i`, data is row `i`.
    Row,
    /// `betat_j`, data is column `j`.
    Col,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Row => Side::Col,
            Side::Col => Side::Row,
        }
    }
}

/// Per-index power and dispersion components.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionAssignment {
    pub p_row: Vec<f64>,
    pub p_col: Vec<f64>,
    pub phi_row: Vec<f64>,
    pub phi_col: Vec<f64>,
}

impl DispersionAssignment {
    /// Validates lengths and that every composed `p_ij` lies in `(1, 2)`.
    pub fn new(
        p_row: Vec<f64>,
        p_col: Vec<f64>,
        phi_row: Vec<f64>,
        phi_col: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = p_row.len();
        if p_col.len() != n || phi_row.len() != n || phi_col.len() != n || n == 0 {
            return Err(ModelError::Dispersion(format!(
                "component lengths {} {} {} {}",
                n,
                p_col.len(),
                phi_row.len(),
                phi_col.len()
            )));
        }
        let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
        let lo = fold(&p_row, f64::min, f64::INFINITY) + fold(&p_col, f64::min, f64::INFINITY);
        let hi =
            fold(&p_row, f64::max, f64::NEG_INFINITY) + fold(&p_col, f64::max, f64::NEG_INFINITY);
        if !(lo > 1.0 && hi < 2.0) {
            return Err(ModelError::Dispersion(format!(
                "composed power spans [{lo}, {hi}], outside (1, 2)"
            )));
        }
        if phi_row
            .iter()
            .chain(&phi_col)
            .any(|&v| !(v.is_finite() && v > 0.0))
        {
            return Err(ModelError::Dispersion(
                "dispersion components must be positive".into(),
            ));
        }
        Ok(Self {
            p_row,
            p_col,
            phi_row,
            phi_col,
        })
    }

    /// Every cell gets power `p` and dispersion `phi`.
    pub fn constant(n: usize, p: f64, phi: f64) -> Result<Self, ModelError> {
        let half = vec![p / 2.0; n];
        let root = vec![phi.sqrt(); n];
        Self::new(half.clone(), half, root.clone(), root)
    }

    pub fn n(&self) -> usize {
        self.p_row.len()
    }

    #[inline]
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.p_row[i] + self.p_col[j]
    }

    #[inline]
    pub fn phi(&self, i: usize, j: usize) -> f64 {
        self.phi_row[i] * self.phi_col[j]
    }

    pub fn is_symmetric(&self) -> bool {
        self.p_row == self.p_col && self.phi_row == self.phi_col
    }
}

/// One row (or column) of the sparse response matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow {
    pub index: usize,
    /// Strictly increasing indices of the positive cells.
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SparseRow {
    pub fn new(index: usize, cols: Vec<u32>, weights: Vec<f64>) -> Result<Self, ModelError> {
        let row = Self {
            index,
            cols,
            weights,
        };
        row.validate()?;
        Ok(row)
    }

    pub fn empty(index: usize) -> Self {
        Self {
            index,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| {
            Err(ModelError::Row {
                index: self.index,
                reason: reason.to_string(),
            })
        };
        if self.cols.len() != self.weights.len() {
            return fail("cols and weights differ in length");
        }
        if self.cols.windows(2).any(|w| w[0] >= w[1]) {
            return fail("column indices not strictly increasing");
        }
        if self.weights.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return fail("weights must be positive and finite");
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Dense copy of length `n`.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&c, &v) in self.cols.iter().zip(&self.weights) {
            out[c as usize] = v;
        }
        out
    }

    fn check_bounds(&self, n: usize) -> Result<(), ModelError> {
        if self.index >= n || self.cols.last().is_some_and(|&c| c as usize >= n) {
            return Err(ModelError::Row {
                index: self.index,
                reason: format!("index out of range for n = {n}"),
            });
        }
        Ok(())
    }
}

/// `eta_ij = w_i . wt_j + (b_i + bt_j)`.
pub fn linear_predictor(params: &EmbeddingParams, i: usize, j: usize) -> f64 {
    params.w.row(i).dot(&params.wt.row(j)) + (params.b[i] + params.bt[j])
}

/// Options for a block evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Number of contiguous cell ranges the sums are partitioned into.
    pub num_chunks: usize,
    pub parallelism: Parallelism,
    pub information: bool,
    /// When false the score and information are computed with `phi_ij = 1`,
    /// which makes the score the negative gradient of the training loss.
    pub phi_weighted: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            num_chunks: 1,
            parallelism: Parallelism::Parallel,
            information: true,
            phi_weighted: true,
        }
    }
}

/// Score, information and loss for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEval {
    /// `(U_w, U_b)`, length `d + 1`.
    pub score: Array1<f64>,
    /// `(d + 1) x (d + 1)` Fisher information, when requested.
    pub information: Option<Array2<f64>>,
    /// `-sum (y theta - kappa)` over the block's `n` cells.
    pub loss: f64,
    /// Number of cells whose predictor hit [`ETA_CLAMP`].
    pub clamp_events: u64,
}

struct Partial {
    score_w: Array1<f64>,
    score_b: f64,
    info_ww: Option<Array2<f64>>,
    info_wb: Option<Array1<f64>>,
    info_bb: f64,
    loss: f64,
    clamps: u64,
}

/// Evaluates the score (and optionally information) of `beta_i` (side Row,
/// data = row `i`) or `betat_j` (side Col, data = column `j`) at `params`.
pub fn evaluate_block(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    side: Side,
    data: &SparseRow,
    opts: &EvalOptions,
) -> Result<BlockEval, ModelError> {
    let n = params.n();
    let d = params.dim();
    if disp.n() != n {
        return Err(ModelError::Dimension(format!(
            "dispersion has {} entries, params {}",
            disp.n(),
            n
        )));
    }
    data.check_bounds(n)?;
    let own = data.index;
    let (own_w, own_b, other_w, other_b) = match side {
        Side::Row => (
            params.w.row(own),
            params.b[own],
            params.wt.view(),
            &params.bt,
        ),
        Side::Col => (
            params.wt.row(own),
            params.bt[own],
            params.w.view(),
            &params.b,
        ),
    };

    let ranges = par::partition(n, opts.num_chunks);
    let partials = par::map_indexed(opts.parallelism, ranges.len(), |k| {
        chunk_partial(
            ranges[k].clone(),
            side,
            own,
            own_w,
            own_b,
            other_w,
            other_b.view(),
            disp,
            data,
            opts,
        )
    });

    let mut score = Array1::zeros(d + 1);
    let mut info = opts.information.then(|| Array2::zeros((d + 1, d + 1)));
    let mut loss = 0.0;
    let mut clamp_events = 0;
    for part in partials {
        score
            .slice_mut(s![..d])
            .zip_mut_with(&part.score_w, |a, b| *a += b);
        score[d] += part.score_b;
        if let (Some(info), Some(ww), Some(wb)) = (info.as_mut(), part.info_ww, part.info_wb) {
            info.slice_mut(s![..d, ..d])
                .zip_mut_with(&ww, |a, b| *a += b);
            for k in 0..d {
                info[[k, d]] += wb[k];
                info[[d, k]] += wb[k];
            }
            info[[d, d]] += part.info_bb;
        }
        loss += part.loss;
        clamp_events += part.clamps;
    }
    Ok(BlockEval {
        score,
        information: info,
        loss,
        clamp_events,
    })
}

#[allow(clippy::too_many_arguments)]
fn chunk_partial(
    range: std::ops::Range<usize>,
    side: Side,
    own: usize,
    own_w: ArrayView1<f64>,
    own_b: f64,
    other_w: ArrayView2<f64>,
    other_b: ArrayView1<f64>,
    disp: &DispersionAssignment,
    data: &SparseRow,
    opts: &EvalOptions,
) -> Partial {
    let covariates = other_w.slice(s![range.clone(), ..]);
    let dots = covariates.dot(&own_w);
    let len = range.len();

    let mut score_coef = Array1::zeros(len);
    let mut info_coef = Array1::zeros(len);
    let mut loss = 0.0;
    let mut clamps = 0u64;

    // Stored cells falling in this range, in increasing column order.
    let lo = data.cols.partition_point(|&c| (c as usize) < range.start);
    let hi = data.cols.partition_point(|&c| (c as usize) < range.end);
    let mut stored = data.cols[lo..hi]
        .iter()
        .zip(&data.weights[lo..hi])
        .peekable();

    for (offset, other) in range.clone().enumerate() {
        let (i, j) = match side {
            Side::Row => (own, other),
            Side::Col => (other, own),
        };
        let bias = match side {
            Side::Row => own_b + other_b[offset + range.start],
            Side::Col => other_b[offset + range.start] + own_b,
        };
        let mut eta = dots[offset] + bias;
        if eta > ETA_CLAMP {
            eta = ETA_CLAMP;
            clamps += 1;
        }
        let p = disp.p(i, j);
        let inv_phi = if opts.phi_weighted {
            1.0 / disp.phi(i, j)
        } else {
            1.0
        };
        let mu_2p = ((2.0 - p) * eta).exp();
        let y = match stored.peek() {
            Some(&(&c, &v)) if c as usize == other => {
                stored.next();
                v
            }
            _ => 0.0,
        };
        if y > 0.0 {
            let mu = eta.exp();
            let mu_1p = ((1.0 - p) * eta).exp();
            score_coef[offset] = (y - mu) * mu_1p * inv_phi;
            info_coef[offset] = mu_2p * inv_phi;
            loss += -y * mu_1p / (1.0 - p) + mu_2p / (2.0 - p);
        } else {
            score_coef[offset] = -mu_2p * inv_phi;
            info_coef[offset] = (2.0 - p) * mu_2p * inv_phi;
            loss += mu_2p / (2.0 - p);
        }
    }

    let score_w = covariates.t().dot(&score_coef);
    let score_b = score_coef.sum();
    let (info_ww, info_wb, info_bb) = if opts.information {
        // sum_j c_j x_j x_j^T as one contraction over the chunk.
        let scaled = &covariates * &info_coef.view().insert_axis(Axis(1));
        let ww = covariates.t().dot(&scaled);
        let wb = scaled.sum_axis(Axis(0));
        (Some(ww), Some(wb), info_coef.sum())
    } else {
        (None, None, 0.0)
    };

    Partial {
        score_w,
        score_b,
        info_ww,
        info_wb,
        info_bb,
        loss,
        clamps,
    }
}

fn score_only() -> EvalOptions {
    EvalOptions {
        information: false,
        ..Default::default()
    }
}

/// Score vector `(U_w_i, U_b_i)` of row `i`.
pub fn row_score(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    row: &SparseRow,
) -> Result<Array1<f64>, ModelError> {
    Ok(evaluate_block(params, disp, Side::Row, row, &score_only())?.score)
}

/// Score vector `(U_wt_j, U_bt_j)` of column `j`.
pub fn col_score(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    col: &SparseRow,
) -> Result<Array1<f64>, ModelError> {
    Ok(evaluate_block(params, disp, Side::Col, col, &score_only())?.score)
}

/// Fisher information of `beta_i`.
pub fn row_information(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    row: &SparseRow,
) -> Result<Array2<f64>, ModelError> {
    let eval = evaluate_block(params, disp, Side::Row, row, &EvalOptions::default())?;
    Ok(eval.information.expect("information requested"))
}

/// Fisher information of `betat_j`.
pub fn col_information(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    col: &SparseRow,
) -> Result<Array2<f64>, ModelError> {
    let eval = evaluate_block(params, disp, Side::Col, col, &EvalOptions::default())?;
    Ok(eval.information.expect("information requested"))
}

/// Training loss `-sum (y theta - kappa)` restricted to one row.
pub fn row_loss(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    row: &SparseRow,
) -> Result<f64, ModelError> {
    Ok(evaluate_block(params, disp, Side::Row, row, &score_only())?.loss)
}

/// Training loss over all cells, accumulated row by row.
///
/// `rows` must cover every row index once (empty rows included) for the
/// zero cells to be counted.
pub fn total_loss<'a>(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    rows: impl IntoIterator<Item = &'a SparseRow>,
) -> Result<f64, ModelError> {
    accumulate_loss(params, disp, Side::Row, rows, false)
}

/// Same quantity as [`total_loss`], accumulated column by column.
pub fn total_loss_by_columns<'a>(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    cols: impl IntoIterator<Item = &'a SparseRow>,
) -> Result<f64, ModelError> {
    accumulate_loss(params, disp, Side::Col, cols, false)
}

/// Diagnostic variant weighting each cell by `1 / phi_ij`, i.e. the
/// negative log-likelihood without the `c(y, phi, p)` term.
pub fn weighted_total_loss<'a>(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    rows: impl IntoIterator<Item = &'a SparseRow>,
) -> Result<f64, ModelError> {
    accumulate_loss(params, disp, Side::Row, rows, true)
}

fn accumulate_loss<'a>(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    side: Side,
    blocks: impl IntoIterator<Item = &'a SparseRow>,
    weighted: bool,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for block in blocks {
        total += block_loss(params, disp, side, block, weighted)?;
    }
    Ok(total)
}

/// Loss of one block's cells, optionally divided by `phi_ij`.
pub fn block_loss(
    params: &EmbeddingParams,
    disp: &DispersionAssignment,
    side: Side,
    data: &SparseRow,
    weighted: bool,
) -> Result<f64, ModelError> {
    if !weighted {
        return Ok(evaluate_block(params, disp, side, data, &score_only())?.loss);
    }
    let n = params.n();
    data.check_bounds(n)?;
    let dense = data.to_dense(n);
    let mut total = 0.0;
    for (other, &y) in dense.iter().enumerate() {
        let (i, j) = match side {
            Side::Row => (data.index, other),
            Side::Col => (other, data.index),
        };
        let eta = linear_predictor(params, i, j).min(ETA_CLAMP);
        total += crate::tweedie::cell_loss_unchecked(y, eta, disp.p(i, j)) / disp.phi(i, j);
    }
    Ok(total)
}
