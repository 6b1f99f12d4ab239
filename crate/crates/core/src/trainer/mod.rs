//! Alternating Tweedie regression over all row and column blocks.
//!
//! One outer iteration sweeps the rows in order. For row `i` the trainer
//! runs `n_epoch` optimizer steps on `beta_i` with the column parameters
//! frozen, then (in symmetric mode, reusing the same row of data) `n_epoch`
//! steps on `betat_i`. After the sweep, the overall loss and score norms
//! are recomputed at the new parameters and the relative loss change is
//! compared with the convergence threshold.

mod checkpoint;
mod history;
mod pipeline;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cooccur::{RowSource, StoreError};
use crate::model::{
    evaluate_block, DispersionAssignment, EmbeddingParams, EvalOptions, ModelError, Side, SparseRow,
};
use crate::optimizer::{
    adam_step, fisher_step, relative_loss_change, AdamConfig, AdamState, ConvergenceConfig,
    FisherConfig, OptimizerError, PlateauScheduler,
};
use crate::par::Parallelism;

pub use checkpoint::{TrainerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use history::{
    EpochTrace, HistoryWriter, IterationRecord, StopReason, TrainingHistory, HISTORY_HEADER,
};
pub use pipeline::{prefetch_pipeline, sequential_rows, PipelineError, PipelineStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    /// Plain Fisher scoring, unit step.
    Fisher,
    /// Fisher scoring with step `lr / t^(1/4)`.
    FisherLr,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [Self::Fisher, Self::FisherLr, Self::Adam];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fisher => "fisher",
            Self::FisherLr => "fisher_lr",
            Self::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown optimizer {s:?} (expected fisher, fisher_lr or adam)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_epoch: u32,
    pub num_chunks: usize,
    pub optimizer: OptimizerKind,
    /// `adjust` is honoured only for [`OptimizerKind::FisherLr`].
    pub fisher: FisherConfig,
    pub adam: AdamConfig,
    /// Reduce Adam's step size when the overall loss plateaus.
    pub plateau: Option<PlateauScheduler>,
    pub convergence: ConvergenceConfig,
    /// Rows double as columns; each row of data is fetched once per sweep.
    pub symmetric: bool,
    pub seed: u64,
    pub init_range: f64,
    /// When false the biases keep their initial values.
    pub fit_bias: bool,
    /// Record row 0's per-epoch loss during iteration 1.
    pub trace_first_row: bool,
    /// Overlap row fetches with updates on a producer thread.
    pub prefetch: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epoch: 10,
            num_chunks: 1,
            optimizer: OptimizerKind::FisherLr,
            fisher: FisherConfig::default(),
            adam: AdamConfig::default(),
            plateau: None,
            convergence: ConvergenceConfig::default(),
            symmetric: true,
            seed: 0,
            init_range: 0.5,
            fit_bias: true,
            trace_first_row: false,
            prefetch: true,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.n_epoch == 0 {
            return bad("n_epoch must be at least 1");
        }
        if self.num_chunks == 0 {
            return bad("num_chunks must be at least 1");
        }
        if !(self.fisher.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.fisher.ridge >= 0.0) {
            return bad("ridge must be non-negative");
        }
        if !(self.adam.step_size > 0.0) {
            return bad("adam step size must be positive");
        }
        if !(self.convergence.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.convergence.maxit == 0 {
            return bad("maxit must be at least 1");
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return bad("init_range must be finite and non-negative");
        }
        Ok(())
    }

    /// Fisher settings with the step adjustment resolved from the optimizer kind.
    pub fn effective_fisher(&self) -> FisherConfig {
        FisherConfig {
            adjust: self.optimizer == OptimizerKind::FisherLr && self.fisher.adjust,
            ..self.fisher
        }
    }

    fn eval_options(&self, information: bool, phi_weighted: bool) -> EvalOptions {
        EvalOptions {
            num_chunks: self.num_chunks,
            parallelism: self.parallelism,
            information,
            phi_weighted,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("reading row {row}: {source}")]
    Store { row: usize, source: StoreError },
    #[error("store error: {0}")]
    Rewind(#[source] StoreError),
    #[error("divergence at {side:?} block {index} in iteration {iteration}: non-finite {what}")]
    Divergence {
        side: Side,
        index: usize,
        iteration: u64,
        what: &'static str,
    },
    #[error("information of {side:?} block {index} is singular in iteration {iteration}")]
    Singular {
        side: Side,
        index: usize,
        iteration: u64,
    },
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<PipelineError<TrainError>> for TrainError {
    fn from(e: PipelineError<TrainError>) -> Self {
        match e {
            PipelineError::Fetch { row, source } => TrainError::Store { row, source },
            PipelineError::Consumer(e) => e,
        }
    }
}

/// Entries of `W, b, Wt, bt` drawn in that order, i.i.d. uniform on
/// `(-init_range, init_range)`.
pub fn init_params(n: usize, d: usize, seed: u64, init_range: f64) -> EmbeddingParams {
    let mut params = EmbeddingParams::zeros(n, d);
    if init_range == 0.0 {
        return params;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(-init_range..init_range);
    params.w.iter_mut().for_each(|v| *v = draw());
    params.b.iter_mut().for_each(|v| *v = draw());
    params.wt.iter_mut().for_each(|v| *v = draw());
    params.bt.iter_mut().for_each(|v| *v = draw());
    params
}

/// Diagnostics from updating one or two blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockOutcome {
    pub ridge_events: u64,
    pub clamp_events: u64,
}

impl std::ops::AddAssign for BlockOutcome {
    fn add_assign(&mut self, o: Self) {
        self.ridge_events += o.ridge_events;
        self.clamp_events += o.clamp_events;
    }
}

/// Overall loss and aggregated score norms at one parameter snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub loss: f64,
    pub u_beta_norm: f64,
    pub u_betatilde_norm: f64,
}

/// Receives each history record as soon as it is produced.
pub trait TrainObserver {
    fn on_record(
        &mut self,
        _record: &IterationRecord,
        _state: &TrainerState,
    ) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct Trainer {
    cfg: TrainConfig,
    disp: DispersionAssignment,
    state: TrainerState,
}

impl Trainer {
    pub fn new(
        params: EmbeddingParams,
        disp: DispersionAssignment,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        let n = params.n();
        let d = params.dim();
        let adam = cfg.optimizer == OptimizerKind::Adam;
        let blocks = || {
            if adam {
                vec![AdamState::new(d + 1); n]
            } else {
                Vec::new()
            }
        };
        let state = TrainerState {
            iteration: 0,
            last_loss: f64::NAN,
            adam_step_size: cfg.adam.step_size,
            plateau: if adam { cfg.plateau } else { None },
            row_adam: blocks(),
            col_adam: blocks(),
            params,
        };
        Self::resume(state, disp, cfg)
    }

    /// Continues from a checkpointed state.
    pub fn resume(
        state: TrainerState,
        disp: DispersionAssignment,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let n = state.params.n();
        if disp.n() != n {
            return Err(TrainError::Config(format!(
                "dispersion covers {} indices, parameters {n}",
                disp.n()
            )));
        }
        let adam = cfg.optimizer == OptimizerKind::Adam;
        if adam && (state.row_adam.len() != n || state.col_adam.len() != n) {
            return Err(TrainError::Config("checkpoint lacks Adam state".into()));
        }
        Ok(Self { cfg, disp, state })
    }

    pub fn params(&self) -> &EmbeddingParams {
        &self.state.params
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_params(self) -> EmbeddingParams {
        self.state.params
    }

    fn divergence(&self, side: Side, index: usize, what: &'static str) -> TrainError {
        TrainError::Divergence {
            side,
            index,
            iteration: self.state.iteration + 1,
            what,
        }
    }

    /// Runs `n_epoch` steps on one block against frozen other-side parameters.
    fn update_block(
        &mut self,
        side: Side,
        data: &SparseRow,
        mut trace: Option<&mut Vec<EpochTrace>>,
    ) -> Result<BlockOutcome, TrainError> {
        let index = data.index;
        let t = self.state.iteration + 1;
        let d = self.state.params.dim();
        let adam = self.cfg.optimizer == OptimizerKind::Adam;
        let opts = self.cfg.eval_options(!adam, !adam);
        let fisher = self.cfg.effective_fisher();
        let mut out = BlockOutcome::default();
        for epoch in 0..self.cfg.n_epoch {
            let eval = evaluate_block(&self.state.params, &self.disp, side, data, &opts)?;
            out.clamp_events += eval.clamp_events;
            if !eval.loss.is_finite() {
                return Err(self.divergence(side, index, "loss"));
            }
            if !eval.score.iter().all(|v| v.is_finite()) {
                return Err(self.divergence(side, index, "score"));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(EpochTrace {
                    row: index,
                    epoch,
                    loss: eval.loss,
                });
            }
            let beta = self.state.params.block(side, index);
            let next = if adam {
                let mut grad = eval.score.mapv(|u| -u);
                if !self.cfg.fit_bias {
                    grad[d] = 0.0;
                }
                let st = match side {
                    Side::Row => &mut self.state.row_adam[index],
                    Side::Col => &mut self.state.col_adam[index],
                };
                let cfg = AdamConfig {
                    step_size: self.state.adam_step_size,
                    ..self.cfg.adam
                };
                adam_step(&beta, &grad, st, &cfg)
            } else {
                let info = eval.information.expect("information requested");
                let k = if self.cfg.fit_bias { d + 1 } else { d };
                if k == 0 {
                    break;
                }
                let sub_beta = beta.slice(s![..k]).to_owned();
                let sub_score = eval.score.slice(s![..k]).to_owned();
                let sub_info = info.slice(s![..k, ..k]).to_owned();
                let step = fisher_step(&sub_beta, &sub_score, &sub_info, t, &fisher).map_err(
                    |e| match e {
                        OptimizerError::Singular => TrainError::Singular {
                            side,
                            index,
                            iteration: t,
                        },
                        other => other.into(),
                    },
                )?;
                out.ridge_events += step.ridge_escalations as u64;
                let mut next = beta.clone();
                next.slice_mut(s![..k]).assign(&step.beta);
                next
            };
            if !next.iter().all(|v| v.is_finite()) {
                return Err(self.divergence(side, index, "parameter update"));
            }
            self.state.params.set_block(side, index, next.view());
        }
        if let Some(tr) = trace {
            let opts = self.cfg.eval_options(false, false);
            let eval = evaluate_block(&self.state.params, &self.disp, side, data, &opts)?;
            tr.push(EpochTrace {
                row: index,
                epoch: self.cfg.n_epoch,
                loss: eval.loss,
            });
        }
        Ok(out)
    }

    /// Updates `beta_i` from row `i`, then `betat_i` from the same data when
    /// the model is symmetric.
    pub fn update_row_block(
        &mut self,
        row: &SparseRow,
        trace: Option<&mut Vec<EpochTrace>>,
    ) -> Result<BlockOutcome, TrainError> {
        let mut out = self.update_block(Side::Row, row, trace)?;
        if self.cfg.symmetric {
            out += self.update_block(Side::Col, row, None)?;
        }
        Ok(out)
    }

    /// Updates `betat_j` from column `j`.
    pub fn update_col_block(&mut self, col: &SparseRow) -> Result<BlockOutcome, TrainError> {
        self.update_block(Side::Col, col, None)
    }

    fn check_source(&self, source: &dyn RowSource) -> Result<(), TrainError> {
        let n = self.state.params.n();
        if source.n() != n {
            return Err(TrainError::Config(format!(
                "data has {} rows, parameters {n}",
                source.n()
            )));
        }
        Ok(())
    }

    /// Overall training loss and score norms at the current parameters.
    ///
    /// In symmetric mode each row also serves as the matching column.
    pub fn measure(
        &self,
        rows: &mut dyn RowSource,
        cols: Option<&mut dyn RowSource>,
    ) -> Result<Measurement, TrainError> {
        self.check_source(rows)?;
        let opts = self.cfg.eval_options(false, true);
        let params = &self.state.params;
        let disp = &self.disp;
        let (mut loss, mut ub, mut ut) = (0.0, 0.0, 0.0);
        let symmetric = self.cfg.symmetric;
        source_rewind(rows)?;
        run_stream(rows, self.cfg.prefetch, |row| {
            let r = evaluate_block(params, disp, Side::Row, &row, &opts)?;
            loss += r.loss;
            ub += r.score.dot(&r.score);
            if symmetric {
                let c = evaluate_block(params, disp, Side::Col, &row, &opts)?;
                ut += c.score.dot(&c.score);
            }
            Ok(())
        })?;
        if !symmetric {
            let cols =
                cols.ok_or_else(|| TrainError::Config("asymmetric mode needs column data".into()))?;
            self.check_source(cols)?;
            source_rewind(cols)?;
            run_stream(cols, self.cfg.prefetch, |col| {
                let c = evaluate_block(params, disp, Side::Col, &col, &opts)?;
                ut += c.score.dot(&c.score);
                Ok(())
            })?;
        }
        if !loss.is_finite() {
            return Err(TrainError::Divergence {
                side: Side::Row,
                index: 0,
                iteration: self.state.iteration,
                what: "overall loss",
            });
        }
        Ok(Measurement {
            loss,
            u_beta_norm: ub.sqrt(),
            u_betatilde_norm: ut.sqrt(),
        })
    }

    fn sweep(
        &mut self,
        rows: &mut dyn RowSource,
        cols: Option<&mut dyn RowSource>,
        trace: &mut Vec<EpochTrace>,
    ) -> Result<BlockOutcome, TrainError> {
        let tracing = self.cfg.trace_first_row && self.state.iteration == 0;
        let mut total = BlockOutcome::default();
        source_rewind(rows)?;
        let prefetch = self.cfg.prefetch;
        let mut consume = |this: &mut Self, row: SparseRow| -> Result<(), TrainError> {
            let tr = (tracing && row.index == 0).then_some(&mut *trace);
            total += this.update_row_block(&row, tr)?;
            Ok(())
        };
        run_stream(rows, prefetch, |row| consume(self, row))?;
        if !self.cfg.symmetric {
            let cols =
                cols.ok_or_else(|| TrainError::Config("asymmetric mode needs column data".into()))?;
            source_rewind(cols)?;
            run_stream(cols, prefetch, |col| {
                total += self.update_col_block(&col)?;
                Ok(())
            })?;
        }
        Ok(total)
    }

    /// Runs outer iterations until the relative loss change drops below
    /// epsilon or `maxit` is reached.
    pub fn run(
        &mut self,
        rows: &mut dyn RowSource,
        mut cols: Option<&mut dyn RowSource>,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainingHistory, TrainError> {
        self.check_source(rows)?;
        if !self.cfg.symmetric && cols.is_none() {
            return Err(TrainError::Config(
                "asymmetric mode needs column data".into(),
            ));
        }
        let start = Instant::now();
        let m0 = self.measure(rows, reborrow(&mut cols))?;
        self.state.last_loss = m0.loss;
        let initial = IterationRecord {
            iter: self.state.iteration,
            loss: m0.loss,
            u_beta_norm: m0.u_beta_norm,
            u_betatilde_norm: m0.u_betatilde_norm,
            rel_change: f64::NAN,
            ridge_events: 0,
            clamp_events: 0,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer.on_record(&initial, &self.state)?;
        let mut history = TrainingHistory {
            initial,
            records: Vec::new(),
            stop: None,
            epoch_trace: Vec::new(),
        };
        if self.state.iteration >= self.cfg.convergence.maxit {
            history.stop = Some(StopReason::MaxIterations);
            return Ok(history);
        }
        loop {
            let started = Instant::now();
            let outcome = self.sweep(rows, reborrow(&mut cols), &mut history.epoch_trace)?;
            self.state.iteration += 1;
            let m = self.measure(rows, reborrow(&mut cols))?;
            let rel = relative_loss_change(self.state.last_loss, m.loss);
            self.state.last_loss = m.loss;
            if let Some(plateau) = self.state.plateau.as_mut() {
                self.state.adam_step_size = plateau.observe(m.loss, self.state.adam_step_size);
            }
            let record = IterationRecord {
                iter: self.state.iteration,
                loss: m.loss,
                u_beta_norm: m.u_beta_norm,
                u_betatilde_norm: m.u_betatilde_norm,
                rel_change: rel,
                ridge_events: outcome.ridge_events,
                clamp_events: outcome.clamp_events,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::debug!(
                "iter {} loss {:.6e} rel {:.3e} |U_b| {:.3e} |U_bt| {:.3e}",
                record.iter,
                record.loss,
                record.rel_change,
                record.u_beta_norm,
                record.u_betatilde_norm
            );
            history.records.push(record);
            observer.on_record(&record, &self.state)?;
            if rel < self.cfg.convergence.epsilon {
                history.stop = Some(StopReason::Converged);
                break;
            }
            if self.state.iteration >= self.cfg.convergence.maxit {
                history.stop = Some(StopReason::MaxIterations);
                break;
            }
        }
        Ok(history)
    }
}

fn reborrow<'s>(c: &'s mut Option<&mut dyn RowSource>) -> Option<&'s mut dyn RowSource> {
    match c {
        Some(c) => Some(&mut **c),
        None => None,
    }
}

fn source_rewind(source: &mut dyn RowSource) -> Result<(), TrainError> {
    source.rewind().map_err(TrainError::Rewind)
}

fn run_stream<F>(
    source: &mut dyn RowSource,
    prefetch: bool,
    f: F,
) -> Result<PipelineStats, TrainError>
where
    F: FnMut(SparseRow) -> Result<(), TrainError>,
{
    let stats = if prefetch {
        prefetch_pipeline(source, f)
    } else {
        sequential_rows(source, f)
    };
    Ok(stats?)
}

/// Symmetric training from `params` to convergence.
pub fn train(
    source: &mut dyn RowSource,
    params: EmbeddingParams,
    disp: DispersionAssignment,
    cfg: TrainConfig,
) -> Result<(EmbeddingParams, TrainingHistory), TrainError> {
    let mut trainer = Trainer::new(params, disp, cfg)?;
    let history = trainer.run(source, None, &mut ())?;
    Ok((trainer.into_params(), history))
}
