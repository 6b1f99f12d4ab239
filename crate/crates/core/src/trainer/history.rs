use std::io::Write;

/// Snapshot of the objective after one outer iteration (iteration 0 is the
/// starting point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: u64,
    pub loss: f64,
    /// `sqrt(sum_i |U_beta_i|^2)` at the end of the iteration.
    pub u_beta_norm: f64,
    pub u_betatilde_norm: f64,
    /// NaN for iteration 0.
    pub rel_change: f64,
    pub ridge_events: u64,
    pub clamp_events: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
}

/// Loss of one block at the start of an inner epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTrace {
    pub row: usize,
    pub epoch: u32,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub initial: IterationRecord,
    pub records: Vec<IterationRecord>,
    pub stop: Option<StopReason>,
    /// Row-block losses for row 0 during iteration 1, when tracing is on.
    pub epoch_trace: Vec<EpochTrace>,
}

impl TrainingHistory {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().unwrap_or(&self.initial)
    }

    pub fn final_loss(&self) -> f64 {
        self.last().loss
    }

    pub fn converged(&self) -> bool {
        self.stop == Some(StopReason::Converged)
    }

    /// Initial record followed by every iteration.
    pub fn all(&self) -> impl Iterator<Item = &IterationRecord> {
        std::iter::once(&self.initial).chain(&self.records)
    }
}

pub const HISTORY_HEADER: &str =
    "iter,loss,u_beta_norm,u_betatilde_norm,rel_change,ridge_events,clamp_events,seconds";

/// CSV history sink flushed after every record.
///
/// Wall-clock time is written as 0 unless timing is enabled, so repeated
/// runs produce byte-identical files.
pub struct HistoryWriter<W: Write> {
    out: W,
    timing: bool,
}

impl<W: Write> HistoryWriter<W> {
    pub fn new(mut out: W, timing: bool) -> std::io::Result<Self> {
        writeln!(out, "{HISTORY_HEADER}")?;
        out.flush()?;
        Ok(Self { out, timing })
    }

    pub fn write(&mut self, r: &IterationRecord) -> std::io::Result<()> {
        let secs = if self.timing { r.seconds } else { 0.0 };
        writeln!(
            self.out,
            "{},{:e},{:e},{:e},{:e},{},{},{}",
            r.iter,
            r.loss,
            r.u_beta_norm,
            r.u_betatilde_norm,
            r.rel_change,
            r.ridge_events,
            r.clamp_events,
            secs
        )?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
