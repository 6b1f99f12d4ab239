//! Moment estimates of the power `p` and dispersion `phi` from the
//! log-variance versus log-mean relationship across rows.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::cooccur::RowStats;
use crate::model::{DispersionAssignment, ModelError};

/// Margin keeping every composed power inside the compound Poisson-Gamma range.
pub const EPS_P: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DispersionError {
    #[error("breakpoints must be finite and strictly increasing, with at least two")]
    Breakpoints,
    #[error("no row has positive mean and variance")]
    NoUsableRows,
    #[error("every interval has fewer than two usable points")]
    NoValidInterval,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Format(String),
}

/// Regression on one log-mean interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionInterval {
    pub lo: f64,
    pub hi: f64,
    /// Slope; NaN when flagged.
    pub p_hat: f64,
    /// Intercept `log(phi)`; NaN when flagged.
    pub delta_hat: f64,
    pub delta_high: f64,
    pub delta_low: f64,
    pub n_points: usize,
    /// Too few points (or no spread in log-mean) for a slope.
    pub flagged: bool,
}

impl DispersionInterval {
    /// Ordinary least squares of `y` on `x` over `points = (x, y)`.
    pub fn fit(lo: f64, hi: f64, points: &[(f64, f64)]) -> Self {
        let n = points.len();
        let mut out = Self {
            lo,
            hi,
            p_hat: f64::NAN,
            delta_hat: f64::NAN,
            delta_high: f64::NAN,
            delta_low: f64::NAN,
            n_points: n,
            flagged: true,
        };
        if n < 2 {
            return out;
        }
        let nf = n as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx <= 0.0 {
            return out;
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        // Intercepts of same-slope lines through each point; the extremes
        // are the points with largest and smallest signed residual.
        let (hi_d, lo_d) = points
            .iter()
            .map(|&(x, y)| y - slope * x)
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(h, l), d| {
                (h.max(d), l.min(d))
            });
        out.p_hat = slope;
        out.delta_hat = intercept;
        out.delta_high = hi_d.max(intercept);
        out.delta_low = lo_d.min(intercept);
        out.flagged = false;
        out
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionTable {
    pub intervals: Vec<DispersionInterval>,
}

fn usable(s: &RowStats) -> Option<(f64, f64)> {
    (s.mean > 0.0 && s.variance > 0.0).then(|| (s.mean.ln(), s.variance.ln()))
}

/// Unit-width integer breakpoints covering the observed log-mean range.
pub fn default_breakpoints(stats: &[RowStats]) -> Result<Vec<f64>, DispersionError> {
    let xs: Vec<f64> = stats.iter().filter_map(usable).map(|p| p.0).collect();
    if xs.is_empty() {
        return Err(DispersionError::NoUsableRows);
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor();
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor() + 1.0;
    Ok((0..=(hi - lo) as i64).map(|k| lo + k as f64).collect())
}

/// Fits one regression per interval between consecutive breakpoints.
///
/// Rows with zero mean or zero variance are excluded. The last interval is
/// closed on the right so a point exactly on the final breakpoint counts.
pub fn fit_table(
    stats: &[RowStats],
    breakpoints: &[f64],
) -> Result<DispersionTable, DispersionError> {
    if breakpoints.len() < 2
        || breakpoints.iter().any(|b| !b.is_finite())
        || breakpoints.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(DispersionError::Breakpoints);
    }
    let m = breakpoints.len() - 1;
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); m];
    for pt in stats.iter().filter_map(usable) {
        let x = pt.0;
        let k = breakpoints.partition_point(|&b| b <= x);
        if k >= 1 && k <= m {
            buckets[k - 1].push(pt);
        } else if x == breakpoints[m] {
            buckets[m - 1].push(pt);
        }
    }
    // Sorting makes the floating-point sums independent of row order.
    for b in &mut buckets {
        b.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.total_cmp(&c.1)));
    }
    let intervals = buckets
        .iter()
        .enumerate()
        .map(|(k, pts)| DispersionInterval::fit(breakpoints[k], breakpoints[k + 1], pts))
        .collect();
    Ok(DispersionTable { intervals })
}

impl DispersionTable {
    fn locate(&self, log_mean: f64) -> usize {
        let last = self.intervals.len() - 1;
        if log_mean.is_nan() || log_mean < self.intervals[0].lo {
            return 0;
        }
        self.intervals
            .iter()
            .position(|iv| iv.contains(log_mean))
            .unwrap_or(last)
    }

    fn nearest_valid(&self, k: usize) -> Option<usize> {
        let m = self.intervals.len();
        (0..m).find_map(|off| {
            [k.checked_sub(off), Some(k + off)]
                .into_iter()
                .flatten()
                .find(|&j| j < m && !self.intervals[j].flagged)
        })
    }

    /// Interval whose estimates a row with this mean receives.
    pub fn interval_for(&self, mean: f64) -> Option<&DispersionInterval> {
        let x = if mean > 0.0 {
            mean.ln()
        } else {
            f64::NEG_INFINITY
        };
        self.nearest_valid(self.locate(x))
            .map(|k| &self.intervals[k])
    }

    /// Per-index components with `p_i = clamp(p_hat)/2` and `phi_i = exp(delta_hat/2)`,
    /// identical for rows and columns.
    pub fn assign(&self, stats: &[RowStats]) -> Result<DispersionAssignment, DispersionError> {
        let mut p = Vec::with_capacity(stats.len());
        let mut phi = Vec::with_capacity(stats.len());
        let mut clamped = 0usize;
        for s in stats {
            let iv = self
                .interval_for(s.mean)
                .ok_or(DispersionError::NoValidInterval)?;
            let pc = iv.p_hat.clamp(1.0 + EPS_P, 2.0 - EPS_P);
            if pc != iv.p_hat {
                clamped += 1;
            }
            p.push(pc / 2.0);
            phi.push((iv.delta_hat / 2.0).exp());
        }
        if clamped > 0 {
            log::warn!("{clamped} rows received a power estimate outside (1, 2) and were clamped");
        }
        Ok(DispersionAssignment::new(p.clone(), p, phi.clone(), phi)?)
    }

    pub const CSV_HEADER: &'static str =
        "interval,delta,delta_high,delta_low,log_mu_lo,log_mu_hi,p,n_points,flagged";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for (k, iv) in self.intervals.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                k + 1,
                iv.delta_hat,
                iv.delta_high,
                iv.delta_low,
                iv.lo,
                iv.hi,
                iv.p_hat,
                iv.n_points,
                iv.flagged
            )?;
        }
        out.flush()
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, DispersionError> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?;
        if header.as_deref().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(DispersionError::Format("missing header".into()));
        }
        let mut intervals = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(DispersionError::Format(format!(
                    "row {} has {} fields",
                    k + 1,
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64, DispersionError> {
                s.trim()
                    .parse()
                    .map_err(|_| DispersionError::Format(format!("bad number {s:?}")))
            };
            intervals.push(DispersionInterval {
                delta_hat: num(f[1])?,
                delta_high: num(f[2])?,
                delta_low: num(f[3])?,
                lo: num(f[4])?,
                hi: num(f[5])?,
                p_hat: num(f[6])?,
                n_points: f[7]
                    .trim()
                    .parse()
                    .map_err(|_| DispersionError::Format(format!("bad count {:?}", f[7])))?,
                flagged: f[8]
                    .trim()
                    .parse()
                    .map_err(|_| DispersionError::Format(format!("bad flag {:?}", f[8])))?,
            });
        }
        if intervals.is_empty() {
            return Err(DispersionError::Format("no intervals".into()));
        }
        Ok(Self { intervals })
    }
}

/// Header of the per-index assignment file.
pub const ASSIGNMENT_HEADER: &str = "index,p_row,p_col,phi_row,phi_col";

pub fn write_assignment<W: Write>(a: &DispersionAssignment, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ASSIGNMENT_HEADER}")?;
    for i in 0..a.n() {
        writeln!(
            out,
            "{i},{},{},{},{}",
            a.p_row[i], a.p_col[i], a.phi_row[i], a.phi_col[i]
        )?;
    }
    out.flush()
}

/// Reads rows `0..n` in order and validates the result.
pub fn read_assignment<R: BufRead>(input: R) -> Result<DispersionAssignment, DispersionError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(ASSIGNMENT_HEADER) {
        return Err(DispersionError::Format("missing assignment header".into()));
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = cols[0].len();
        if f.len() != 5 || f[0].parse::<usize>().ok() != Some(expected) {
            return Err(DispersionError::Format(format!(
                "bad assignment row {line:?}"
            )));
        }
        for (c, v) in cols.iter_mut().zip(&f[1..]) {
            c.push(
                v.parse()
                    .map_err(|_| DispersionError::Format(format!("bad number {v:?}")))?,
            );
        }
    }
    let [p_row, p_col, phi_row, phi_col] = cols;
    Ok(DispersionAssignment::new(p_row, p_col, phi_row, phi_col)?)
}
