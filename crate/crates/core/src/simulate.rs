//! Synthetic symmetric Tweedie data with known parameters, and a harness
//! that trains several optimizers from a shared start.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::cooccur::{SparseMatrix, StoreError};
use crate::model::{linear_predictor, DispersionAssignment, EmbeddingParams, ModelError};
use crate::par::{self, Parallelism};
use crate::trainer::{OptimizerKind, TrainConfig, TrainError, Trainer, TrainingHistory};
use crate::tweedie::{sample_cpg, TweedieError, TweedieParams};

/// Log-dispersion intercepts of the reliable intervals of the small
/// Reuters table; the two-point interval is left out.
pub const REUTERS_DELTAS: [f64; 6] = [-1.009, -0.202, -0.127, 0.077, 0.776, -1.133];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n and d must be at least 1")]
    Size,
    #[error("vector file: {0}")]
    Vectors(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tweedie(#[from] TweedieError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("power range must satisfy 0.5 <= lo < hi <= 1")]
    Power,
    #[error("no dispersion values given")]
    NoDispersion,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorSource {
    /// Normalized standard Gaussian vectors.
    RandomUnit,
    /// Whitespace-separated text, one vector per line; a leading
    /// non-numeric token is ignored. The first `n` lines are used.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub vectors: VectorSource,
    /// `p_i ~ Uniform(p_low, p_high)`.
    pub p_low: f64,
    pub p_high: f64,
    /// Candidate log-dispersions; each index draws one uniformly and uses
    /// `phi_i = exp(delta / 2)`.
    pub delta_values: Vec<f64>,
    pub parallelism: Parallelism,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n: 300,
            d: 50,
            seed: 0,
            vectors: VectorSource::RandomUnit,
            p_low: 0.5,
            p_high: 1.0,
            delta_values: REUTERS_DELTAS.to_vec(),
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: SparseMatrix,
    /// `W = Wt` are the unit vectors; biases are zero.
    pub truth: EmbeddingParams,
    pub disp: DispersionAssignment,
    /// Log-dispersion drawn for each index.
    pub deltas: Vec<f64>,
}

fn read_vectors(path: &PathBuf, n: usize, d: usize) -> Result<Array2<f64>, SimError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Array2::zeros((n, d));
    let mut rows = 0;
    for line in reader.lines() {
        if rows == n {
            break;
        }
        let line = line?;
        let mut fields = line.split_whitespace().peekable();
        if fields.peek().is_some_and(|f| f.parse::<f64>().is_err()) {
            fields.next();
        }
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::Vectors(format!("line {}: {e}", rows + 1)))?;
        if values.is_empty() {
            continue;
        }
        if values.len() != d {
            return Err(SimError::Vectors(format!(
                "line {} has {} values, expected {d}",
                rows + 1,
                values.len()
            )));
        }
        out.row_mut(rows).assign(&ndarray::Array1::from(values));
        rows += 1;
    }
    if rows < n {
        return Err(SimError::Vectors(format!("only {rows} vectors, need {n}")));
    }
    Ok(out)
}

fn normalize_rows(w: &mut Array2<f64>) -> Result<(), SimError> {
    for (i, mut row) in w.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(SimError::Vectors(format!(
                "vector {} has zero or invalid norm",
                i + 1
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Draws the upper triangle of row `i` from its own random stream.
fn draw_row(
    truth: &EmbeddingParams,
    disp: &DispersionAssignment,
    seed: u64,
    i: usize,
) -> Result<Vec<(u32, f64)>, TweedieError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    let mut out = Vec::new();
    for j in i..truth.n() {
        let mu = linear_predictor(truth, i, j).exp();
        let y = sample_cpg(
            TweedieParams::new(mu, disp.phi(i, j), disp.p(i, j))?,
            &mut rng,
        )?;
        if y > 0.0 {
            out.push((j as u32, y));
        }
    }
    Ok(out)
}

/// One compound Poisson-Gamma draw per unordered pair, stored symmetrically.
pub fn generate(spec: &SimSpec) -> Result<Simulation, SimError> {
    let (n, d) = (spec.n, spec.d);
    if n == 0 || d == 0 {
        return Err(SimError::Size);
    }
    if !(0.5 <= spec.p_low && spec.p_low < spec.p_high && spec.p_high <= 1.0) {
        return Err(SimError::Power);
    }
    if spec.delta_values.is_empty() {
        return Err(SimError::NoDispersion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut w = match &spec.vectors {
        VectorSource::RandomUnit => {
            Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
        }
        VectorSource::File(path) => read_vectors(path, n, d)?,
    };
    normalize_rows(&mut w)?;
    // Open interval so p_i + p_j stays strictly inside (1, 2).
    let p: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = rng.random_range(spec.p_low..spec.p_high);
            if v > 0.5 {
                break v;
            }
        })
        .collect();
    let deltas: Vec<f64> = (0..n)
        .map(|_| spec.delta_values[rng.random_range(0..spec.delta_values.len())])
        .collect();
    let phi: Vec<f64> = deltas.iter().map(|dl| (dl / 2.0).exp()).collect();
    let disp = DispersionAssignment::new(p.clone(), p, phi.clone(), phi)?;
    let truth = EmbeddingParams::new(
        w.clone(),
        ndarray::Array1::zeros(n),
        w,
        ndarray::Array1::zeros(n),
    )?;

    let data = redraw(&truth, &disp, spec.seed, spec.parallelism)?;
    Ok(Simulation {
        data,
        truth,
        disp,
        deltas,
    })
}

/// Fresh symmetric data at fixed parameters; row `i` uses stream `i + 1`
/// of the generator seeded with `seed`.
pub fn redraw(
    truth: &EmbeddingParams,
    disp: &DispersionAssignment,
    seed: u64,
    parallelism: Parallelism,
) -> Result<SparseMatrix, SimError> {
    let n = truth.n();
    let upper = par::map_indexed(parallelism, n, |i| draw_row(truth, disp, seed, i));
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    for (i, row) in upper.into_iter().enumerate() {
        for (j, y) in row? {
            triplets.push((i as u32, j, y));
            if j as usize != i {
                triplets.push((j, i as u32, y));
            }
        }
    }
    triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
    Ok(SparseMatrix::from_sorted_triplets(n, triplets)?)
}

/// Outcome of one optimizer arm.
pub struct ArmResult {
    pub name: String,
    pub result: Result<(EmbeddingParams, TrainingHistory), TrainError>,
}

/// Trains every arm on the same data from the same starting parameters.
/// A failing arm is reported without stopping the others.
pub fn compare_optimizers(
    sim: &Simulation,
    init: &EmbeddingParams,
    arms: &[(String, TrainConfig)],
) -> Vec<ArmResult> {
    arms.iter()
        .map(|(name, cfg)| {
            let result =
                Trainer::new(init.clone(), sim.disp.clone(), cfg.clone()).and_then(|mut t| {
                    let h = t.run(&mut sim.data.reader(), None, &mut ())?;
                    Ok((t.into_params(), h))
                });
            if let Err(e) = &result {
                log::error!("arm {name} failed: {e}");
            }
            ArmResult {
                name: name.clone(),
                result,
            }
        })
        .collect()
}

/// The three standard arms sharing `base` apart from the optimizer.
/// Adam gets the reduce-on-plateau rule.
pub fn standard_arms(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    OptimizerKind::ALL
        .into_iter()
        .map(|kind| {
            let mut cfg = TrainConfig {
                optimizer: kind,
                trace_first_row: true,
                ..base.clone()
            };
            if kind == OptimizerKind::Adam && cfg.plateau.is_none() {
                cfg.plateau = Some(crate::optimizer::PlateauScheduler::default());
            }
            (kind.name().to_string(), cfg)
        })
        .collect()
}

pub fn write_trajectories<W: Write>(arms: &[ArmResult], mut out: W) -> std::io::Result<()> {
    writeln!(out, "arm,iter,loss,u_beta_norm,u_betatilde_norm")?;
    for arm in arms {
        if let Ok((_, h)) = &arm.result {
            for r in h.all() {
                writeln!(
                    out,
                    "{},{},{:e},{:e},{:e}",
                    arm.name, r.iter, r.loss, r.u_beta_norm, r.u_betatilde_norm
                )?;
            }
        }
    }
    out.flush()
}

pub fn write_epoch_traces<W: Write>(arms: &[ArmResult], mut out: W) -> std::io::Result<()> {
    writeln!(out, "arm,row,epoch,loss")?;
    for arm in arms {
        if let Ok((_, h)) = &arm.result {
            for e in &h.epoch_trace {
                writeln!(out, "{},{},{},{:e}", arm.name, e.row, e.epoch, e.loss)?;
            }
        }
    }
    out.flush()
}
