use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tweedie_embed::cooccur::{
    apply_log1p_file, count_to_store, CooccurrenceStore, CorpusFile, CountConfig, RowSource,
    RowStats, StoreReader, Vocabulary,
};
use tweedie_embed::dispersion::{
    default_breakpoints, fit_table, read_assignment, write_assignment,
};
use tweedie_embed::embeddings::{Embeddings, ExportMode};
use tweedie_embed::model::DispersionAssignment;
use tweedie_embed::optimizer::{AdamConfig, ConvergenceConfig, FisherConfig, PlateauScheduler};
use tweedie_embed::par::Parallelism;
use tweedie_embed::simulate::{
    compare_optimizers, generate, standard_arms, write_epoch_traces, write_trajectories, SimSpec,
    VectorSource,
};
use tweedie_embed::trainer::{
    init_params, HistoryWriter, IterationRecord, OptimizerKind, StopReason, TrainConfig,
    TrainError, TrainObserver, Trainer, TrainerState,
};

use crate::config::{parse_list, Resolver};
use crate::{
    Common, CountArgs, DispersionArgs, ExportArgs, NeighborsArgs, SimulateArgs, StatsArgs,
    TrainArgs, VocabArgs,
};

/// Invalid combination of otherwise well-formed settings.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn start(common: &Common, command: &str) -> Result<(Resolver, Parallelism)> {
    let mut r = Resolver::load(common.config.as_deref())?;
    let parallelism = if r.flag("sequential", common.sequential)? {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    log::debug!("{command}: config file {:?}", common.config);
    Ok((r, parallelism))
}

fn log_resolved(command: &str, r: &Resolver) {
    log::info!("{command} resolved config: {}", r.summary());
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("cannot open {}", path.display())
    })?))
}

/// Writes `path` through a temporary file in the same directory.
fn write_atomic(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn vocab(a: VocabArgs) -> Result<()> {
    let (mut r, _) = start(&a.common, "vocab")?;
    let corpus = r.path("corpus", a.corpus)?;
    let out = r.path("out", a.out)?;
    let max_size = r.value("vocab-size", a.vocab_size, 100_000)?;
    let min_count = r.value("min-count", a.min_count, 1)?;
    log_resolved("vocab", &r);

    let mut read_error = None;
    let lines = open(&corpus)?
        .lines()
        .map_while(|l| l.map_err(|e| read_error = Some(e)).ok());
    let v = Vocabulary::build(lines, max_size, min_count);
    if let Some(e) = read_error {
        return Err(e).with_context(|| format!("reading {}", corpus.display()));
    }
    let v = v?;
    v.write(create(&out)?)?;
    log::info!("{} tokens written to {}", v.len(), out.display());
    Ok(())
}

pub fn count(a: CountArgs) -> Result<()> {
    let (mut r, parallelism) = start(&a.common, "count")?;
    let corpus = r.path("corpus", a.corpus)?;
    let vocab_path = r.path("vocab", a.vocab)?;
    let out = r.path("out", a.out)?;
    let defaults = CountConfig::default();
    let cfg = CountConfig {
        window: r.value("window", a.window, defaults.window)?,
        shards: r.value("shards", a.shards, defaults.shards)?,
        spill_threshold: r.value(
            "spill-threshold",
            a.spill_threshold,
            defaults.spill_threshold,
        )?,
        parallelism,
    };
    let log1p = r.flag("log1p", a.log1p)?;
    log_resolved("count", &r);

    let vocab = Vocabulary::read(open(&vocab_path)?)?;
    let mut header = count_to_store(&CorpusFile(corpus), &vocab, &cfg, &out)?;
    if log1p {
        header = apply_log1p_file(&out, &out)?;
    }
    println!(
        "n={} records={} total_tokens={} window={} log1p={}",
        header.n, header.records, header.total_tokens, header.window, header.log1p
    );
    Ok(())
}

/// Moments of every row, optionally of `ln(1 + x)`.
fn row_stats(store: &CooccurrenceStore, log1p: bool) -> Result<Vec<RowStats>> {
    if log1p && store.header().log1p {
        log::warn!("store already holds ln(1 + x); not transforming again");
    }
    let transform = log1p && !store.header().log1p;
    let mut reader = store.reader()?;
    let n = reader.n();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = reader.next_row(i)?;
        if transform {
            row.weights.iter_mut().for_each(|w| *w = w.ln_1p());
        }
        out.push(RowStats::from_row(&row, n));
    }
    Ok(out)
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let (mut r, _) = start(&a.common, "stats")?;
    let store_path = r.path("store", a.store)?;
    let out = r.path("out", a.out)?;
    let log1p = r.flag("log1p", a.log1p)?;
    log_resolved("stats", &r);

    let store = CooccurrenceStore::open(&store_path)?;
    let stats = row_stats(&store, log1p)?;
    let mut w = create(&out)?;
    writeln!(w, "row,mean,variance,nnz,skewness")?;
    for (i, s) in stats.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{}", s.mean, s.variance, s.nnz, s.skewness)?;
    }
    w.flush()?;
    Ok(())
}

pub fn dispersion(a: DispersionArgs) -> Result<()> {
    let (mut r, _) = start(&a.common, "dispersion")?;
    let store_path = r.path("store", a.store)?;
    let out = r.path("out", a.out)?;
    let assignment_out = r.optional_path("assignment-out", a.assignment_out)?;
    let breakpoints = r.optional::<String>("breakpoints", a.breakpoints)?;
    let log1p = r.flag("log1p", a.log1p)?;
    log_resolved("dispersion", &r);

    let store = CooccurrenceStore::open(&store_path)?;
    let stats = row_stats(&store, log1p)?;
    let breaks = match breakpoints {
        Some(s) => parse_list("breakpoints", &s)?,
        None => default_breakpoints(&stats)?,
    };
    let table = fit_table(&stats, &breaks)?;
    table.write_csv(create(&out)?)?;
    for (k, iv) in table.intervals.iter().enumerate() {
        let flag = if iv.flagged { " (flagged)" } else { "" };
        println!(
            "interval {} [{}, {}): p={:.4} delta={:.4} points={}{flag}",
            k + 1,
            iv.lo,
            iv.hi,
            iv.p_hat,
            iv.delta_hat,
            iv.n_points
        );
    }
    if let Some(path) = assignment_out {
        write_assignment(&table.assign(&stats)?, create(&path)?)?;
    }
    Ok(())
}

struct CliObserver {
    history: Option<HistoryWriter<BufWriter<File>>>,
    checkpoint: Option<PathBuf>,
}

impl TrainObserver for CliObserver {
    fn on_record(&mut self, rec: &IterationRecord, state: &TrainerState) -> Result<(), TrainError> {
        println!(
            "iter {:>4}  loss {:.10e}  rel {:.3e}  |U_beta| {:.4e}  |U_betatilde| {:.4e}",
            rec.iter, rec.loss, rec.rel_change, rec.u_beta_norm, rec.u_betatilde_norm
        );
        if let Some(h) = self.history.as_mut() {
            h.write(rec)?;
        }
        if let Some(path) = &self.checkpoint {
            write_atomic(path, |w| state.write(w))?;
        }
        Ok(())
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut r, parallelism) = start(&a.common, "train")?;
    let store_path = r.path("store", a.store)?;
    let resume = r.optional_path("resume", a.resume)?;
    let dim = r.value("dim", a.dim, 100)?;
    let defaults = TrainConfig::default();
    let optimizer = r.value("optimizer", a.optimizer, defaults.optimizer)?;
    let no_plateau = r.flag("no-plateau", a.no_plateau)?;
    let cfg = TrainConfig {
        n_epoch: r.value("n-epoch", a.n_epoch, defaults.n_epoch)?,
        num_chunks: r.value("num-chunks", a.num_chunks, defaults.num_chunks)?,
        optimizer,
        fisher: FisherConfig {
            lr: r.value("lr", a.lr, defaults.fisher.lr)?,
            adjust: !r.flag("no-lr-adjust", a.no_lr_adjust)?,
            ..defaults.fisher
        },
        adam: AdamConfig {
            step_size: r.value("adam-step", a.adam_step, defaults.adam.step_size)?,
            ..defaults.adam
        },
        plateau: (optimizer == OptimizerKind::Adam && !no_plateau).then(PlateauScheduler::default),
        convergence: ConvergenceConfig {
            epsilon: r.value("epsilon", a.epsilon, defaults.convergence.epsilon)?,
            maxit: r.value("maxit", a.maxit, defaults.convergence.maxit)?,
        },
        seed: r.value("seed", a.seed, defaults.seed)?,
        init_range: r.value("init-range", a.init_range, defaults.init_range)?,
        fit_bias: !r.flag("no-bias", a.no_bias)?,
        prefetch: !r.flag("no-prefetch", a.no_prefetch)?,
        parallelism,
        ..defaults
    };
    let log1p = r.flag("log1p", a.log1p)?;
    let assignment = r.optional_path("assignment", a.assignment)?;
    let (power, phi) = if assignment.is_none() {
        (r.value("power", a.power, 1.5)?, r.value("phi", a.phi, 1.0)?)
    } else {
        if a.power.is_some() || a.phi.is_some() {
            bail!(UsageError(
                "--power/--phi cannot be combined with --assignment".into()
            ));
        }
        (f64::NAN, f64::NAN)
    };
    let history_path = r.optional_path("history", a.history)?;
    let checkpoint = r.optional_path("checkpoint", a.checkpoint)?;
    let timing = r.flag("timing", a.timing)?;
    log_resolved("train", &r);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    let mut store = CooccurrenceStore::open(&store_path)?;
    let _scratch;
    if log1p && !store.header().log1p {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("log1p.store");
        apply_log1p_file(&store_path, &path)?;
        store = CooccurrenceStore::open(&path)?;
        _scratch = dir;
    } else if log1p {
        log::warn!("store already holds ln(1 + x); not transforming again");
    }
    if !store.verify_symmetric()? {
        log::warn!("store is not symmetric; rows also serve as columns in symmetric training");
    }
    let n = store.n();
    let disp = match &assignment {
        Some(p) => read_assignment(open(p)?)?,
        None => {
            DispersionAssignment::constant(n, power, phi).map_err(|e| UsageError(e.to_string()))?
        }
    };
    if disp.n() != n {
        bail!(
            "assignment covers {} indices but the store has {n} rows",
            disp.n()
        );
    }

    let mut trainer = match &resume {
        Some(path) => {
            let state = TrainerState::read(open(path)?)
                .with_context(|| format!("reading {}", path.display()))?;
            if state.params.n() != n || state.params.dim() != dim {
                bail!(
                    "checkpoint has n={} d={}, expected n={n} d={dim}",
                    state.params.n(),
                    state.params.dim()
                );
            }
            Trainer::resume(state, disp, cfg)?
        }
        None => Trainer::new(init_params(n, dim, cfg.seed, cfg.init_range), disp, cfg)?,
    };
    let mut observer = CliObserver {
        history: history_path
            .as_deref()
            .map(|p| HistoryWriter::new(create(p)?, timing).map_err(anyhow::Error::from))
            .transpose()?,
        checkpoint,
    };
    let mut reader: StoreReader = store.reader()?;
    let history = trainer.run(&mut reader, None, &mut observer)?;
    match history.stop {
        Some(StopReason::Converged) => println!(
            "converged after {} iterations, loss {:.10e}",
            history.last().iter,
            history.final_loss()
        ),
        _ => println!(
            "stopped at maxit after {} iterations, loss {:.10e}",
            history.last().iter,
            history.final_loss()
        ),
    }
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let (mut r, parallelism) = start(&a.common, "simulate")?;
    let defaults = SimSpec::default();
    let spec = SimSpec {
        n: r.value("n", a.n, defaults.n)?,
        d: r.value("dim", a.dim, defaults.d)?,
        seed: r.value("seed", a.seed, defaults.seed)?,
        vectors: match r.optional_path("vectors", a.vectors)? {
            Some(p) => VectorSource::File(p),
            None => VectorSource::RandomUnit,
        },
        parallelism,
        ..defaults
    };
    let out_dir = r.path("out-dir", a.out_dir)?;
    let compare = r.flag("compare", a.compare)?;
    let train_defaults = TrainConfig::default();
    let base = TrainConfig {
        fisher: FisherConfig {
            lr: r.value("lr", a.lr, train_defaults.fisher.lr)?,
            ..train_defaults.fisher
        },
        adam: AdamConfig {
            step_size: r.value("adam-step", a.adam_step, train_defaults.adam.step_size)?,
            ..train_defaults.adam
        },
        n_epoch: r.value("n-epoch", a.n_epoch, train_defaults.n_epoch)?,
        convergence: ConvergenceConfig {
            epsilon: r.value("epsilon", a.epsilon, train_defaults.convergence.epsilon)?,
            maxit: r.value("maxit", a.maxit, train_defaults.convergence.maxit)?,
        },
        init_range: r.value("init-range", a.init_range, train_defaults.init_range)?,
        fit_bias: !r.flag("no-bias", a.no_bias)?,
        seed: spec.seed,
        parallelism,
        ..train_defaults
    };
    log_resolved("simulate", &r);
    base.validate().map_err(|e| UsageError(e.to_string()))?;

    let sim = generate(&spec)?;
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let header = sim.data.write_store(&out_dir.join("data.store"))?;
    let truth = TrainerState {
        params: sim.truth.clone(),
        iteration: 0,
        last_loss: f64::NAN,
        adam_step_size: base.adam.step_size,
        plateau: None,
        row_adam: Vec::new(),
        col_adam: Vec::new(),
    };
    write_atomic(&out_dir.join("truth.ckpt"), |w| truth.write(w))?;
    write_assignment(&sim.disp, create(&out_dir.join("assignment.csv"))?)?;
    println!("n={} d={} records={}", spec.n, spec.d, header.records);

    if compare {
        let init = init_params(spec.n, spec.d, base.seed, base.init_range);
        let arms = compare_optimizers(&sim, &init, &standard_arms(&base));
        write_trajectories(&arms, create(&out_dir.join("trajectories.csv"))?)?;
        write_epoch_traces(&arms, create(&out_dir.join("epoch_trace.csv"))?)?;
        let mut failed = 0;
        for arm in &arms {
            match &arm.result {
                Ok((_, h)) => println!(
                    "{}: {} iterations, final loss {:.10e}{}",
                    arm.name,
                    h.last().iter,
                    h.final_loss(),
                    if h.converged() { " (converged)" } else { "" }
                ),
                Err(e) => {
                    failed += 1;
                    println!("{}: failed: {e}", arm.name);
                }
            }
        }
        if failed > 0 {
            bail!("{failed} optimizer arm(s) failed");
        }
    }
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<()> {
    let (mut r, _) = start(&a.common, "export")?;
    let checkpoint = r.path("checkpoint", a.checkpoint)?;
    let vocab_path = r.path("vocab", a.vocab)?;
    let out = r.path("out", a.out)?;
    let mode = r.value("export-mode", a.export_mode, ExportMode::default())?;
    log_resolved("export", &r);

    let state = TrainerState::read(open(&checkpoint)?)
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    let vocab = Vocabulary::read(open(&vocab_path)?)?;
    let emb = Embeddings::from_params(&state.params, vocab.tokens(), mode)?;
    emb.write(create(&out)?)?;
    Ok(())
}

pub fn neighbors(a: NeighborsArgs) -> Result<()> {
    let (mut r, _) = start(&a.common, "neighbors")?;
    let path = r.path("embeddings", a.embeddings)?;
    let k = r.value("k", a.k, 10)?;
    log_resolved("neighbors", &r);

    let emb = Embeddings::read(open(&path)?)?;
    for (tok, sim) in emb.neighbors(&a.query, k)? {
        println!("{tok}\t{sim:.6}");
    }
    Ok(())
}
