use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tweedie_embed::cooccur::{CooccurrenceStore, SparseMatrix, StoreWriter};
use tweedie_embed::embeddings::Embeddings;
use tweedie_embed::model::EmbeddingParams;
use tweedie_embed::trainer::{TrainerState, HISTORY_HEADER};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tweedie-embed"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small symmetric store with positive and zero cells.
fn toy_store(dir: &Path, n: usize) -> PathBuf {
    let dense: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            ((i + 1) * (j + 1) % 5) as f64 * 0.7
        })
        .collect();
    let path = dir.join("toy.store");
    SparseMatrix::from_dense(n, &dense)
        .unwrap()
        .write_store(&path)
        .unwrap();
    path
}

fn vocab_file(dir: &Path, tokens: &[&str]) -> PathBuf {
    let path = dir.join("vocab.tsv");
    let body: String = tokens.iter().map(|t| format!("{t}\t1\n")).collect();
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn count_three_token_corpus() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "a b c\n").unwrap();
    let vocab = dir.path().join("vocab.tsv");
    let store = dir.path().join("c.store");
    ok(&["vocab", "--corpus", s(&corpus), "--out", s(&vocab)]);
    let stdout = ok(&[
        "count",
        "--corpus",
        s(&corpus),
        "--vocab",
        s(&vocab),
        "--out",
        s(&store),
        "--window",
        "10",
    ]);
    assert!(stdout.contains("n=3"), "{stdout}");
    let m = CooccurrenceStore::open(&store).unwrap().load().unwrap();
    // Tokens tie on frequency, so ids follow lexicographic order.
    assert_eq!(m.get(0, 2), 0.5);
    assert_eq!(m.get(2, 0), 0.5);
    assert_eq!(m.get(0, 1), 1.0);
    assert_eq!(m.get(0, 0), 0.0);
}

#[test]
fn count_is_reproducible_and_log1p_transforms() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "x y z x y\nz z y x\nq x y\n").unwrap();
    let vocab = dir.path().join("v.tsv");
    ok(&[
        "vocab",
        "--corpus",
        s(&corpus),
        "--out",
        s(&vocab),
        "--min-count",
        "2",
    ]);
    let vocab_text = fs::read_to_string(&vocab).unwrap();
    assert!(!vocab_text.contains('q'));
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for out in [&a, &b] {
        ok(&[
            "count",
            "--corpus",
            s(&corpus),
            "--vocab",
            s(&vocab),
            "--out",
            s(out),
            "--window",
            "3",
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    ok(&[
        "count",
        "--corpus",
        s(&corpus),
        "--vocab",
        s(&vocab),
        "--out",
        s(&c),
        "--window",
        "3",
        "--log1p",
    ]);
    let raw = CooccurrenceStore::open(&a).unwrap().load().unwrap();
    let logged = CooccurrenceStore::open(&c).unwrap();
    assert!(logged.header().log1p);
    let logged = logged.load().unwrap();
    for ((_, _, x), (_, _, y)) in raw.triplets().zip(logged.triplets()) {
        assert_eq!(x.ln_1p(), y);
    }
}

#[test]
fn train_converges_and_writes_history() {
    let dir = TempDir::new().unwrap();
    let store = toy_store(dir.path(), 6);
    let history = dir.path().join("h.csv");
    let ckpt = dir.path().join("m.ckpt");
    let stdout = ok(&[
        "train",
        "--store",
        s(&store),
        "--dim",
        "2",
        "--optimizer",
        "fisher_lr",
        "--lr",
        "0.5",
        "--epsilon",
        "1e-4",
        "--maxit",
        "100",
        "--history",
        s(&history),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert!(stdout.contains("converged after"), "{stdout}");
    let iters = stdout.lines().filter(|l| l.starts_with("iter")).count();
    let text = fs::read_to_string(&history).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HISTORY_HEADER));
    assert_eq!(lines.count(), iters);
    let state = TrainerState::read(fs::File::open(&ckpt).unwrap()).unwrap();
    assert_eq!(state.iteration as usize, iters - 1);
    assert_eq!((state.params.n(), state.params.dim()), (6, 2));
}

#[test]
fn train_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let store = toy_store(dir.path(), 7);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let h = dir.path().join(format!("h{k}.csv"));
        let c = dir.path().join(format!("c{k}.ckpt"));
        ok(&[
            "train",
            "--store",
            s(&store),
            "--dim",
            "3",
            "--maxit",
            "4",
            "--seed",
            "9",
            "--optimizer",
            "adam",
            "--history",
            s(&h),
            "--checkpoint",
            s(&c),
        ]);
        outputs.push((fs::read(&h).unwrap(), fs::read(&c).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn resumed_training_matches_a_single_run() {
    let dir = TempDir::new().unwrap();
    let store = toy_store(dir.path(), 6);
    let (full, part) = (dir.path().join("full.ckpt"), dir.path().join("part.ckpt"));
    let common = [
        "--store",
        s(&store),
        "--dim",
        "2",
        "--epsilon",
        "1e-12",
        "--optimizer",
        "fisher_lr",
    ];
    fn with<'a>(common: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        common.iter().chain(extra).copied().collect()
    }
    ok(&[
        &["train"][..],
        &with(&common, &["--maxit", "4", "--checkpoint", s(&full)]),
    ]
    .concat());
    ok(&[
        &["train"][..],
        &with(&common, &["--maxit", "2", "--checkpoint", s(&part)]),
    ]
    .concat());
    let stdout = ok(&[
        &["train"][..],
        &with(
            &common,
            &[
                "--maxit",
                "4",
                "--resume",
                s(&part),
                "--checkpoint",
                s(&part),
            ],
        ),
    ]
    .concat());
    assert!(
        stdout.lines().any(|l| l.starts_with("iter    3")),
        "{stdout}"
    );
    assert_eq!(fs::read(&full).unwrap(), fs::read(&part).unwrap());
}

#[test]
fn dispersion_recovers_constant_power() {
    let dir = TempDir::new().unwrap();
    let n = 600u32;
    let store = dir.path().join("cpg.store");
    // Rows with mean mu_i and variance mu_i^1.5 drawn exactly by the sampler.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let mut w = StoreWriter::create(&store, n as u64, 1, 0, false).unwrap();
    for i in 0..n {
        let mu = 10f64.powf(i as f64 / n as f64);
        let tp = tweedie_embed::tweedie::TweedieParams::new(mu, 1.0, 1.5).unwrap();
        for j in 0..n {
            let y = tweedie_embed::tweedie::sample_cpg(tp, &mut rng).unwrap();
            if y > 0.0 {
                w.push(i, j, y).unwrap();
            }
        }
    }
    w.finish().unwrap();
    let table = dir.path().join("table.csv");
    let assign = dir.path().join("assign.csv");
    let stdout = ok(&[
        "dispersion",
        "--store",
        s(&store),
        "--out",
        s(&table),
        "--breakpoints",
        "-1,4",
        "--assignment-out",
        s(&assign),
    ]);
    let p: f64 = stdout
        .split("p=")
        .nth(1)
        .and_then(|t| t.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((p - 1.5).abs() < 0.1, "{stdout}");
    assert!(fs::read_to_string(&table)
        .unwrap()
        .starts_with("interval,delta,"));
    let a = tweedie_embed::dispersion::read_assignment(std::io::BufReader::new(
        fs::File::open(&assign).unwrap(),
    ))
    .unwrap();
    assert_eq!(a.n(), n as usize);

    let stats = dir.path().join("stats.csv");
    ok(&["stats", "--store", s(&store), "--out", s(&stats)]);
    assert_eq!(
        fs::read_to_string(&stats).unwrap().lines().count(),
        n as usize + 1
    );
}

#[test]
fn export_and_neighbors() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("one.ckpt");
    let params = EmbeddingParams::new(
        ndarray::array![[1.0, 0.0], [0.0, 2.0], [3.0, 0.1]],
        ndarray::Array1::zeros(3),
        ndarray::array![[0.0, 1.0], [0.0, 2.0], [3.0, -0.1]],
        ndarray::Array1::zeros(3),
    )
    .unwrap();
    let state = TrainerState {
        params,
        iteration: 0,
        last_loss: f64::NAN,
        adam_step_size: 1e-3,
        plateau: None,
        row_adam: Vec::new(),
        col_adam: Vec::new(),
    };
    state.write(fs::File::create(&ckpt).unwrap()).unwrap();
    let vocab = vocab_file(dir.path(), &["tok", "up", "right"]);
    let out = dir.path().join("emb.txt");
    ok(&[
        "export",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("tok 0.5 0.5"));
    assert_eq!(text.lines().count(), 3);
    let emb = Embeddings::read(text.as_bytes()).unwrap();
    assert!((emb.vectors[[2, 1]] - 0.0).abs() < 1e-12);

    let raw = dir.path().join("w.txt");
    ok(&[
        "export",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--out",
        s(&raw),
        "--export-mode",
        "w",
    ]);
    assert!(fs::read_to_string(&raw).unwrap().starts_with("tok 1 0\n"));

    let stdout = ok(&["neighbors", "--embeddings", s(&out), "--k", "2", "up"]);
    let names: Vec<&str> = stdout
        .lines()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(names, ["tok", "right"]);

    let short = vocab_file(dir.path(), &["tok"]);
    assert_eq!(
        run(&[
            "export",
            "--checkpoint",
            s(&ckpt),
            "--vocab",
            s(&short),
            "--out",
            s(&out)
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        run(&["neighbors", "--embeddings", s(&out), "missing"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn simulate_writes_artifacts_reproducibly() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "simulate",
        "--n",
        "20",
        "--dim",
        "3",
        "--seed",
        "4",
        "--out-dir",
        s(&a),
    ]);
    let stdout = ok(&[
        "simulate",
        "--n",
        "20",
        "--dim",
        "3",
        "--seed",
        "4",
        "--out-dir",
        s(&b),
        "--compare",
        "--maxit",
        "3",
    ]);
    assert_eq!(
        fs::read(a.join("data.store")).unwrap(),
        fs::read(b.join("data.store")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("assignment.csv")).unwrap(),
        fs::read(b.join("assignment.csv")).unwrap()
    );
    for arm in ["fisher:", "fisher_lr:", "adam:"] {
        assert!(stdout.lines().any(|l| l.starts_with(arm)), "{stdout}");
    }
    let traj = fs::read_to_string(b.join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("arm,iter,loss,u_beta_norm,u_betatilde_norm\n"));
    let first: Vec<&str> = traj
        .lines()
        .filter(|l| l.contains(",0,"))
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(first.len(), 3);
    assert!(first.iter().all(|v| *v == first[0]));
    assert!(fs::read_to_string(b.join("epoch_trace.csv"))
        .unwrap()
        .starts_with("arm,row,epoch,loss\n"));

    // Train on the simulated data with its own dispersion assignment.
    let stdout = ok(&[
        "train",
        "--store",
        s(&b.join("data.store")),
        "--assignment",
        s(&b.join("assignment.csv")),
        "--dim",
        "3",
        "--maxit",
        "2",
    ]);
    assert!(stdout.contains("stopped at maxit") || stdout.contains("converged"));
}

#[test]
fn config_file_layers_under_the_command_line() {
    let dir = TempDir::new().unwrap();
    let store = toy_store(dir.path(), 5);
    let cfg = dir.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "store = {}\ndim = 2\nmaxit = 3\nepsilon = 1e-12\n",
            s(&store)
        ),
    )
    .unwrap();
    let out = run(&["train", "--config", s(&cfg), "--maxit", "2"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("maxit=2"), "{stderr}");
    assert!(stderr.contains("dim=2"), "{stderr}");
    assert!(stderr.contains("n-epoch=10"), "{stderr}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("after 2 iterations"), "{stdout}");
}

#[test]
fn usage_and_runtime_errors_exit_differently() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--optimizer", "sgd"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "windw = 3\n").unwrap();
    assert_eq!(run(&["count", "--config", s(&cfg)]).status.code(), Some(2));
    let store = toy_store(dir.path(), 4);
    assert_eq!(
        run(&["train", "--store", s(&store), "--n-epoch", "0"])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("missing.store");
    assert_eq!(
        run(&["train", "--store", s(&missing)]).status.code(),
        Some(1)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
