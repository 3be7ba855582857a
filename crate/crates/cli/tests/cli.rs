use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use specgen::datasets::{load_corpus, save_corpus, CorpusParams, GraphCorpus, Split};
use specgen::metrics::EvalReport;
use specgen::models::ModelConfig;
use specgen::training::{RunDir, StepLog, TrainConfig};

fn specgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 30-graph community-small corpus.
fn small_corpus(dir: &Path) -> PathBuf {
    let cfg = dir.join("dataset.toml");
    fs::write(
        &cfg,
        "version = 1\nseed = 3\n[corpus]\nkind = \"community_small\"\ncount = 30\n",
    )
    .unwrap();
    let out = dir.join("data");
    ok(&specgen(&["dataset", "--config", s(&cfg), "--out", s(&out)]));
    out
}

fn toy_run_config(dir: &Path, data: &Path, steps: u64) -> PathBuf {
    #[derive(serde::Serialize)]
    struct Run<'a> {
        version: u32,
        data: &'a Path,
        model: ModelConfig,
        train: TrainConfig,
    }
    let run = Run {
        version: 1,
        data,
        model: ModelConfig::toy(20, 2),
        train: TrainConfig { batch_size: 4, steps, checkpoint_every: 2, warmup_steps: 2, anneal_steps: 2, ..Default::default() },
    };
    let path = dir.join(format!("run_{steps}.toml"));
    fs::write(&path, toml::to_string(&run).unwrap()).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn planar_dataset_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = specgen(&["dataset", "--kind", "planar", "--seed", "5", "--out", s(d)]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("200 graphs"));
    }
    assert_eq!(load_corpus(&a).unwrap().len(), 200);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(specgen(&["dataset", "--out", s(tmp.path())]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "version = 7\nseed = 0\n[corpus]\nkind = \"planar\"\n").unwrap();
    assert_eq!(specgen(&["dataset", "--config", s(&cfg), "--out", s(tmp.path())]).status.code(), Some(2));
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = specgen(&["dataset", "--kind", "sbm", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(3));
    let missing = tmp.path().join("missing");
    let out = specgen(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn training_smoke_resume_and_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    let cfg8 = toy_run_config(tmp.path(), &data, 8);
    ok(&specgen(&["train", "--config", s(&cfg8), "--out", s(&run)]));
    let logs = RunDir::new(&run).read_log().unwrap();
    assert_eq!(logs.len(), 8);
    assert!(logs.iter().all(StepLog::is_finite));
    assert!(run.join("selection.toml").exists());
    assert!(run.join("run.toml").exists());

    // Interrupted after 4 steps, then resumed: same trajectory.
    let resumed = tmp.path().join("resumed");
    let cfg4 = toy_run_config(tmp.path(), &data, 4);
    ok(&specgen(&["train", "--config", s(&cfg4), "--out", s(&resumed), "--no-select"]));
    ok(&specgen(&["train", "--config", s(&cfg8), "--out", s(&resumed), "--no-select"]));
    assert_eq!(RunDir::new(&resumed).read_log().unwrap(), logs);

    // The run directory's own config reproduces the run.
    let again = tmp.path().join("again");
    ok(&specgen(&["train", "--config", s(&run.join("run.toml")), "--out", s(&again), "--no-select"]));
    assert_eq!(RunDir::new(&again).read_log().unwrap(), logs);

    let latest = RunDir::new(&resumed).latest_checkpoint().unwrap().unwrap();
    let mut bytes = fs::read(&latest).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&latest, bytes).unwrap();
    let out = specgen(&["train", "--config", s(&cfg8), "--out", s(&resumed)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn sample_evaluate_and_spectra() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    let cfg = toy_run_config(tmp.path(), &data, 2);
    ok(&specgen(&["train", "--config", s(&cfg), "--out", s(&run), "--no-select"]));
    let ckpt = RunDir::new(&run).latest_checkpoint().unwrap().unwrap();

    let out = specgen(&["sample", "--checkpoint", s(&ckpt), "--data", s(&data), "--k", "3", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let (g1, g2) = (tmp.path().join("g1"), tmp.path().join("g2"));
    for g in [&g1, &g2] {
        ok(&specgen(&["sample", "--checkpoint", s(&ckpt), "--data", s(&data), "--seed", "4", "--k", "2", "--out", s(g)]));
    }
    assert_eq!(dir_bytes(&g1.join("graphs")), dir_bytes(&g2.join("graphs")));
    let test = load_corpus(&data).unwrap().subset(Split::Test);
    let gen = load_corpus(&g1).unwrap();
    assert_eq!(gen.len(), test.len());
    assert!(gen.graphs.iter().zip(&test).all(|(a, b)| a.n() == b.n()));

    let real = tmp.path().join("real");
    ok(&specgen(&["sample", "--checkpoint", s(&ckpt), "--data", s(&data), "--real-spectra", "--count", "7", "--out", s(&real)]));
    assert_eq!(load_corpus(&real).unwrap().len(), 7);

    let report = tmp.path().join("reports/eval");
    let out = specgen(&["evaluate", "--generated", s(&g1), "--data", s(&data), "--out", s(&report)]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with(EvalReport::TABLE_HEADER));
    assert!(stdout.contains("no validity notion"));
    let from_toml = EvalReport::from_toml(&fs::read_to_string(report.with_extension("toml")).unwrap()).unwrap();
    let from_json = EvalReport::from_json(&fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(from_toml, from_json);
    assert!(from_toml.gen_seconds.is_some());

    // The training split evaluated as if generated matches its own baseline.
    let corpus = load_corpus(&data).unwrap();
    let train_dir = tmp.path().join("train_as_gen");
    save_corpus(
        &GraphCorpus::new("train", corpus.subset(Split::Train), 0, CorpusParams::External),
        &train_dir,
    )
    .unwrap();
    let report2 = tmp.path().join("eval_train");
    ok(&specgen(&["evaluate", "--generated", s(&train_dir), "--data", s(&data), "--out", s(&report2)]));
    let r = EvalReport::from_json(&fs::read_to_string(report2.with_extension("json")).unwrap()).unwrap();
    assert!((r.ratio.unwrap() - 1.0).abs() < 1e-12);

    // A malformed generated graph is a parse error.
    let first = g1.join("graphs").read_dir().unwrap().next().unwrap().unwrap().path();
    fs::write(&first, "not a graph\n").unwrap();
    let out = specgen(&["evaluate", "--generated", s(&g1), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(3));

    let out = specgen(&["spectra", "--data", s(&data), "--k", "2"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index\tsplit\tn\tlambda_1\tlambda_2");
    assert_eq!(lines.len(), 31);
    let lambdas: Vec<f64> = lines[1].split('\t').skip(3).map(|x| x.parse().unwrap()).collect();
    assert!(lambdas[0] > 0.0 && lambdas[0] <= lambdas[1] && lambdas[1] <= 2.0);
}
