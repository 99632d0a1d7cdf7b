use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn reseq(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reseq"))
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .output()
        .expect("spawn reseq")
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run_dir = "))
        .expect("run_dir line");
    PathBuf::from(line)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "synth.num_u=40",
    "synth.num_v=40",
    "synth.clusters=2",
    "synth.events_per_user=8",
];

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "7"];
    args.extend(SMALL);
    let a = reseq(tmp.path(), &args);
    let b = reseq(tmp.path(), &args);
    assert!(a.status.success(), "{}", stderr(&a));
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    let la = fs::read(da.join("interactions.tsv")).unwrap();
    assert_eq!(la, fs::read(db.join("interactions.tsv")).unwrap());
    let snapshot = fs::read_to_string(da.join("config.txt")).unwrap();
    assert!(snapshot.contains("seed = 7") && snapshot.contains("synth.num_u = 40"));
    assert_eq!(fs::read_to_string(da.join("seed.txt")).unwrap().trim(), "7");
}

#[test]
fn eval_without_checkpoint_fails_with_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = reseq(tmp.path(), &["eval", "--data", "nowhere"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("checkpoint not found"), "{err}");
    assert!(err.starts_with("error NOT_FOUND:"), "{err}");
    assert_eq!(err.lines().count(), 1);
    let out = reseq(
        tmp.path(),
        &["eval", "--checkpoint", "missing.ckpt", "--data", "nowhere"],
    );
    assert!(stderr(&out).contains("checkpoint not found: missing.ckpt"));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = reseq(tmp.path(), &["synth", "learning_rate=0.1"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error UNKNOWN_CONFIG_KEY:"), "{err}");
    assert!(err.contains("lr") && err.contains("synth.kappa") && err.contains("bench.ns"));
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = reseq(tmp.path(), &["prepare", "--input", "no/such/log.tsv"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no/such/log.tsv"));
    let out = reseq(tmp.path(), &["--config", "absent.cfg", "synth"]);
    assert!(stderr(&out).contains("absent.cfg"));
}

#[test]
fn config_file_then_overrides_last_writer_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        "# small\nsynth.num_u = 30\nsynth.num_v = 30\nsynth.clusters = 2\nsynth.events_per_user = 6\nd = 16\n",
    )
    .unwrap();
    let out = reseq(
        tmp.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "synth",
            "synth.num_u=36",
            "d=8",
            "d=24",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let snap = fs::read_to_string(run_dir(&out).join("config.txt")).unwrap();
    assert!(snap.contains("synth.num_u = 36\n") && snap.contains("synth.num_v = 30\n"));
    assert!(snap.contains("\nd = 24\n"));
}

#[test]
fn prepare_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let mut args = vec!["synth", "--seed", "3"];
    args.extend(SMALL);
    let synth = reseq(runs, &args);
    let log = run_dir(&synth).join("interactions.tsv");

    let prep = reseq(runs, &["prepare", "--input", log.to_str().unwrap()]);
    assert!(prep.status.success(), "{}", stderr(&prep));
    let data = run_dir(&prep);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "manifest.txt"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let small = [
        "d=8",
        "d_prime=8",
        "d_ff=16",
        "layers=1",
        "heads=1",
        "max_len=6",
        "batch_size=32",
        "max_epochs=2",
        "eval_negatives=20",
    ];
    let mut targs = vec!["train", "--data", data.to_str().unwrap()];
    targs.extend(small);
    let tr = reseq(runs, &targs);
    assert!(tr.status.success(), "{}", stderr(&tr));
    let tdir = run_dir(&tr);
    let ckpt = tdir.join("model.ckpt");
    assert!(ckpt.exists());
    let loss_log = fs::read_to_string(tdir.join("loss_log.tsv")).unwrap();
    assert_eq!(loss_log.lines().count(), 3);

    let mut eargs = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    eargs.push("eval_negatives=20");
    let ev = reseq(runs, &eargs);
    assert!(ev.status.success(), "{}", stderr(&ev));
    let kv = fs::read_to_string(run_dir(&ev).join("metrics.kv")).unwrap();
    assert!(kv.contains("perspective_u.ndcg@5 = ") && kv.contains("perspective_v.hr@5 = "));
    // the checkpoint reproduces the metrics reported at the end of training
    let trained = fs::read_to_string(tdir.join("test_metrics.kv")).unwrap();
    assert_eq!(kv, trained);
}

#[test]
fn bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = reseq(
        tmp.path(),
        &[
            "bench",
            "bench.ns=4,8,16",
            "bench.d=8",
            "bench.batch=8",
            "bench.repetitions=3",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = run_dir(&out);
    let csv = fs::read_to_string(dir.join("latency.csv")).unwrap();
    assert!(csv.starts_with("n,scorer,median_us,p90_us\n"));
    assert_eq!(csv.lines().count(), 7);
    let fit = fs::read_to_string(dir.join("fit.txt")).unwrap();
    assert!(fit.contains("micro.exponent") && fit.contains("speedup@8"));
}

#[test]
fn ablate_reports_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let mut args = vec!["synth"];
    args.extend(SMALL);
    let log = run_dir(&reseq(runs, &args)).join("interactions.tsv");
    let data = run_dir(&reseq(runs, &["prepare", "--input", log.to_str().unwrap()]));
    let out = reseq(
        runs,
        &[
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "d=8",
            "d_prime=8",
            "d_ff=16",
            "layers=1",
            "heads=1",
            "max_len=6",
            "batch_size=64",
            "max_epochs=1",
            "eval_negatives=20",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(run_dir(&out).join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("variant\tmean_ndcg@5"));
    for (row, name) in rows[1..]
        .iter()
        .zip(["full", "w/o DSE", "w/o MASK", "w/o TSA", "w/o SD"])
    {
        assert!(row.starts_with(name), "{row}");
    }
}
