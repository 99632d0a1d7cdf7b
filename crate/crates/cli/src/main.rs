//! `reseq`: synthetic data, preparation, training, evaluation, ablations and
//! latency benchmarks, each writing into its own run directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use reseq::bench::{fit_rows, latency_csv, measure_latency, BenchConfig, LatencyRow, ScorerKind};
use reseq::checkpoint::{load_checkpoint, save_checkpoint};
use reseq::config::{parse_kv, TrainingConfig};
use reseq::data::{
    five_core_filter, generate_synthetic, parse_interactions, temporal_split, write_interactions, Dataset,
    InteractionRecord, SplitRatios, SynthConfig,
};
use reseq::evaluation::{evaluate_split, EvalOptions, EvalReport, ModelScorer};
use reseq::training::{ablation_variants, train, TrainData};
use reseq::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "reseq", version, about = "Reciprocal sequential recommendation")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Shorthand for the `seed=N` override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a clustered synthetic interaction log.
    Synth {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Parse, 5-core filter and temporally split a log.
    Prepare {
        /// Tab-separated `u_id  v_id  timestamp` log.
        #[arg(long)]
        input: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on a prepared directory and save the best checkpoint.
    Train {
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a prepared split.
    Eval {
        /// `model.ckpt` written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        /// One of train, valid, test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Time macro and micro matching on random encodings.
    Bench {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train the full model and the four ablations and compare them.
    Ablate {
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Every configurable value: training keys plus `synth.*` and `bench.*`.
#[derive(Clone, Debug, Default)]
struct RunConfig {
    train: TrainingConfig,
    synth: SynthConfig,
    bench: BenchConfig,
}

const SYNTH_KEYS: &[&str] = &[
    "synth.num_u",
    "synth.num_v",
    "synth.clusters",
    "synth.events_per_user",
    "synth.horizon",
    "synth.p_in",
    "synth.kappa",
    "synth.drift_arcs",
];
const BENCH_KEYS: &[&str] = &[
    "bench.ns",
    "bench.d",
    "bench.batch",
    "bench.repetitions",
    "bench.warmup",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("config key `{key}`: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    fn valid_keys() -> String {
        TrainingConfig::KEYS
            .iter()
            .chain(SYNTH_KEYS)
            .chain(BENCH_KEYS)
            .copied()
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        let b = &mut self.bench;
        match key {
            "synth.num_u" => s.num_u = parse(key, value)?,
            "synth.num_v" => s.num_v = parse(key, value)?,
            "synth.clusters" => s.clusters = parse(key, value)?,
            "synth.events_per_user" => s.events_per_user = parse(key, value)?,
            "synth.horizon" => s.horizon = parse(key, value)?,
            "synth.p_in" => s.p_in = parse(key, value)?,
            "synth.kappa" => s.kappa = parse(key, value)?,
            "synth.drift_arcs" => s.drift_arcs = parse(key, value)?,
            "bench.ns" => b.ns = value.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?,
            "bench.d" => b.d = parse(key, value)?,
            "bench.batch" => b.batch = parse(key, value)?,
            "bench.repetitions" => b.repetitions = parse(key, value)?,
            "bench.warmup" => b.warmup = parse(key, value)?,
            _ => {
                return self.train.set(key, value).map_err(|e| match e {
                    Error::UnknownConfigKey { key, .. } => Error::UnknownConfigKey {
                        key,
                        valid: Self::valid_keys(),
                    },
                    e => e,
                })
            }
        }
        Ok(())
    }

    /// File first, then overrides in order, then `--seed`.
    fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = read_file(path)?;
            for (k, v) in parse_kv(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.synth.seed = cfg.train.seed;
        cfg.bench.seed = cfg.train.seed;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn to_kv_string(&self) -> String {
        let s = &self.synth;
        let b = &self.bench;
        let ns: Vec<String> = b.ns.iter().map(|n| n.to_string()).collect();
        let mut out = self.train.to_kv_string();
        for (k, v) in [
            ("synth.num_u", s.num_u.to_string()),
            ("synth.num_v", s.num_v.to_string()),
            ("synth.clusters", s.clusters.to_string()),
            ("synth.events_per_user", s.events_per_user.to_string()),
            ("synth.horizon", s.horizon.to_string()),
            ("synth.p_in", s.p_in.to_string()),
            ("synth.kappa", s.kappa.to_string()),
            ("synth.drift_arcs", s.drift_arcs.to_string()),
            ("bench.ns", ns.join(",")),
            ("bench.d", b.d.to_string()),
            ("bench.batch", b.batch.to_string()),
            ("bench.repetitions", b.repetitions.to_string()),
            ("bench.warmup", b.warmup.to_string()),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Creates `<runs_dir>/<unix-seconds>-seed<seed>[-k]` and snapshots the config.
fn start_run(runs_dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("{secs}-seed{}", cfg.train.seed);
    fs::create_dir_all(runs_dir)?;
    let mut dir = runs_dir.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = runs_dir.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir)?;
    let snapshot = format!("# reseq {command}\n{}", cfg.to_kv_string());
    fs::write(dir.join("config.txt"), snapshot)?;
    fs::write(dir.join("seed.txt"), format!("{}\n", cfg.train.seed))?;
    Ok(dir)
}

struct Prepared {
    dataset: Dataset,
    train: usize,
    valid: usize,
}

impl Prepared {
    fn split(&self, name: &str) -> Result<&[reseq::data::Interaction]> {
        let all = &self.dataset.interactions;
        let (a, b) = (self.train, self.train + self.valid);
        match name {
            "train" => Ok(&all[..a]),
            "valid" => Ok(&all[a..b]),
            "test" => Ok(&all[b..]),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}`; use train, valid or test"
            ))),
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<InteractionRecord>> {
    Ok(parse_interactions(&read_file(path)?)?.records)
}

fn load_prepared_records(dir: &Path) -> Result<[Vec<InteractionRecord>; 3]> {
    Ok([
        read_records(&dir.join("train.tsv"))?,
        read_records(&dir.join("valid.tsv"))?,
        read_records(&dir.join("test.tsv"))?,
    ])
}

fn index_prepared(
    parts: [Vec<InteractionRecord>; 3],
    dataset: impl FnOnce(&[InteractionRecord]) -> Result<Dataset>,
) -> Result<Prepared> {
    let (train, valid) = (parts[0].len(), parts[1].len());
    let all: Vec<InteractionRecord> = parts.into_iter().flatten().collect();
    Ok(Prepared {
        dataset: dataset(&all)?,
        train,
        valid,
    })
}

fn cmd_synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let log = generate_synthetic(&cfg.synth)?;
    let path = dir.join("interactions.tsv");
    fs::write(&path, write_interactions(&log.records))?;
    println!(
        "{} interactions, within-cluster fraction {:.3}",
        log.records.len(),
        log.within_cluster_fraction()
    );
    println!("log = {}", path.display());
    Ok(())
}

fn cmd_prepare(input: &Path, dir: &Path) -> Result<()> {
    let parsed = parse_interactions(&read_file(input)?)?;
    let (kept, report) = five_core_filter(&parsed.records);
    let split = temporal_split(&kept, SplitRatios::default())?;
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        fs::write(dir.join(format!("{name}.tsv")), write_interactions(part))?;
    }
    let mut m = String::new();
    m.push_str(&format!("input = {}\n", input.display()));
    m.push_str(&format!("records_parsed = {}\n", parsed.records.len()));
    m.push_str(&format!("duplicates_dropped = {}\n", parsed.duplicates_dropped));
    m.push_str(&format!("records_removed_by_filter = {}\n", report.records_removed));
    m.push_str(&format!("users_removed_u = {}\n", report.removed_u.len()));
    m.push_str(&format!("users_removed_v = {}\n", report.removed_v.len()));
    m.push_str(&format!(
        "train = {}\nvalid = {}\ntest = {}\n",
        split.train.len(),
        split.valid.len(),
        split.test.len()
    ));
    m.push_str(&format!(
        "boundary_valid = {}\nboundary_test = {}\n",
        split.boundaries.0, split.boundaries.1
    ));
    for w in &split.warnings {
        m.push_str(&format!("warning = {w}\n"));
    }
    fs::write(dir.join("manifest.txt"), &m)?;
    print!("{m}");
    Ok(())
}

fn write_loss_log(path: &Path, epochs: &[reseq::training::EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "epoch\tloss\tmacro\tmicro\tdistill\tmicro_defined\tvalid_ndcg\tseconds"
    )?;
    for e in epochs {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            e.epoch,
            e.loss,
            e.macro_loss,
            e.micro_loss,
            e.distill_loss,
            e.micro_defined,
            e.valid.mean_ndcg(),
            e.seconds
        )?;
    }
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(format!("{stem}.txt")), report.to_table())?;
    fs::write(dir.join(format!("{stem}.kv")), report.to_kv_string())?;
    Ok(())
}

fn train_and_test(cfg: &TrainingConfig, data: &Prepared, dir: &Path) -> Result<EvalReport> {
    let td = TrainData {
        store: &data.dataset.store,
        train: data.split("train")?,
        valid: data.split("valid")?,
    };
    let out = train(cfg, &td, |e| {
        println!(
            "epoch {:>3}  loss {:.4}  valid ndcg@{} {:.4}  ({:.1}s)",
            e.epoch,
            e.loss,
            cfg.eval_k,
            e.valid.mean_ndcg(),
            e.seconds
        )
    })?;
    let ds = &data.dataset;
    save_checkpoint(
        &dir.join("model.ckpt"),
        cfg,
        out.best_epoch,
        out.best_metric,
        &ds.u_index,
        &ds.v_index,
        &out.params,
    )?;
    write_loss_log(&dir.join("loss_log.tsv"), &out.epochs)?;
    let mut scorer = ModelScorer::new(&out.model, &out.params);
    let opts = EvalOptions {
        k: cfg.eval_k,
        negatives: cfg.eval_negatives,
        seed: cfg.seed,
    };
    evaluate_split(&mut scorer, &ds.store, data.split("test")?, &opts)
}

fn cmd_train(cfg: &RunConfig, data_dir: &Path, dir: &Path) -> Result<()> {
    let data = index_prepared(load_prepared_records(data_dir)?, |r| Ok(Dataset::from_records(r)))?;
    let report = train_and_test(&cfg.train, &data, dir)?;
    write_report(dir, "test_metrics", &report)?;
    print!("{}", report.to_table());
    println!("checkpoint = {}", dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, split: &str, dir: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = index_prepared(load_prepared_records(data_dir)?, |r| {
        Dataset::with_index(r, ck.u_index.clone(), ck.v_index.clone())
    })?;
    let mut scorer = ModelScorer::new(&ck.model, &ck.params);
    let opts = EvalOptions {
        k: cfg.train.eval_k,
        negatives: cfg.train.eval_negatives,
        seed: cfg.train.seed,
    };
    let report = evaluate_split(&mut scorer, &data.dataset.store, data.split(split)?, &opts)?;
    write_report(dir, "metrics", &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut rows: Vec<LatencyRow> = Vec::new();
    let mut summary = String::new();
    for kind in [ScorerKind::Macro, ScorerKind::Micro] {
        let r = measure_latency(kind, &cfg.bench)?;
        let fit = fit_rows(&r)?;
        summary.push_str(&format!(
            "{kind}.exponent = {:.4}\n{kind}.residual = {:.4}\n",
            fit.exponent, fit.residual
        ));
        rows.extend(r);
    }
    for n in &cfg.bench.ns {
        let at = |k| rows.iter().find(|r| r.n == *n && r.scorer == k).map(|r| r.median_us);
        if let (Some(ma), Some(mi)) = (at(ScorerKind::Macro), at(ScorerKind::Micro)) {
            summary.push_str(&format!("speedup@{n} = {:.2}\n", mi / ma));
        }
    }
    let csv = latency_csv(&rows);
    fs::write(dir.join("latency.csv"), &csv)?;
    fs::write(dir.join("fit.txt"), &summary)?;
    print!("{csv}{summary}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, dir: &Path) -> Result<()> {
    let data = index_prepared(load_prepared_records(data_dir)?, |r| Ok(Dataset::from_records(r)))?;
    let k = cfg.train.eval_k;
    let mut table = format!("variant\tmean_ndcg@{k}\tu.hr@{k}\tv.hr@{k}\tu.ndcg@{k}\tv.ndcg@{k}\n");
    for (i, (name, vcfg)) in ablation_variants(&cfg.train).into_iter().enumerate() {
        println!("== {name}");
        let sub = dir.join(format!("variant{i}"));
        fs::create_dir_all(&sub)?;
        fs::write(sub.join("config.txt"), format!("# {name}\n{}", vcfg.to_kv_string()))?;
        let r = train_and_test(&vcfg, &data, &sub)?;
        write_report(&sub, "test_metrics", &r)?;
        table.push_str(&format!(
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.mean_ndcg(),
            r.perspective_u.hr,
            r.perspective_v.hr,
            r.perspective_u.ndcg,
            r.perspective_v.ndcg
        ));
    }
    fs::write(dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

/// A one-line failure report: stable code plus message.
struct Failure {
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let (name, overrides) = match &cli.command {
        Command::Synth { overrides } => ("synth", overrides),
        Command::Prepare { overrides, .. } => ("prepare", overrides),
        Command::Train { overrides, .. } => ("train", overrides),
        Command::Eval { overrides, .. } => ("eval", overrides),
        Command::Bench { overrides } => ("bench", overrides),
        Command::Ablate { overrides, .. } => ("ablate", overrides),
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), overrides, cli.seed)?;
    // fail on a missing checkpoint before creating a run directory
    if let Command::Eval { checkpoint, .. } = &cli.command {
        if !checkpoint.as_deref().is_some_and(Path::exists) {
            let shown = checkpoint
                .as_ref()
                .map_or_else(|| "no --checkpoint given".into(), |p| p.display().to_string());
            return Err(Failure {
                code: "NOT_FOUND",
                message: format!("checkpoint not found: {shown}"),
            });
        }
    }
    let dir = start_run(&cli.runs_dir, name, &cfg)?;
    println!("run_dir = {}", dir.display());
    let done = match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg, &dir),
        Command::Prepare { input, .. } => cmd_prepare(input, &dir),
        Command::Train { data, .. } => cmd_train(&cfg, data, &dir),
        Command::Eval {
            checkpoint,
            data,
            split,
            ..
        } => cmd_eval(&cfg, checkpoint.as_deref().expect("checked above"), data, split, &dir),
        Command::Bench { .. } => cmd_bench(&cfg, &dir),
        Command::Ablate { data, .. } => cmd_ablate(&cfg, data, &dir),
    };
    Ok(done?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error {}: {}", f.code, f.message);
            ExitCode::from(2)
        }
    }
}
