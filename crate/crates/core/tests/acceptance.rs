//! End-to-end acceptance checks. Runs as one sequential test so the timing
//! criteria are not disturbed by concurrent training, and reports one line
//! per criterion on stderr (bypassing the harness capture).

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reseq::bench::{fit_rows, measure_latency, BenchConfig, ScorerKind};
use reseq::config::TrainingConfig;
use reseq::data::{
    generate_synthetic, temporal_split, AuditStats, BehaviorSequence, Dataset, Interaction, SequenceStore, Side,
    SplitRatios, SynthConfig,
};
use reseq::embedding::{assemble_input, BilateralEmbeddingSet, Perspective};
use reseq::encoder::{EncoderConfig, EncoderStack, MaskMode};
use reseq::matching::{ti_sensi_match, MicroAggregation};
use reseq::model::{BatchSequences, LossWeights, ModelConfig, ReSeq, TrainInstance};
use reseq::numerics::{finite_diff_check, AttentionMask, GradCheckOptions, Graph, Matrix, MicroItem, ParamStore};
use reseq::training::{ablation_variants, bpr_loss, margin_mse_loss, total_loss, train, validate, TrainData};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {} {:<22} {status}  {}",
        v.id,
        v.name,
        v.detail
    );
}

fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Σ_a Σ_b δ_a (p_a · f_b) γ_b with both attention vectors built by hand.
fn micro_oracle(p: &[Vec<f64>], f: &[Vec<f64>], e_p: &[f64], e_f: &[f64], alpha: &[f64]) -> f64 {
    let softmax = |logits: Vec<f64>| {
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        logits.iter().map(|x| x.exp() / z).collect::<Vec<f64>>()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gamma = softmax(f.iter().map(|fb| dot(fb, e_p)).collect());
    let last = p.len() - 1;
    let delta = softmax(
        p.iter()
            .enumerate()
            .map(|(a, pa)| dot(pa, e_f) + alpha[last - a])
            .collect(),
    );
    let mut total = 0.0;
    for (a, pa) in p.iter().enumerate() {
        for (b, fb) in f.iter().enumerate() {
            total += delta[a] * dot(pa, fb) * gamma[b];
        }
    }
    total
}

fn criterion_micro_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=8);
        let (sa, sb) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
        let p = rand_rows(&mut rng, sa, d);
        let f = rand_rows(&mut rng, sb, d);
        let e = rand_rows(&mut rng, 2, d);
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let want = micro_oracle(&p, &f, &e[0], &e[1], &alpha);

        let pad = |rows: &[Vec<f64>], lead: usize| {
            let mut m = Matrix::zeros(n + lead, d);
            for (i, r) in rows.iter().enumerate() {
                m.row_mut(i + lead).copy_from_slice(r);
            }
            m
        };
        let direct = ti_sensi_match(
            &pad(&p, 0),
            &pad(&f, 0),
            &e[0],
            &e[1],
            &alpha,
            sa,
            sb,
            MicroAggregation::TimeSensitive,
        )
        .unwrap();

        // the batched graph op, with a leading summary row per block
        let empty = ParamStore::new();
        let mut g = Graph::new(&empty);
        let (act, pas) = (g.constant(pad(&p, 1)), g.constant(pad(&f, 1)));
        let ep = g.constant(Matrix::from_rows(&[e[0].clone()]).unwrap());
        let ef = g.constant(Matrix::from_rows(&[e[1].clone()]).unwrap());
        let al = g.constant(Matrix::from_rows(std::slice::from_ref(&alpha)).unwrap());
        let item = MicroItem {
            active_block: 0,
            active_len: sa,
            passive_block: 0,
            passive_len: sb,
        };
        let out = g.micro_match(
            act,
            pas,
            ep,
            ef,
            al,
            n + 1,
            Arc::new(vec![item]),
            MicroAggregation::TimeSensitive,
        );
        let fused = g.scalar(out.unwrap());

        worst = worst.max((direct - want).abs()).max((fused - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        name: "micro oracle",
        pass: worst < 1e-9 && secs < 10.0,
        detail: format!("500 instances, max abs err {worst:.2e} (< 1e-9), {secs:.2}s (< 10s)"),
    }
}

fn toy_model(cfg: ModelConfig, seed: u64) -> (ParamStore, ReSeq) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ReSeq::new(&mut store, &mut rng, cfg).unwrap();
    // lift the small initial tables so every path carries signal
    let mut ids = model.embeddings().param_ids();
    for side in [Side::U, Side::V] {
        for p in [Perspective::Active, Perspective::Passive] {
            ids.extend([model.encoder(side, p).cls(), model.encoder(side, p).pos()]);
        }
    }
    for id in ids {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x *= 20.0);
    }
    let (a, b) = model.alpha_ids();
    for id in [a, b] {
        store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen_range(-1.0..1.0));
    }
    (store, model)
}

fn toy_config(num_u: usize, num_v: usize) -> ModelConfig {
    ModelConfig {
        num_u,
        num_v,
        encoder: EncoderConfig {
            n: 4,
            d: 8,
            layers: 1,
            heads: 1,
            d_ff: 16,
            dropout: 0.0,
        },
        d_prime: 8,
        embed_dropout: false,
        share_embeddings: true,
        mask_mode: MaskMode::PerPerspective,
        micro_aggregation: MicroAggregation::TimeSensitive,
        share_alpha: false,
    }
}

fn toy_batch() -> BatchSequences {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let inter: Vec<Interaction> = (0..40)
        .map(|t| Interaction {
            u: rng.gen_range(0..4),
            v: rng.gen_range(0..5),
            timestamp: t,
        })
        .collect();
    let store = SequenceStore::new(4, 5, &inter);
    let batch = [
        TrainInstance {
            u: 0,
            v: 1,
            timestamp: 30,
            neg_u: 2,
            neg_v: 3,
        },
        TrainInstance {
            u: 3,
            v: 4,
            timestamp: 22,
            neg_u: 1,
            neg_v: 0,
        },
    ];
    BatchSequences::build(&store, &batch, 4).unwrap()
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let bs = toy_batch();
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut all_passed = bs.micro_defined().len() == 2;
    for teacher_detach in [true, false] {
        let (mut store, model) = toy_model(toy_config(4, 5), 5);
        let w = LossWeights {
            lambda: 5.0,
            mu: 0.5,
            self_distill: true,
            teacher_detach,
        };
        // a detached teacher is a constant of the objective
        let teacher = {
            let mut g = Graph::new(&store);
            model.batch_loss(&mut g, &bs, &w, None, None).unwrap().teacher_margins
        };
        let frozen = teacher_detach.then_some(teacher.as_slice());
        let r = finite_diff_check(
            &mut store,
            |s, with_grad| {
                let mut g = Graph::new(s);
                let l = model.batch_loss(&mut g, &bs, &w, frozen, None)?;
                let v = g.scalar(l.total);
                if with_grad {
                    g.backward(l.total)?.accumulate_into(s);
                }
                Ok(v)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        worst = worst.max(r.max_rel_err());
        entries += r.entries_checked();
        all_passed &= r.passed();
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 2,
        name: "full-loss gradients",
        pass: all_passed && worst < 1e-4 && secs < 60.0,
        detail: format!("{entries} entries, max rel err {worst:.2e} (< 1e-4), {secs:.2}s (< 60s)"),
    }
}

struct EncFixture {
    store: ParamStore,
    set: BilateralEmbeddingSet,
    stack: EncoderStack,
    n: usize,
    d: usize,
}

fn enc_fixture(seed: u64) -> (EncFixture, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let heads = rng.gen_range(1..=2);
    let d = 4 * heads;
    let cfg = EncoderConfig {
        n,
        d,
        layers: rng.gen_range(1..=2),
        heads,
        d_ff: 2 * d,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let set = BilateralEmbeddingSet::new(&mut store, &mut rng, 5, 9, d, d, true).unwrap();
    let stack = EncoderStack::new(&mut store, &mut rng, Side::U, Perspective::Active, cfg).unwrap();
    for id in set.param_ids().into_iter().chain([stack.cls(), stack.pos()]) {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x *= 25.0);
    }
    (
        EncFixture {
            store,
            set,
            stack,
            n,
            d,
        },
        rng,
    )
}

fn sequence(events: &[usize]) -> BehaviorSequence {
    BehaviorSequence {
        owner: 0,
        side: Side::U,
        events: events.iter().enumerate().map(|(t, &c)| (c, t as i64)).collect(),
    }
}

fn criterion_masks() -> Verdict {
    let (mut causal_worst, mut cls_worst) = (0.0f64, 0.0f64);
    let mut undetected = 0;
    for seed in 0..100 {
        let (f, mut rng) = enc_fixture(seed);
        let len = rng.gen_range(2..=f.n);
        let base: Vec<usize> = (0..len).map(|_| rng.gen_range(0..9)).collect();
        let encode = |events: &[usize]| {
            let (e, valid) = assemble_input(
                &f.store,
                &f.set,
                f.stack.cls(),
                f.stack.pos(),
                Perspective::Active,
                &sequence(events),
                f.n,
            )
            .unwrap();
            let mask = f.stack.mask(MaskMode::PerPerspective, valid).unwrap();
            (f.stack.encode(&f.store, &e, &mask).unwrap(), e, valid)
        };
        let (out, e, valid) = encode(&base);

        for j in 0..len {
            let mut other = base.clone();
            other[j] = (base[j] + rng.gen_range(1..9)) % 9;
            let (moved, _, _) = encode(&other);
            let row_diff = |i: usize| {
                out.micro
                    .row(i)
                    .iter()
                    .zip(moved.micro.row(i))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            };
            for i in 0..j {
                causal_worst = causal_worst.max(row_diff(i));
            }
            if row_diff(j) < 1e-9 {
                undetected += 1;
            }
        }

        // events first, summary slot last, plain lower-triangular mask
        let mut rows: Vec<Vec<f64>> = (1..=valid).map(|i| e.row(i).to_vec()).collect();
        rows.push(e.row(0).to_vec());
        let reordered = Matrix::from_rows(&rows).unwrap();
        let lower = AttentionMask::custom(valid + 1, |i, j| j <= i).unwrap();
        let h = f.stack.hidden_states(&f.store, &reordered, &lower).unwrap();
        for c in 0..f.d {
            cls_worst = cls_worst.max((h.get(valid, c) - out.macro_vec[c]).abs());
            for i in 0..valid {
                cls_worst = cls_worst.max((h.get(i, c) - out.micro.get(i, c)).abs());
            }
        }
    }
    Verdict {
        id: 3,
        name: "mask semantics",
        pass: causal_worst < 1e-9 && cls_worst < 1e-6 && undetected == 0,
        detail: format!(
            "100 seeds, causal max diff {causal_worst:.2e} (< 1e-9), summary-at-end max diff {cls_worst:.2e} (< 1e-6), \
             {undetected} ineffective perturbations"
        ),
    }
}

fn criterion_loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bpr_worst = 0.0f64;
    for x in [-30.0, -1.5, 0.0, 0.25, 7.0, 1e3] {
        bpr_worst = bpr_worst.max((bpr_loss(x, &[x; 4]) - 4.0 * std::f64::consts::LN_2).abs());
    }
    let mut mse_exact = true;
    for _ in 0..200 {
        // dyadic scores and an integer offset keep every margin bit-identical
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-80..80) as f64 / 8.0).collect();
        let shift = rng.gen_range(-50..50) as f64;
        let y: Vec<f64> = z.iter().map(|v| v + shift).collect();
        mse_exact &= margin_mse_loss(z[0], &z[1..], z[0], &z[1..]).unwrap() == 0.0;
        mse_exact &= margin_mse_loss(z[0], &z[1..], y[0], &y[1..]).unwrap() == 0.0;
    }
    let mut total_worst = 0.0f64;
    for _ in 0..200 {
        let (ma, mi, sd) = (
            rng.gen_range(0.0..10.0),
            rng.gen_range(0.0..10.0),
            rng.gen_range(0.0..10.0),
        );
        let (lambda, mu) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..1.0));
        total_worst = total_worst.max((total_loss(ma, mi, sd, lambda, mu, true) - (ma + lambda * mi + mu * sd)).abs());
        total_worst = total_worst.max((total_loss(ma, mi, sd, lambda, mu, false) - (ma + lambda * mi)).abs());
    }

    // the graph objective equals the same scalar composition of its scores
    let (store, model) = toy_model(toy_config(4, 5), 9);
    let bs = toy_batch();
    let w = LossWeights {
        lambda: 5.0,
        mu: 0.005,
        self_distill: true,
        teacher_detach: true,
    };
    let scores = model.batch_scores(&store, &bs).unwrap();
    let b = bs.len() as f64;
    let (mut ma, mut mi, mut sd) = (0.0, 0.0, 0.0);
    for (y, z) in scores.macro_level.iter().zip(&scores.micro_level) {
        ma += bpr_loss(y[0], &[y[1], y[2], y[3], y[4]]);
        if let Some(z) = z {
            mi += bpr_loss(z[0], &[z[1], z[2], z[3], z[4]]);
            sd += margin_mse_loss(z[0], &z[1..], y[0], &y[1..]).unwrap();
        }
    }
    let want = total_loss(ma / b, mi / b, sd / b, w.lambda, w.mu, w.self_distill);
    let mut g = Graph::new(&store);
    let loss = model.batch_loss(&mut g, &bs, &w, None, None).unwrap();
    let got = g.scalar(loss.total);
    let graph_rel = (got - want).abs() / want.abs().max(1.0);

    Verdict {
        id: 4,
        name: "loss identities",
        pass: bpr_worst < 1e-9 && mse_exact && total_worst < 1e-12 && graph_rel < 1e-12,
        detail: format!(
            "tied BPR err {bpr_worst:.2e} (< 1e-9), matched margins exactly zero: {mse_exact}, total err {total_worst:.2e} \
             (< 1e-12), graph vs scalar rel err {graph_rel:.2e} (< 1e-12)"
        ),
    }
}

/// Desk-scale configuration used for the learning and ablation criteria.
fn desk_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        seed,
        d: 16,
        d_prime: 16,
        max_len: 10,
        layers: 1,
        heads: 2,
        d_ff: 32,
        batch_size: 128,
        lr: 0.005,
        dropout: 0.1,
        max_epochs: 10,
        ..TrainingConfig::default()
    }
}

struct RunResult {
    hr_u: f64,
    hr_v: f64,
    mean_ndcg: f64,
    train_time: Duration,
}

struct SeedResults {
    seed: u64,
    /// One entry per ablation variant; the first is the full model.
    runs: Vec<(&'static str, RunResult)>,
    audit: AuditStats,
    rescan_violations: usize,
    rescanned: usize,
}

/// Recomputes every training and evaluation history from the raw event
/// lists and checks no event at or after the reference time slips in.
fn rescan_histories(store: &SequenceStore, interactions: &[Interaction]) -> (usize, usize) {
    let (mut checked, mut bad) = (0, 0);
    for it in interactions {
        for (side, owner) in [(Side::U, it.u), (Side::V, it.v)] {
            let seq = store
                .build_truncated_sequence(side, owner, it.timestamp, usize::MAX)
                .unwrap();
            let expected = store
                .full_history(side, owner)
                .unwrap()
                .iter()
                .filter(|e| e.1 < it.timestamp)
                .count();
            checked += 1;
            if seq.len() != expected || seq.events.iter().any(|e| e.1 >= it.timestamp) {
                bad += 1;
            }
        }
    }
    (checked, bad)
}

fn run_seed(seed: u64) -> SeedResults {
    let log = generate_synthetic(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = Dataset::from_records(&log.records);
    let split = temporal_split(&ds.interactions, SplitRatios::default()).unwrap();
    let data = TrainData {
        store: &ds.store,
        train: &split.train,
        valid: &split.valid,
    };
    ds.store.reset_audit();
    let mut runs = Vec::new();
    for (name, cfg) in ablation_variants(&desk_config(seed)) {
        let start = Instant::now();
        let out = train(&cfg, &data, |_| {}).unwrap();
        let train_time = start.elapsed();
        let test = validate(&out.model, &out.params, &ds.store, &split.test, &cfg).unwrap();
        let line = format!(
            "  seed {seed} {name:<9} HR@5 u {:.3} v {:.3}  NDCG@5 mean {:.4}  best epoch {}  {:.0}s",
            test.perspective_u.hr,
            test.perspective_v.hr,
            test.mean_ndcg(),
            out.best_epoch,
            train_time.as_secs_f64()
        );
        let _ = writeln!(std::io::stderr(), "{line}");
        runs.push((
            name,
            RunResult {
                hr_u: test.perspective_u.hr,
                hr_v: test.perspective_v.hr,
                mean_ndcg: test.mean_ndcg(),
                train_time,
            },
        ));
    }
    let audit = ds.store.audit_stats();
    let mut all = split.train.clone();
    all.extend_from_slice(&split.valid);
    all.extend_from_slice(&split.test);
    let (rescanned, rescan_violations) = rescan_histories(&ds.store, &all);
    SeedResults {
        seed,
        runs,
        audit,
        rescan_violations,
        rescanned,
    }
}

fn criterion_learning(results: &[SeedResults]) -> Verdict {
    let mut ok = 0;
    let mut parts = Vec::new();
    let mut slowest = Duration::ZERO;
    for r in results {
        let full = &r.runs[0].1;
        slowest = slowest.max(full.train_time);
        if full.hr_u >= 0.15 && full.hr_v >= 0.15 {
            ok += 1;
        }
        parts.push(format!("{}:{:.3}/{:.3}", r.seed, full.hr_u, full.hr_v));
    }
    let minutes = slowest.as_secs_f64() / 60.0;
    Verdict {
        id: 5,
        name: "learning signal",
        pass: ok >= 4 && minutes <= 15.0,
        detail: format!(
            "{ok}/5 seeds with HR@5 >= 0.15 on both sides (need 4) [{}], slowest training {minutes:.1} min (<= 15)",
            parts.join(" ")
        ),
    }
}

fn criterion_ablation(results: &[SeedResults]) -> Verdict {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in results {
        let full = r.runs[0].1.mean_ndcg;
        let beaten: Vec<&str> = r.runs[1..]
            .iter()
            .filter(|(_, v)| full < v.mean_ndcg - 0.005)
            .map(|(name, _)| *name)
            .collect();
        if beaten.is_empty() {
            ok += 1;
            parts.push(format!("{}:ok", r.seed));
        } else {
            parts.push(format!("{}:below {}", r.seed, beaten.join(",")));
        }
    }
    Verdict {
        id: 6,
        name: "ablation direction",
        pass: ok >= 3,
        detail: format!(
            "{ok}/5 seeds with full >= every variant - 0.005 NDCG@5 (need 3) [{}]",
            parts.join(" ")
        ),
    }
}

fn criterion_efficiency() -> Verdict {
    let start = Instant::now();
    let cfg = BenchConfig::default();
    let macro_rows = measure_latency(ScorerKind::Macro, &cfg).unwrap();
    let micro_rows = measure_latency(ScorerKind::Micro, &cfg).unwrap();
    let beta_macro = fit_rows(&macro_rows).unwrap().exponent;
    let beta_micro = fit_rows(&micro_rows).unwrap().exponent;
    let at64 = |rows: &[reseq::bench::LatencyRow]| rows.iter().find(|r| r.n == 64).unwrap().median_us;
    let speedup = at64(&micro_rows) / at64(&macro_rows);
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 7,
        name: "matching efficiency",
        pass: beta_micro > 1.5 && beta_macro.abs() < 0.3 && speedup >= 10.0 && secs < 300.0,
        detail: format!(
            "micro exponent {beta_micro:.3} (> 1.5), macro exponent {beta_macro:.3} (|.| < 0.3), \
             speedup@64 {speedup:.0}x (>= 10), {secs:.1}s (< 300s)"
        ),
    }
}

fn criterion_leakage(results: &[SeedResults]) -> Verdict {
    let mut audit = AuditStats::default();
    let (mut rescanned, mut rescan_bad) = (0, 0);
    for r in results {
        audit.merge(r.audit);
        rescanned += r.rescanned;
        rescan_bad += r.rescan_violations;
    }
    Verdict {
        id: 8,
        name: "leakage audit",
        pass: audit.violations == 0 && audit.sequences > 0 && rescan_bad == 0,
        detail: format!(
            "{} sequences / {} events audited, {} violations; {rescanned} histories rescanned, {rescan_bad} violations",
            audit.sequences, audit.events, audit.violations
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    record(criterion_micro_oracle());
    record(criterion_gradients());
    record(criterion_masks());
    record(criterion_loss_identities());
    record(criterion_efficiency());

    let results: Vec<SeedResults> = (1..=5).map(run_seed).collect();
    record(criterion_learning(&results));
    record(criterion_ablation(&results));
    record(criterion_leakage(&results));

    verdicts.sort_by_key(|v| v.id);
    let _ = writeln!(std::io::stderr(), "acceptance summary:");
    for v in &verdicts {
        report(v);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
