//! End-to-end acceptance run. Prints one line per criterion and fails if
//! any criterion fails.
//!
//! The toy pipeline (train, search, enumerate, co-search) is shared by the
//! criteria that need it and runs once, sequentially.

mod common;

use std::fmt::Write as _;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use diffrate::cost::{
    baseline_flops, flops, stem_and_head_flops, CompressionOrder, CompressionSchedule, HwCostModel, HwMetric,
};
use diffrate::ddp::{overhead_flops, overhead_parameters};
use diffrate::harness::pipeline::{self, BACKBONE};
use diffrate::harness::{RunConfig, ScheduleFile, Target, ToyDataset};
use diffrate::search::{
    cosearch_hw, enumerate_schedules, random_schedules, search_rates, EvalCache, RandomSpec, SearchConfig,
};
use diffrate::vit::{checkpoint, BackboneParams, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Runs a check that signals failure by panicking.
fn guarded(f: impl FnOnce() -> String) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(detail) => outcome(true, detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, msg)
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Everything the pipeline criteria share.
struct Toy {
    cfg: RunConfig,
    params: BackboneParams,
    train: ToyDataset,
    val: ToyDataset,
    val_accuracy: f64,
    target: f64,
    search: SearchConfig,
}

impl Toy {
    fn cache(&self) -> EvalCache<'_> {
        EvalCache::new(&self.params, &self.val.images, &self.val.labels).unwrap()
    }

    fn run(&self, cfg: &SearchConfig, train: &ToyDataset) -> (CompressionSchedule, f64) {
        let r = search_rates(&self.params, &train.images, &train.labels, cfg, None).unwrap();
        let acc = self.cache().evaluate(&r.schedule, cfg.metric).unwrap().0;
        (r.schedule, acc)
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let (checked, mismatches) = common::flops::exhaustive();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 60.0,
        format!("{checked} schedules, {mismatches} mismatches, {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let base = baseline_flops(&ModelConfig::vit_base()) as f64;
    let small = ModelConfig::vit_small();
    let s = CompressionSchedule {
        token_count: 197,
        prune_kept: vec![197, 196, 190, 168, 150, 139, 129, 117, 99, 78, 58, 3],
        merge_kept: vec![197, 194, 176, 156, 141, 133, 121, 107, 88, 64, 56, 3],
        order: CompressionOrder::PruneThenMerge,
    };
    let sf = flops(&s, small.embed_dim).unwrap() as f64;
    let total = sf + stem_and_head_flops(&small) as f64;
    let e1 = (base - 17.6e9).abs() / 17.6e9;
    let e2 = (sf - 2.9e9).abs() / 2.9e9;
    outcome(
        e1 <= 0.02 && e2 <= 0.05,
        format!(
            "ViT-B zero {:.2}G ({} off 17.6G); ViT-S schedule {:.3}G blocks-only, {:.3}G with stem and head ({} off 2.9G)",
            base / 1e9,
            pct(e1),
            sf / 1e9,
            total / 1e9,
            pct(e2)
        ),
    )
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut o = guarded(|| {
        common::masks::simplex_draws(10_000);
        common::masks::one_hot(64);
        "10000 simplex draws and every one-hot rate for N <= 64".into()
    });
    let secs = t.elapsed().as_secs_f64();
    o.pass &= secs < 10.0;
    let _ = write!(o.detail, ", {secs:.2}s");
    o
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let p = common::equivalence::worst_pruning(100);
    let m = common::equivalence::worst_merging(100);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        p <= 1e-10 && m <= 1e-8 && secs < 60.0,
        format!("pruning {p:.2e} (<= 1e-10), merging {m:.2e} (<= 1e-8), {secs:.1}s"),
    )
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let prim = common::gradients::primitive_errors();
    let (worst_name, worst) = prim.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let chain = common::gradients::chain_errors().into_iter().fold(0.0f64, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && chain <= 1e-8 && secs < 120.0,
        format!(
            "{} primitives, worst {worst:.2e} ({worst_name}); rate-logit chain {chain:.2e}; {secs:.1}s",
            prim.len()
        ),
    )
}

fn criterion_11(report: &str) -> Outcome {
    let p = overhead_parameters(196, 12);
    let f = overhead_flops(196, 12);
    let line = report.lines().find(|l| l.contains("reference N=196 L=12")).unwrap_or("").trim().to_string();
    let emitted = line.contains("4704 parameters") && line.contains("236376 FLOPs") && line.ends_with("match");
    outcome(p == 4704 && f == 236_376 && emitted, format!("report: {line}"))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_12(toy: &Toy, main: &Path, scratch: &Path) -> Outcome {
    guarded(|| {
        let sched = ScheduleFile::load(&main.join(pipeline::SCHEDULE)).unwrap();
        let json = sched.to_json().unwrap();
        let again = ScheduleFile::from_json(&json).unwrap();
        assert_eq!(again, sched, "schedule JSON round trip");
        assert_eq!(again.to_json().unwrap(), json);
        let bytes = std::fs::read(main.join(BACKBONE)).unwrap();
        let decoded = checkpoint::decode(&bytes).unwrap();
        assert_eq!(decoded, toy.params, "checkpoint round trip");
        assert_eq!(checkpoint::encode(&decoded), bytes);

        // Same config and seed in a fresh directory.
        pipeline::gen_data(&toy.cfg, scratch).unwrap();
        pipeline::train_backbone(&toy.cfg, scratch).unwrap();
        pipeline::search(&toy.cfg, scratch).unwrap();
        pipeline::apply(&toy.cfg, scratch).unwrap();
        pipeline::flops_report(&toy.cfg, scratch).unwrap();
        let a = files(main);
        let b = files(scratch);
        let names: Vec<&str> = b.iter().map(|(n, _)| n.as_str()).collect();
        for (name, content) in &b {
            let other = a.iter().find(|(n, _)| n == name).map(|(_, c)| c);
            assert_eq!(other, Some(content), "{name} differs between identical runs");
        }
        for (name, data) in [("train images", "train-images.idx"), ("val labels", "val-labels.idx")] {
            assert_eq!(
                std::fs::read(main.join("data").join(data)).unwrap(),
                std::fs::read(scratch.join("data").join(data)).unwrap(),
                "{name} differ"
            );
        }
        format!("schedule and checkpoint round trip; rerun byte-identical: {}", names.join(", "))
    })
}

/// Writes straight to stdout so the lines show without `--nocapture`.
fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).unwrap();
    out.flush().unwrap();
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut table = String::new();
    let emit = |n: usize, o: Outcome, results: &mut Vec<(usize, Outcome)>| {
        say(&format!("criterion {n}: {} {}\n", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((n, o));
    };

    emit(1, criterion_1(), &mut results);
    emit(2, criterion_2(), &mut results);
    emit(3, criterion_3(), &mut results);
    emit(4, criterion_4(), &mut results);
    emit(5, criterion_5(), &mut results);

    // Toy pipeline.
    let tmp = tempfile::tempdir().unwrap();
    let main = tmp.path().join("main");
    let cfg = RunConfig::default();
    let t6 = Instant::now();
    pipeline::gen_data(&cfg, &main).unwrap();
    let trained = pipeline::train_backbone(&cfg, &main).unwrap();
    let summary = pipeline::search(&cfg, &main).unwrap();
    pipeline::apply(&cfg, &main).unwrap();
    pipeline::flops_report(&cfg, &main).unwrap();
    let (train, val) = pipeline::load_data(&cfg, &main).unwrap();
    let toy = Toy {
        params: checkpoint::load(&main.join(BACKBONE)).unwrap(),
        cfg: cfg.clone(),
        train,
        val,
        val_accuracy: trained.val_accuracy,
        target: summary.target_flops.unwrap(),
        search: cfg.resolved_search().unwrap(),
    };
    let main_schedule = ScheduleFile::load(&main.join(pipeline::SCHEDULE)).unwrap().schedule();
    let main_acc = summary.accuracy;
    let metric = toy.search.metric;

    let n = toy.params.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let randoms = random_schedules(
        n.token_count(),
        n.depth,
        n.embed_dim,
        toy.target,
        2000,
        &RandomSpec::default(),
        &mut rng,
    )
    .unwrap();
    let cache = toy.cache();
    let enumeration = enumerate_schedules(&cache, &randoms, metric, Some(toy.target), None).unwrap();
    let best = enumeration.best_under_target.clone().unwrap();
    let secs6 = t6.elapsed().as_secs_f64();
    let gap = (summary.flops as f64 - toy.target).abs() / toy.target;
    emit(
        6,
        outcome(
            toy.val_accuracy >= 0.95 && main_acc >= best.accuracy - 0.01 && gap <= 0.02 && secs6 < 900.0,
            format!(
                "backbone {} val; DiffRate {} at {} FLOPs ({} off target); best of {} random at FLOPs <= T {}; {secs6:.0}s",
                pct(toy.val_accuracy),
                pct(main_acc),
                summary.flops,
                pct(gap),
                enumeration.ranked.len(),
                pct(best.accuracy)
            ),
        ),
        &mut results,
    );

    let long = SearchConfig {
        epochs: 10,
        ..toy.search.clone()
    };
    let (_, acc10) = toy.run(&long, &toy.train);
    emit(
        7,
        outcome(
            acc10 - main_acc <= 0.003,
            format!("3 epochs {}, 10 epochs {} ({:+.2} points)", pct(main_acc), pct(acc10), 100.0 * (acc10 - main_acc)),
        ),
        &mut results,
    );

    let sixteenth = toy.train.head(toy.train.len() / 16);
    let (s16, acc16) = toy.run(&toy.search, &sixteenth);
    emit(
        8,
        outcome(
            (acc16 - main_acc).abs() <= 0.005,
            format!(
                "{} images: {} at {} FLOPs vs full data {}",
                sixteenth.len(),
                pct(acc16),
                flops(&s16, n.embed_dim).unwrap(),
                pct(main_acc)
            ),
        ),
        &mut results,
    );

    let variants = [
        ("prune-only", true, false, CompressionOrder::PruneThenMerge),
        ("merge-only", false, true, CompressionOrder::PruneThenMerge),
        ("merge-then-prune", true, true, CompressionOrder::MergeThenPrune),
    ];
    let mut rows = vec![("prune-then-merge", main_schedule.clone(), main_acc)];
    for (name, prune, merge, order) in variants {
        let c = SearchConfig {
            prune,
            merge,
            order,
            ..toy.search.clone()
        };
        let (s, a) = toy.run(&c, &toy.train);
        rows.push((name, s, a));
    }
    let _ = writeln!(table, "compression order at T = {:.0} FLOPs:", toy.target);
    for (name, s, a) in &rows {
        let _ = writeln!(table, "  {name:<18} acc {:>7} flops {:>7} kept {:?}", pct(*a), flops(s, n.embed_dim).unwrap(), s.kept_profile());
    }
    say(&table);
    let best_single = rows[1].2.max(rows[2].2);
    emit(
        9,
        outcome(
            main_acc >= best_single - 0.005,
            format!(
                "prune-then-merge {}, prune-only {}, merge-only {}, merge-then-prune {}",
                pct(rows[0].2),
                pct(rows[1].2),
                pct(rows[2].2),
                pct(rows[3].2)
            ),
        ),
        &mut results,
    );

    // Hardware co-search on the calibrated surrogate.
    let model = cfg.cost_model().unwrap();
    let anchor = cfg.hw_config(&model);
    let space = model.coefficients.space();
    let flops_only_latency = model.total(&main_schedule, &anchor, HwMetric::Latency);
    let latency_target = 0.95 * flops_only_latency;
    let lat_cfg = SearchConfig {
        target_flops: None,
        target_latency: Some(latency_target),
        ..toy.search.clone()
    };
    let co = cosearch_hw(&toy.params, &toy.train.images, &toy.train.labels, &lat_cfg, &model, &space, None).unwrap();
    let hw = co.search.hw.unwrap();
    let co_lat = model.total(&co.search.schedule, &hw, HwMetric::Latency);
    let co_acc = cache.evaluate(&co.search.schedule, metric).unwrap().0;
    let lat_gap = (co_lat - latency_target).abs() / latency_target;
    let mut multi_cfg = cfg.clone();
    multi_cfg.targets.latency = Some(Target::Absolute(latency_target));
    let multi_search = multi_cfg.resolved_search().unwrap();
    let multi = cosearch_hw(&toy.params, &toy.train.images, &toy.train.labels, &multi_search, &model, &space, None).unwrap();
    let multi_hw = multi.search.hw.unwrap();
    let multi_lat = model.total(&multi.search.schedule, &multi_hw, HwMetric::Latency);
    let multi_acc = cache.evaluate(&multi.search.schedule, metric).unwrap().0;
    let base_lat = model.total(&CompressionSchedule::zero(n.token_count(), n.depth), &anchor, HwMetric::Latency);
    emit(
        10,
        outcome(
            lat_gap <= 0.05 && co_acc >= best.accuracy - 0.01 && co.search.flops as f64 <= toy.target && multi_lat <= flops_only_latency,
            format!(
                "baseline {base_lat:.4} ms; latency target {latency_target:.4} ms -> {co_lat:.4} ms ({} off), acc {} at {} FLOPs vs random best {}; \
                 FLOPs+latency {multi_lat:.4} ms (acc {}) vs FLOPs-only {flops_only_latency:.4} ms",
                pct(lat_gap),
                pct(co_acc),
                co.search.flops,
                pct(best.accuracy),
                pct(multi_acc)
            ),
        ),
        &mut results,
    );

    let report = pipeline::report(&main).unwrap();
    emit(11, criterion_11(&report.text), &mut results);
    emit(12, criterion_12(&toy, &main, &tmp.path().join("again")), &mut results);

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
