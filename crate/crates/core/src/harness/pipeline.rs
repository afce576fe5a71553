//! One function per subcommand. Each reads what it needs from a run
//! directory, writes its artifacts there and returns a summary that is also
//! saved as JSON. Nothing written depends on wall-clock time, so a fixed
//! seed gives byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnumerateMode, RunConfig};
use super::dataset::{gen_splits, ToyDataset};
use super::idx::{ingest_idx, write_idx};
use super::render::{render_token_map, Rgb};
use super::schedule_file::{config_hash, Provenance, ScheduleFile};
use crate::cost::{flops, min_flops, CompressionSchedule, HwConfig, HwCostModel, HwMetric, SyntheticCostModel};
use crate::ddp::{overhead_flops, overhead_parameters};
use crate::error::{Error, Result};
use crate::search::{
    cosearch_hw, enumerate_schedules, evaluate, finetune as finetune_weights, grid_schedules, random_schedules,
    search_rates, train, EvalCache, Evaluated, HwFixed, RandomSpec, SearchResult,
};
use crate::token_ops::{apply_image, apply_schedule, accuracy};
use crate::vit::{checkpoint, BackboneParams};

pub const BACKBONE: &str = "backbone.drck";
pub const SCHEDULE: &str = "schedule.json";
pub const TRACE: &str = "trace.csv";
pub const APPLY: &str = "apply.json";
pub const FLOPS: &str = "flops.json";
pub const TRAIN: &str = "train.json";
pub const SEARCH: &str = "search.json";
pub const HARDWARE: &str = "hardware.json";
pub const ENUMERATE: &str = "enumerate.json";
pub const ENUMERATE_CSV: &str = "enumerate.csv";
pub const FINETUNED: &str = "finetuned.drck";
pub const FINETUNE: &str = "finetune.json";
pub const REPORT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

const DATA_FILES: [&str; 4] = [
    "data/train-images.idx",
    "data/train-labels.idx",
    "data/val-images.idx",
    "data/val-labels.idx",
];

/// Artifacts `report` cannot do without.
pub const REQUIRED: [&str; 5] = [BACKBONE, SCHEDULE, TRACE, APPLY, FLOPS];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format {
        what,
        detail: format!("{}: {e}", path.display()),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Training and validation data: the configured IDX files, else IDX files
/// written by `gen-data` into `dir`, else the synthetic recipe.
pub fn load_data(cfg: &RunConfig, dir: &Path) -> Result<(ToyDataset, ToyDataset)> {
    let (train, val) = if let Some(f) = &cfg.data.idx {
        (
            ingest_idx(&f.train_images, Some(&f.train_labels), "train")?,
            ingest_idx(&f.val_images, Some(&f.val_labels), "val")?,
        )
    } else if DATA_FILES.iter().all(|f| dir.join(f).exists()) {
        let p = |i: usize| dir.join(DATA_FILES[i]);
        (
            ingest_idx(&p(0), Some(&p(1)), "train")?,
            ingest_idx(&p(2), Some(&p(3)), "val")?,
        )
    } else {
        gen_splits(&cfg.data.recipe, cfg.data.seed)?
    };
    let m = &cfg.model;
    let want = [m.image_size, m.image_size, m.channels];
    for d in [&train, &val] {
        if let Some(img) = d.images.first() {
            if img.shape() != want {
                return Err(Error::Config(format!(
                    "{} images are {:?}, model expects {want:?}",
                    d.split,
                    img.shape()
                )));
            }
        }
        if let Some(&y) = d.labels.iter().find(|&&y| y >= m.class_count) {
            return Err(Error::Config(format!("{} label {y} exceeds class count {}", d.split, m.class_count)));
        }
    }
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub train: usize,
    pub val: usize,
    pub files: Vec<PathBuf>,
}

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<GenDataSummary> {
    create_dir(&dir.join("data"))?;
    let (train, val) = gen_splits(&cfg.data.recipe, cfg.data.seed)?;
    write_idx(&train, &dir.join(DATA_FILES[0]), &dir.join(DATA_FILES[1]))?;
    write_idx(&val, &dir.join(DATA_FILES[2]), &dir.join(DATA_FILES[3]))?;
    write_json(&dir.join("data/recipe.json"), &cfg.data)?;
    Ok(GenDataSummary {
        train: train.len(),
        val: val.len(),
        files: DATA_FILES.iter().map(PathBuf::from).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub init_accuracy: f64,
    pub val_accuracy: f64,
    pub epochs: Vec<crate::search::EpochMetrics>,
}

pub fn train_backbone(cfg: &RunConfig, dir: &Path) -> Result<TrainSummary> {
    create_dir(dir)?;
    let (tr, va) = load_data(cfg, dir)?;
    let init = BackboneParams::init(&cfg.model, cfg.train.seed)?;
    let metric = cfg.search.metric;
    let init_accuracy = evaluate(&init, &va.images, &va.labels, None, metric)?;
    let report = train(init, (&tr.images, &tr.labels), Some((&va.images, &va.labels)), &cfg.train, None, metric)?;
    checkpoint::save(&report.params, &dir.join(BACKBONE))?;
    let val_accuracy = match report.epochs.last().and_then(|e| e.val_accuracy) {
        Some(a) => a,
        None => init_accuracy,
    };
    let s = TrainSummary {
        init_accuracy,
        val_accuracy,
        epochs: report.epochs,
    };
    write_json(&dir.join(TRAIN), &s)?;
    Ok(s)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(vec![path.to_path_buf()]))
    }
}

fn load_backbone(cfg: &RunConfig, path: &Path) -> Result<BackboneParams> {
    require(path)?;
    let p = checkpoint::load(path)?;
    if p.config != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for {:?}, config describes {:?}",
            path.display(),
            p.config,
            cfg.model
        )));
    }
    Ok(p)
}

fn load_schedule(params: &BackboneParams, dir: &Path) -> Result<ScheduleFile> {
    require(&dir.join(SCHEDULE))?;
    let f = ScheduleFile::load(&dir.join(SCHEDULE))?;
    if f.model != params.config {
        return Err(Error::Config("schedule was searched for a different model".into()));
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub target_flops: Option<f64>,
    pub target_latency: Option<f64>,
    pub target_power: Option<f64>,
    pub flops: u64,
    pub baseline_flops: u64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub latency: Option<f64>,
    pub power: Option<f64>,
    pub hardware: Option<HwConfig>,
    pub prune_kept: Vec<usize>,
    pub merge_kept: Vec<usize>,
    pub steps: usize,
}

fn finish_search(
    cfg: &RunConfig,
    dir: &Path,
    params: &BackboneParams,
    val: &ToyDataset,
    result: &SearchResult,
    model: Option<(&SyntheticCostModel, HwConfig)>,
) -> Result<SearchSummary> {
    let search = cfg.resolved_search()?;
    let prov = Provenance {
        config_hash: config_hash(cfg)?,
        seed: search.seed,
        flops: result.flops,
        hardware: result.hw,
    };
    ScheduleFile::new(&params.config, &result.schedule, search.metric, prov)?.save(&dir.join(SCHEDULE))?;
    result.trace.save_csv(&dir.join(TRACE))?;
    let zero = CompressionSchedule::zero(params.config.token_count(), params.config.depth);
    let s = SearchSummary {
        target_flops: search.target_flops,
        target_latency: search.target_latency,
        target_power: search.target_power,
        flops: result.flops,
        baseline_flops: flops(&zero, params.config.embed_dim)?,
        accuracy: evaluate(params, &val.images, &val.labels, Some(&result.schedule), search.metric)?,
        baseline_accuracy: evaluate(params, &val.images, &val.labels, None, search.metric)?,
        latency: model.map(|(m, hw)| m.total(&result.schedule, &hw, HwMetric::Latency)),
        power: model.map(|(m, hw)| m.total(&result.schedule, &hw, HwMetric::Power)),
        hardware: model.map(|(_, hw)| hw),
        prune_kept: result.schedule.prune_kept.clone(),
        merge_kept: result.schedule.merge_kept.clone(),
        steps: result.trace.len(),
    };
    write_json(&dir.join(SEARCH), &s)?;
    Ok(s)
}

/// Rate search on the frozen backbone. Latency and power targets are
/// measured on the configured design point.
pub fn search(cfg: &RunConfig, dir: &Path) -> Result<SearchSummary> {
    let params = load_backbone(cfg, &dir.join(BACKBONE))?;
    let search = cfg.resolved_search()?;
    let (tr, va) = load_data(cfg, dir)?;
    let model = cfg.cost_model()?;
    let hw_cfg = cfg.hw_config(&model);
    let needs_hw = search.target_latency.is_some() || search.target_power.is_some();
    let hw = needs_hw.then_some(HwFixed {
        model: &model,
        config: hw_cfg,
    });
    let mut result = search_rates(&params, &tr.images, &tr.labels, &search, hw)?;
    if needs_hw {
        result.hw = Some(hw_cfg);
    }
    finish_search(cfg, dir, &params, &va, &result, needs_hw.then_some((&model, hw_cfg)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareSummary {
    pub config: HwConfig,
    pub latency: f64,
    pub power: f64,
    pub baseline_latency: f64,
    pub baseline_power: f64,
    pub rounds: Vec<HardwareRound>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareRound {
    pub round: usize,
    pub config: HwConfig,
    pub latency: f64,
    pub power: f64,
    pub loss: f64,
}

/// Joint search of rates and accelerator configuration.
pub fn cosearch(cfg: &RunConfig, dir: &Path) -> Result<(SearchSummary, HardwareSummary)> {
    let params = load_backbone(cfg, &dir.join(BACKBONE))?;
    let search = cfg.resolved_search()?;
    if search.target_latency.is_none() && search.target_power.is_none() {
        return Err(Error::Config("cosearch-hw needs a latency or power target".into()));
    }
    let (tr, va) = load_data(cfg, dir)?;
    let model = cfg.cost_model()?;
    let space = model.coefficients.space();
    let r = cosearch_hw(&params, &tr.images, &tr.labels, &search, &model, &space, None)?;
    let hw = r.search.hw.expect("co-search selects hardware");
    let summary = finish_search(cfg, dir, &params, &va, &r.search, Some((&model, hw)))?;
    let zero = CompressionSchedule::zero(params.config.token_count(), params.config.depth);
    let h = HardwareSummary {
        config: hw,
        latency: model.total(&r.search.schedule, &hw, HwMetric::Latency),
        power: model.total(&r.search.schedule, &hw, HwMetric::Power),
        baseline_latency: model.total(&zero, &hw, HwMetric::Latency),
        baseline_power: model.total(&zero, &hw, HwMetric::Power),
        rounds: r
            .rounds
            .iter()
            .map(|x| HardwareRound {
                round: x.round,
                config: x.config,
                latency: x.latency,
                power: x.power,
                loss: x.loss,
            })
            .collect(),
    };
    write_json(&dir.join(HARDWARE), &h)?;
    Ok((summary, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplySummary {
    pub images: usize,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// Measured multiply-accumulates per image in the blocks.
    pub macs_per_image: u64,
    /// Analytic operation count of the schedule.
    pub flops: u64,
    pub baseline_flops: u64,
    pub token_counts: Vec<usize>,
    pub hardware: HwConfig,
    pub latency: f64,
    pub power: f64,
    pub baseline_latency: f64,
    pub baseline_power: f64,
}

/// Runs the saved schedule by physically dropping tokens on the
/// validation split.
pub fn apply(cfg: &RunConfig, dir: &Path) -> Result<ApplySummary> {
    let params = load_backbone(cfg, &dir.join(BACKBONE))?;
    let file = load_schedule(&params, dir)?;
    let schedule = file.schedule();
    let (_, va) = load_data(cfg, dir)?;
    let rep = apply_schedule(&params, &schedule, file.metric, &va.images)?;
    let zero = CompressionSchedule::zero(params.config.token_count(), params.config.depth);
    let base = apply_schedule(&params, &zero, file.metric, &va.images)?;
    let model = cfg.cost_model()?;
    let hw = file.provenance.hardware.unwrap_or_else(|| cfg.hw_config(&model));
    let s = ApplySummary {
        images: va.len(),
        accuracy: accuracy(&rep.logits, &va.labels),
        baseline_accuracy: accuracy(&base.logits, &va.labels),
        macs_per_image: rep.macs_per_image,
        flops: flops(&schedule, params.config.embed_dim)?,
        baseline_flops: flops(&zero, params.config.embed_dim)?,
        token_counts: rep.token_counts,
        hardware: hw,
        latency: model.total(&schedule, &hw, HwMetric::Latency),
        power: model.total(&schedule, &hw, HwMetric::Power),
        baseline_latency: model.total(&zero, &hw, HwMetric::Latency),
        baseline_power: model.total(&zero, &hw, HwMetric::Power),
    };
    write_json(&dir.join(APPLY), &s)?;
    Ok(s)
}

/// Parameter and operation overhead of the rate machinery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Image tokens `N` and blocks `L` the closed forms are evaluated at.
    pub tokens: usize,
    pub depth: usize,
    /// `2NL`.
    pub parameters: u64,
    /// `(N² + 5N)L/2`.
    pub flops: u64,
}

impl Overhead {
    pub fn new(tokens: usize, depth: usize) -> Self {
        Self {
            tokens,
            depth,
            parameters: overhead_parameters(tokens as u64, depth as u64),
            flops: overhead_flops(tokens as u64, depth as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub block: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub baseline_flops: u64,
    pub min_flops: u64,
    pub stem_and_head_flops: u64,
    pub target_flops: Option<f64>,
    pub schedule_flops: Option<u64>,
    pub blocks: Vec<BlockFlops>,
    pub overhead: Overhead,
    /// Rate logits actually learned: two stages of `N + 1` candidates per block.
    pub rate_logits: usize,
}

/// Analytic costs of the model and, if present, of the saved schedule.
/// A FLOPs target below the class-token-only floor is infeasible.
pub fn flops_report(cfg: &RunConfig, dir: &Path) -> Result<FlopsSummary> {
    create_dir(dir)?;
    let m = &cfg.model;
    m.validate()?;
    let min = min_flops(m);
    let target = cfg.targets.flops.map(|t| t.resolve(cfg.baseline_block_flops())).or(cfg.search.target_flops);
    if let Some(t) = target {
        if t < min as f64 {
            return Err(Error::Infeasible {
                target: t,
                minimum: min as f64,
            });
        }
    }
    let path = dir.join(SCHEDULE);
    let schedule = if path.exists() { Some(ScheduleFile::load(&path)?.schedule()) } else { None };
    let c = m.embed_dim as u64;
    let blocks = match &schedule {
        Some(s) => {
            s.check_model(m.depth, m.token_count())?;
            s.counts()
                .iter()
                .enumerate()
                .map(|(block, k)| BlockFlops {
                    block,
                    tokens_in: k.tokens_in,
                    tokens_out: k.tokens_out,
                    flops: crate::cost::attention_flops(k.tokens_in as u64, c)
                        + crate::cost::mlp_flops(k.tokens_out as u64, c),
                })
                .collect()
        }
        None => Vec::new(),
    };
    let s = FlopsSummary {
        baseline_flops: crate::cost::baseline_flops(m),
        min_flops: min,
        stem_and_head_flops: crate::cost::stem_and_head_flops(m),
        target_flops: target,
        schedule_flops: schedule.as_ref().map(|s| flops(s, m.embed_dim)).transpose()?,
        blocks,
        overhead: Overhead::new(m.token_count() - 1, m.depth),
        rate_logits: 2 * m.token_count() * m.depth,
    };
    write_json(&dir.join(FLOPS), &s)?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerateSummary {
    pub target_flops: f64,
    pub requested: usize,
    pub evaluated: usize,
    pub partial: bool,
    pub best_under_target: Option<Evaluated>,
    pub median_accuracy: Option<f64>,
    pub pareto: Vec<Evaluated>,
    /// Off-the-shelf accuracy of the saved schedule on the same images.
    pub searched_accuracy: Option<f64>,
    pub searched_flops: Option<u64>,
}

/// Scores random or grid schedules off the shelf on the validation split.
pub fn enumerate(cfg: &RunConfig, dir: &Path) -> Result<EnumerateSummary> {
    let params = load_backbone(cfg, &dir.join(BACKBONE))?;
    let search = cfg.resolved_search()?;
    let target = search
        .target_flops
        .ok_or_else(|| Error::Config("enumerate needs a FLOPs target".into()))?;
    let m = &params.config;
    let min = min_flops(m) as f64;
    if target < min {
        return Err(Error::Infeasible { target, minimum: min });
    }
    let e = &cfg.enumerate;
    let schedules = match e.mode {
        EnumerateMode::Random => {
            let spec = RandomSpec {
                prune: search.prune,
                merge: search.merge,
                order: search.order,
                lower: e.lower,
                ..RandomSpec::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
            random_schedules(m.token_count(), m.depth, m.embed_dim, target, e.count, &spec, &mut rng)?
        }
        EnumerateMode::Grid => {
            if e.kept_grid.is_empty() {
                return Err(Error::Config("grid enumeration needs enumerate.kept_grid".into()));
            }
            grid_schedules(m.token_count(), m.depth, &e.kept_grid, search.prune, search.merge, search.order)?
        }
    };
    let (_, va) = load_data(cfg, dir)?;
    let cache = EvalCache::new(&params, &va.images, &va.labels)?;
    let en = enumerate_schedules(&cache, &schedules, search.metric, Some(target), e.budget)?;

    let mut csv = String::from("rank,flops,accuracy,prune_kept,merge_kept,order\n");
    for (i, r) in en.ranked.iter().enumerate() {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            i,
            r.flops,
            r.accuracy,
            join(&r.schedule.prune_kept),
            join(&r.schedule.merge_kept),
            serde_json::to_value(r.schedule.order)?.as_str().unwrap_or("")
        );
    }
    std::fs::write(dir.join(ENUMERATE_CSV), csv)?;

    let path = dir.join(SCHEDULE);
    let searched = if path.exists() {
        let f = load_schedule(&params, dir)?;
        let s = f.schedule();
        Some((cache.evaluate(&s, f.metric)?.0, flops(&s, m.embed_dim)?))
    } else {
        None
    };
    let mut accs: Vec<f64> = en.ranked.iter().map(|r| r.accuracy).collect();
    accs.sort_by(f64::total_cmp);
    let s = EnumerateSummary {
        target_flops: target,
        requested: en.requested,
        evaluated: en.ranked.len(),
        partial: en.partial,
        best_under_target: en.best_under_target,
        median_accuracy: accs.get(accs.len() / 2).copied(),
        pareto: en.pareto,
        searched_accuracy: searched.map(|x| x.0),
        searched_flops: searched.map(|x| x.1),
    };
    write_json(&dir.join(ENUMERATE), &s)?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub epochs: usize,
    pub baseline_accuracy: f64,
    pub before: f64,
    pub after: f64,
    /// Share of the gap to the baseline closed by fine-tuning.
    pub recovered: Option<f64>,
}

/// Fine-tunes the backbone with the saved schedule applied.
pub fn finetune(cfg: &RunConfig, dir: &Path) -> Result<FinetuneSummary> {
    let params = load_backbone(cfg, &dir.join(BACKBONE))?;
    let file = load_schedule(&params, dir)?;
    let schedule = file.schedule();
    let (tr, va) = load_data(cfg, dir)?;
    let metric = file.metric;
    let report = finetune_weights(&params, &tr.images, &tr.labels, &schedule, &cfg.finetune, metric)?;
    checkpoint::save(&report.params, &dir.join(FINETUNED))?;
    let baseline_accuracy = evaluate(&params, &va.images, &va.labels, None, metric)?;
    let before = evaluate(&params, &va.images, &va.labels, Some(&schedule), metric)?;
    let after = evaluate(&report.params, &va.images, &va.labels, Some(&schedule), metric)?;
    let gap = baseline_accuracy - before;
    let s = FinetuneSummary {
        epochs: cfg.finetune.epochs,
        baseline_accuracy,
        before,
        after,
        recovered: (gap > 0.0).then(|| (after - before) / gap),
    };
    write_json(&dir.join(FINETUNE), &s)?;
    Ok(s)
}

/// Writes the input and the per-block token maps of each configured
/// validation image under `render/`.
pub fn render(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let params = load_backbone(cfg, &dir.join(BACKBONE))?;
    let file = load_schedule(&params, dir)?;
    let schedule = file.schedule();
    let (_, va) = load_data(cfg, dir)?;
    create_dir(&dir.join("render"))?;
    let mut out = Vec::new();
    for &i in &cfg.render.images {
        let img = va
            .images
            .get(i)
            .ok_or_else(|| Error::Config(format!("render image {i} out of range for {} images", va.len())))?;
        let run = apply_image(&params, &schedule, file.metric, img)?;
        let input = PathBuf::from(format!("render/img{i}_input.ppm"));
        Rgb::from_image(img)?.save(&dir.join(&input))?;
        out.push(input);
        for l in 0..run.blocks.len() {
            let name = PathBuf::from(format!("render/img{i}_block{l}.ppm"));
            render_token_map(img, params.config.patch_size, &run.blocks, l)?.save(&dir.join(&name))?;
            out.push(name);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub text: String,
    pub csv: String,
}

/// Paths under `dir` of the artifacts in `names` that do not exist.
pub fn missing_artifacts(dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).filter(|p| !p.exists()).collect()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// Summary tables of a finished run as text and CSV.
pub fn report(dir: &Path) -> Result<ReportSummary> {
    let missing = missing_artifacts(dir, &REQUIRED);
    if !missing.is_empty() {
        return Err(Error::Missing(missing));
    }
    let sched = ScheduleFile::load(&dir.join(SCHEDULE))?;
    let ap: ApplySummary = read_json(&dir.join(APPLY), "apply summary")?;
    let fl: FlopsSummary = read_json(&dir.join(FLOPS), "FLOPs summary")?;
    let trace_rows = std::fs::read_to_string(dir.join(TRACE))?.lines().count().saturating_sub(1);
    let optional = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let tr: Option<TrainSummary> = optional(TRAIN).map(|p| read_json(&p, "train summary")).transpose()?;
    let en: Option<EnumerateSummary> = optional(ENUMERATE).map(|p| read_json(&p, "enumerate summary")).transpose()?;
    let hw: Option<HardwareSummary> = optional(HARDWARE).map(|p| read_json(&p, "hardware summary")).transpose()?;
    let ft: Option<FinetuneSummary> = optional(FINETUNE).map(|p| read_json(&p, "finetune summary")).transpose()?;

    let m = &sched.model;
    let base = ap.baseline_flops as f64;
    let mut text = String::new();
    let mut csv = String::from("row,flops,flops_ratio,accuracy,latency_ms,power_mw\n");
    let _ = writeln!(
        text,
        "model: depth {} tokens {} width {} heads {} classes {}",
        m.depth,
        m.token_count(),
        m.embed_dim,
        m.heads,
        m.class_count
    );
    if let Some(t) = &tr {
        let _ = writeln!(text, "backbone: val accuracy {:.4} (init {:.4})", t.val_accuracy, t.init_accuracy);
    }
    let _ = writeln!(text, "\n{:<18}{:>12}{:>8}{:>10}{:>12}{:>12}", "schedule", "flops", "ratio", "acc", "latency", "power");
    let mut row = |name: &str, f: Option<u64>, acc: Option<f64>, lat: Option<f64>, pw: Option<f64>| {
        let ratio = f.map(|f| f as f64 / base);
        let _ = writeln!(
            text,
            "{:<18}{:>12}{:>8}{:>10}{:>12}{:>12}",
            name,
            f.map_or_else(|| "-".into(), |f| f.to_string()),
            fmt_opt(ratio, 3),
            fmt_opt(acc, 4),
            fmt_opt(lat, 3),
            fmt_opt(pw, 2)
        );
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{}",
            f.map_or_else(String::new, |f| f.to_string()),
            ratio.map_or_else(String::new, |x| x.to_string()),
            acc.map_or_else(String::new, |x| x.to_string()),
            lat.map_or_else(String::new, |x| x.to_string()),
            pw.map_or_else(String::new, |x| x.to_string()),
        );
    };
    row("baseline", Some(ap.baseline_flops), Some(ap.baseline_accuracy), Some(ap.baseline_latency), Some(ap.baseline_power));
    row("searched", Some(ap.flops), Some(ap.accuracy), Some(ap.latency), Some(ap.power));
    if let Some(e) = &en {
        if let Some(b) = &e.best_under_target {
            row("random best", Some(b.flops), Some(b.accuracy), None, None);
        }
        row("random median", None, e.median_accuracy, None, None);
    }
    if let Some(f) = &ft {
        row("finetuned", Some(ap.flops), Some(f.after), Some(ap.latency), Some(ap.power));
    }

    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let _ = writeln!(text, "\nkept after pruning: {}", join(&sched.prune_kept));
    let _ = writeln!(text, "kept after merging: {}", join(&sched.merge_kept));
    let _ = writeln!(text, "tokens out:         {}", join(&ap.token_counts));
    let _ = writeln!(
        text,
        "measured MACs per image {} vs analytic {}: {}",
        ap.macs_per_image,
        ap.flops,
        if ap.macs_per_image == ap.flops { "equal" } else { "DIFFER" }
    );
    if let Some(t) = fl.target_flops {
        let _ = writeln!(text, "FLOPs target {t:.0}: achieved/target {:.4}", ap.flops as f64 / t);
    }
    let _ = writeln!(text, "search trace: {trace_rows} steps in {TRACE}");
    if let Some(e) = &en {
        let _ = writeln!(
            text,
            "enumeration: {} of {} schedules{}, pareto front of {}",
            e.evaluated,
            e.requested,
            if e.partial { " (partial)" } else { "" },
            e.pareto.len()
        );
    }
    if let Some(h) = &hw {
        let _ = writeln!(
            text,
            "hardware: {} rounds, latency {:.3} ms (baseline {:.3}), power {:.2} mW (baseline {:.2})",
            h.rounds.len(),
            h.latency,
            h.baseline_latency,
            h.power,
            h.baseline_power
        );
        let _ = writeln!(text, "hardware config: {}", serde_json::to_string(&h.config)?);
    }
    if let Some(f) = &ft {
        let _ = writeln!(
            text,
            "finetune: {} epochs, accuracy {:.4} -> {:.4}, recovered {}",
            f.epochs,
            f.before,
            f.after,
            fmt_opt(f.recovered, 3)
        );
    }

    let reference = Overhead::new(196, 12);
    let o = &fl.overhead;
    let _ = writeln!(text, "\noverhead (N image tokens, L blocks):");
    let _ = writeln!(
        text,
        "  this model N={} L={}: 2NL = {} parameters, (N^2+5N)L/2 = {} FLOPs; {} rate logits learned",
        o.tokens, o.depth, o.parameters, o.flops, fl.rate_logits
    );
    let _ = writeln!(
        text,
        "  reference N=196 L=12: 2NL = {} parameters (4.7k), (N^2+5N)L/2 = {} FLOPs (0.24M): {}",
        reference.parameters,
        reference.flops,
        if reference.parameters == 4704 && reference.flops == 236_376 { "match" } else { "MISMATCH" }
    );
    for (name, ov) in [("overhead", o), ("overhead_reference", &reference)] {
        let _ = writeln!(csv, "{name}_parameters,{},,,,", ov.parameters);
        let _ = writeln!(csv, "{name}_flops,{},,,,", ov.flops);
    }

    std::fs::write(dir.join(REPORT), &text)?;
    std::fs::write(dir.join(REPORT_CSV), &csv)?;
    Ok(ReportSummary { text, csv })
}
