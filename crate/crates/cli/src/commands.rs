use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use protoadapt_core::checks::{gradcheck_suite, CheckedLoss};
use protoadapt_core::eval::{coco_thresholds, run_stage};
use protoadapt_core::metrics::{icv, icv_level_with, parse_survey, DomainGapReport};
use protoadapt_core::pack::ValidationReport;
use protoadapt_core::{
    evaluate_detection, finetune as train, load_feature_pack, run_ablation, sample_episode, synth_pack,
    AdaptationParams, Episode, EpisodeSpec, EvalReport, FeaturePack, FinetuneConfig, Module, Stage, SynthConfig, Tensor,
};

use crate::manifest::RunManifest;
use crate::table::{reports_csv, reports_table};
use crate::{ConfigArgs, EpisodeArgs, WORKERS_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] protoadapt_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn thresholds(spec: &str) -> Result<Vec<f64>> {
    if spec == "coco" {
        return Ok(coco_thresholds());
    }
    spec.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| CliError::Invalid(format!("invalid IoU threshold {t:?}")))
        })
        .collect()
}

/// Defaults, then the `--config` file, then individual flags.
fn resolve_config(args: &ConfigArgs, episode: &EpisodeArgs) -> Result<FinetuneConfig> {
    let mut config = match &args.config {
        Some(path) => read_json::<FinetuneConfig>(path)?,
        None => FinetuneConfig::default(),
    };
    let explicit_modules = args.config.is_some() || args.modules.is_some();
    config.seed = episode.seed;
    if let Some(n) = episode.n_bg {
        config.n_bg = n;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if args.epochs.is_some() {
        config.epochs = args.epochs;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.tau_proto {
        config.tau_proto = v;
    }
    if let Some(v) = args.tau_domain {
        config.tau_domain = v;
    }
    if let Some(v) = args.cls_temperature {
        config.cls_temperature = v;
    }
    if let Some(names) = &args.modules {
        let modules = names.iter().map(|m| m.parse::<Module>()).collect::<std::result::Result<Vec<_>, _>>()?;
        config = config.with_modules(modules);
    }
    // Without an explicit module set, the default configuration adapts to one-class episodes.
    if !explicit_modules {
        config = config.resolved_for(episode.n_way);
    }
    config.validate(episode.n_way)?;
    Ok(config)
}

fn episode_spec(args: &EpisodeArgs, n_bg: usize, seed: u64) -> EpisodeSpec {
    EpisodeSpec {
        classes: args.classes.clone(),
        ..EpisodeSpec::new(args.n_way, args.k_shot, n_bg, seed)
    }
}

fn load_episode(pack: &FeaturePack, args: &EpisodeArgs, n_bg: usize, seed: u64) -> Result<Episode> {
    Ok(sample_episode(pack, &episode_spec(args, n_bg, seed))?)
}

fn config_json(config: &FinetuneConfig, k_shot: usize) -> serde_json::Value {
    let mut v = serde_json::to_value(config).expect("config serializes");
    v["epochs"] = config.epochs_for(k_shot).into();
    v
}

pub fn pack_validate(path: &Path, json: bool) -> Result<u8> {
    let pack = load_feature_pack(path)?;
    let report = ValidationReport::new(&pack);
    if json {
        print!("{}", to_json(&report));
        return Ok(0);
    }
    println!("valid pack {:?}", report.dataset_id);
    println!(
        "  dim {}, {} classes, {} object records, {} background records, {} images",
        report.dim, report.classes, report.object_records, report.background_records, report.images
    );
    for (name, count) in &report.per_class {
        println!("  {name}: {count}");
    }
    if report.no_background {
        println!("  flagged no-background");
    }
    if report.classes < 2 {
        println!("  single class: ICV not applicable");
    }
    Ok(0)
}

#[derive(Serialize)]
struct EpisodeDump<'a> {
    spec: &'a EpisodeSpec,
    dataset_id: &'a str,
    fingerprint: String,
    classes: &'a [usize],
    class_names: &'a [String],
    support: Vec<Vec<usize>>,
    background: Vec<usize>,
    query: Vec<(&'a str, Vec<usize>)>,
}

pub fn episode_sample(args: &EpisodeArgs, out: Option<&Path>) -> Result<u8> {
    let pack = load_feature_pack(&args.pack)?;
    let n_bg = args.n_bg.unwrap_or(protoadapt_core::finetune::DEFAULT_N_BG);
    let ep = load_episode(&pack, args, n_bg, args.seed)?;
    let dump = EpisodeDump {
        spec: &ep.spec,
        dataset_id: &ep.dataset_id,
        fingerprint: format!("{:016x}", ep.fingerprint()),
        classes: &ep.classes,
        class_names: &ep.class_names,
        support: ep.support.iter().map(|c| c.iter().map(|i| i.id).collect()).collect(),
        background: ep.background_ids(),
        query: ep
            .query
            .iter()
            .map(|q| (q.image_id.as_str(), q.instances.iter().map(|i| i.id).collect()))
            .collect(),
    };
    let text = to_json(&dump);
    match out {
        Some(path) => write_file(path, text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

pub fn finetune(episode: &EpisodeArgs, config: &ConfigArgs, out: &Path, argv: &[String]) -> Result<u8> {
    let config = resolve_config(config, episode)?;
    let pack = load_feature_pack(&episode.pack)?;
    let ep = load_episode(&pack, episode, config.n_bg, episode.seed)?;
    let (params, log) = train(&ep, &config)?;

    fs::create_dir_all(out).map_err(io_err(out))?;
    let checkpoint = out.join("checkpoint.bin");
    write_file(&checkpoint, params.checkpoint_bytes()?)?;
    write_file(&out.join("train_log.jsonl"), log.to_json_lines())?;
    RunManifest::new(argv, config_json(&config, ep.k_shot()), vec![config.seed])
        .with_input(&episode.pack)
        .map_err(io_err(&episode.pack))?
        .write(&out.join("manifest.json"))
        .map_err(io_err(out))?;

    let totals = log.totals();
    println!(
        "finetuned {}-way {}-shot episode {:016x}: {} epochs, loss {:.6} -> {:.6}",
        ep.n_way(),
        ep.k_shot(),
        ep.fingerprint(),
        totals.len(),
        totals.first().copied().unwrap_or(f64::NAN),
        totals.last().copied().unwrap_or(f64::NAN),
    );
    println!("checkpoint written to {}", checkpoint.display());
    Ok(0)
}

pub struct EvalRequest<'a> {
    pub episode: &'a EpisodeArgs,
    pub config: &'a ConfigArgs,
    pub checkpoint: Option<&'a Path>,
    pub stage: &'a str,
    pub episodes: usize,
    pub iou: &'a str,
    pub json: bool,
    pub out: Option<&'a Path>,
    pub argv: &'a [String],
}

fn emit_reports(reports: &[EvalReport], json: bool) {
    if json {
        print!("{}", to_json(&reports));
    } else {
        print!("{}", reports_table(reports));
    }
}

fn save_reports(out: &Path, reports: &[EvalReport], manifest: RunManifest) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("reports.json"), to_json(&reports))?;
    manifest.write(&out.join("manifest.json")).map_err(io_err(out))
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(workers.max(1)) {
        let results: Vec<R> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|item| s.spawn(|| f(item))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        out.extend(results);
    }
    out
}

pub fn eval(req: EvalRequest<'_>) -> Result<u8> {
    let thresholds = thresholds(req.iou)?;
    let config = resolve_config(req.config, req.episode)?;
    let pack = load_feature_pack(&req.episode.pack)?;
    let seeds: Vec<u64> = match req.checkpoint {
        Some(_) => vec![req.episode.seed],
        None => (0..req.episodes as u64).map(|i| req.episode.seed + i).collect(),
    };
    if seeds.is_empty() {
        return Err(CliError::Invalid("--episodes must be at least 1".into()));
    }

    let mut manifest = RunManifest::new(req.argv, config_json(&config, req.episode.k_shot), seeds.clone());
    manifest = manifest.with_input(&req.episode.pack).map_err(io_err(&req.episode.pack))?;

    let reports = match req.checkpoint {
        Some(path) => {
            manifest = manifest.with_input(path).map_err(io_err(path))?;
            let params = AdaptationParams::load_checkpoint(path)?;
            let ep = load_episode(&pack, req.episode, params.layout().n_bg, req.episode.seed)?;
            if params.class_names != ep.class_names {
                return Err(CliError::Invalid(format!(
                    "checkpoint classes {:?} do not match episode classes {:?}",
                    params.class_names, ep.class_names
                )));
            }
            let mut report = evaluate_detection(&params, &ep, &thresholds)?;
            report.stage = "checkpoint".into();
            vec![report]
        }
        None => {
            let stage: Stage = req.stage.parse()?;
            let results = parallel_map(&seeds, workers(), |&seed| -> Result<EvalReport> {
                let ep = load_episode(&pack, req.episode, config.n_bg, seed)?;
                let base = FinetuneConfig { seed, ..config.clone() };
                Ok(run_stage(&ep, &base, stage, &thresholds)?.1)
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
    };

    emit_reports(&reports, req.json);
    if reports.len() > 1 && !req.json {
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        println!(
            "mean over {} episodes: accuracy {:.4}, mAP {:.4}",
            reports.len(),
            mean(|r| r.accuracy),
            mean(|r| r.map)
        );
    }
    if let Some(out) = req.out {
        save_reports(out, &reports, manifest)?;
    }
    Ok(0)
}

pub struct AblateRequest<'a> {
    pub episode: &'a EpisodeArgs,
    pub config: &'a ConfigArgs,
    pub stages: &'a [String],
    pub iou: &'a str,
    pub json: bool,
    pub csv: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub argv: &'a [String],
}

pub fn ablate(req: AblateRequest<'_>) -> Result<u8> {
    let thresholds = thresholds(req.iou)?;
    let stages = req.stages.iter().map(|s| s.parse::<Stage>()).collect::<std::result::Result<Vec<_>, _>>()?;
    if stages.is_empty() {
        return Err(CliError::Invalid("no stages given".into()));
    }
    let config = resolve_config(req.config, req.episode)?;
    let pack = load_feature_pack(&req.episode.pack)?;
    let ep = load_episode(&pack, req.episode, config.n_bg, req.episode.seed)?;
    let reports = run_ablation(&ep, &config, &stages, &thresholds, workers())?;

    emit_reports(&reports, req.json);
    if let Some(path) = req.csv {
        write_file(path, reports_csv(&reports))?;
    }
    if let Some(out) = req.out {
        let manifest = RunManifest::new(req.argv, config_json(&config, ep.k_shot()), vec![config.seed])
            .with_input(&req.episode.pack)
            .map_err(io_err(&req.episode.pack))?;
        save_reports(out, &reports, manifest)?;
    }
    Ok(0)
}

/// One row per class, in class order. Text-feature packs hold exactly one object record per class.
fn class_text_matrix(pack: &FeaturePack) -> Result<Tensor> {
    let mut data = Vec::with_capacity(pack.n_classes() * pack.dim);
    for c in 0..pack.n_classes() {
        let ids = pack.class_ids(c);
        if ids.len() != 1 {
            return Err(CliError::Invalid(format!(
                "text-feature pack needs one record per class; class {:?} has {}",
                pack.class_names[c],
                ids.len()
            )));
        }
        data.extend(pack.records[ids[0]].raw().iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::new(pack.n_classes(), pack.dim, data)?)
}

pub fn metrics_icv(path: &Path, low: f64, high: f64, json: bool) -> Result<u8> {
    let pack = load_feature_pack(path)?;
    let features = class_text_matrix(&pack)?;
    let mut report = DomainGapReport::new(pack.dataset_id.clone());
    report.icv_value = icv(&features);
    report.icv_level = report.icv_value.map(|v| icv_level_with(v, low, high)).transpose()?;
    if json {
        print!("{}", to_json(&report));
        return Ok(0);
    }
    match (report.icv_value, report.icv_level) {
        (Some(v), Some(level)) => println!("{v:.3} {level}"),
        _ => println!("ICV not applicable: {} class", pack.n_classes()),
    }
    Ok(0)
}

pub fn metrics_ib(path: &Path, json: bool) -> Result<u8> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let entries = parse_survey(&text)?;
    let reports = entries
        .iter()
        .map(|e| DomainGapReport::new(e.dataset_id.clone()).with_survey(e))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if json {
        print!("{}", to_json(&reports));
        return Ok(0);
    }
    for r in &reports {
        let (v, level) = (r.ib_value.expect("survey sets ib"), r.ib_level.expect("survey sets ib"));
        if r.dataset_id.is_empty() {
            println!("{v:.3} {level}");
        } else {
            println!("{} {v:.3} {level}", r.dataset_id);
        }
    }
    Ok(0)
}

pub fn gradcheck(all: bool, names: &[String], fixtures: usize, eps: f64, tolerance: f64, json: bool) -> Result<u8> {
    let losses = if all {
        CheckedLoss::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse::<CheckedLoss>()).collect::<std::result::Result<Vec<_>, _>>()?
    };
    let reports = gradcheck_suite(&losses, fixtures, eps, tolerance)?;
    if json {
        print!("{}", to_json(&reports));
    } else {
        for r in &reports {
            println!(
                "{:<10} max rel err {:.3e} over {} fixtures  {}",
                r.loss.name(),
                r.max_error,
                r.fixtures,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

pub struct SynthRequest<'a> {
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub backgrounds: Option<usize>,
    pub dim: Option<usize>,
    pub argv: &'a [String],
}

pub fn synth(req: SynthRequest<'_>) -> Result<u8> {
    let mut cfg = match req.config {
        Some(path) => read_json::<SynthConfig>(path)?,
        None => SynthConfig::default(),
    };
    cfg.seed = req.seed.unwrap_or(cfg.seed);
    cfg.n_classes = req.classes.unwrap_or(cfg.n_classes);
    cfg.instances_per_class = req.per_class.unwrap_or(cfg.instances_per_class);
    cfg.n_background = req.backgrounds.unwrap_or(cfg.n_background);
    cfg.dim = req.dim.unwrap_or(cfg.dim);
    let pack = synth_pack(&cfg)?;
    pack.save(req.out)?;

    let mut manifest_path = req.out.as_os_str().to_owned();
    manifest_path.push(".manifest.json");
    let config = serde_json::to_value(&cfg).expect("synth config serializes");
    RunManifest::new(req.argv, config, vec![cfg.seed])
        .write(Path::new(&manifest_path))
        .map_err(io_err(req.out))?;
    println!(
        "wrote {}: {} classes x {} instances, {} backgrounds, dim {}",
        req.out.display(),
        cfg.n_classes,
        cfg.instances_per_class,
        cfg.n_background,
        cfg.dim
    );
    Ok(0)
}
