//! Subcommand implementations.
//!
//! Table formats (comma separated, one header line):
//!
//! - AP rows (`eval`, `diagnose/ap.csv`): `run,mode,AP50,AP55,...,AP95,AP`.
//! - Gap rows (`diagnose/gaps.csv`): `a,b,AP50,...,AP95,AP` holding `a - b`.
//! - Per-gap files `gap-*.csv`: `iou_threshold,delta(a - b)` with a final
//!   `mean` row.
//! - Histograms `hist-<run>-<mode>.csv`: `bin_low,bin_high,count`.
//! - Parameter table (`params`): `variant,backbone,cls_trunk,box_trunk,
//!   cls_predictor,box_predictor,total,extra_trunk_vs_baseline`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fscascade::checkpoint;
use fscascade::eval::{
    ap_sweep, confidence_histogram, evaluate, gap_report, group_detections, to_detections, APReport, GapReport,
    ImageResult, InferConfig, InferenceMode, ReportMeta,
};
use fscascade::geometry::{read_detection_dump, write_detection_dump};
use fscascade::model::{
    count_for_variant, CascadeModel, Component, ModelConfig, Variant, DEFAULT_DELTA_STDS, DEFAULT_STAGE_THRESHOLDS,
};
use fscascade::synth::{load_dataset, save_dataset, Dataset, SceneRecord, SceneSpec, MANIFEST_FILE};
use fscascade::training::TrainConfig;
use serde::Deserialize;

use crate::run::{
    manifest_hash, unique_run_id, RunConfig, RunRecord, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};
use crate::{usage, DiagnoseArgs, EvalArgs, Failure, GenDataArgs, ParamsArgs, TrainArgs, OUT_ENV};

type CmdResult = std::result::Result<(), Failure>;

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("fscascade-out"), PathBuf::from)
}

fn require_dataset(dir: &Path) -> std::result::Result<Dataset, Failure> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(usage(format!("{} is not a dataset directory (no {MANIFEST_FILE})", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

pub fn gen_data(a: &GenDataArgs) -> CmdResult {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        objects_per_image: (a.objects_min, a.objects_max),
        size_range: (a.size_min, a.size_max),
        max_gt_iou: a.max_gt_iou,
        noise: a.noise,
        seed: a.seed,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("data"));
    if out.join(MANIFEST_FILE).exists() {
        return Err(usage(format!("{} already holds a dataset; choose another --out", out.display())));
    }
    let ds = Dataset::generate(&spec, a.train, a.eval)?;
    save_dataset(&ds, &out)?;
    println!("wrote {} scenes ({} train, {} eval) to {}", ds.records.len(), a.train, a.eval, out.display());
    Ok(())
}

/// Run config file: both tables optional, each complete when present (the
/// `config.toml` of an earlier run qualifies).
#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    model: Option<ModelConfig>,
    training: Option<TrainConfig>,
}

fn read_config_file(path: &Path) -> std::result::Result<ConfigFile, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn set_stages(cfg: &mut ModelConfig, stages: usize) {
    if cfg.num_stages() != stages {
        cfg.stage_iou_thresholds = DEFAULT_STAGE_THRESHOLDS[..stages].to_vec();
        cfg.delta_stds = DEFAULT_DELTA_STDS[..stages].to_vec();
    }
}

fn num_classes(ds: &Dataset) -> usize {
    match &ds.spec {
        Some(spec) => spec.num_classes(),
        None => ds.records.iter().flat_map(|r| &r.gts).map(|g| g.class_id).max().unwrap_or(1),
    }
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let ds = require_dataset(&a.data)?;
    let train_scenes = ds.train();
    let Some(first) = train_scenes.first() else {
        return Err(usage(format!("{} has no training scenes", a.data.display())));
    };
    let file = match &a.config {
        Some(p) => read_config_file(p)?,
        None => ConfigFile::default(),
    };
    let stages = a.stages as usize;
    let mut model_cfg = file.model.unwrap_or_else(|| ModelConfig::desk(a.variant, stages));
    model_cfg.variant = a.variant;
    set_stages(&mut model_cfg, stages);
    model_cfg.num_classes = num_classes(&ds);
    model_cfg.backbone.height = first.height();
    model_cfg.backbone.width = first.width();
    if let Some(c) = a.channels {
        model_cfg.backbone.channels = c;
    }
    if let Some(h) = a.hidden {
        model_cfg.hidden_width = h;
    }
    let mut train_cfg = file.training.unwrap_or_default();
    train_cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        train_cfg.base_lr = lr;
    }
    if let Some(r) = a.rois {
        train_cfg.rois_per_image = r;
    }
    if let Some(d) = &a.decay_epochs {
        train_cfg.decay_epochs = d.clone();
    }
    train_cfg.stage_loss_weights.truncate(stages);
    model_cfg.validate()?;
    train_cfg.validate(stages)?;

    let out = a.out.clone().unwrap_or_else(|| out_root().join("runs"));
    let run_id = match &a.run_id {
        Some(id) if out.join(id).exists() => return Err(usage(format!("run {id} already exists in {}", out.display()))),
        Some(id) => id.clone(),
        None => unique_run_id(&out, &format!("{}-{}s-seed{}", a.variant, stages, a.seed)),
    };
    let run_dir = out.join(&run_id);
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let config = RunConfig {
        model: model_cfg.clone(),
        training: train_cfg.clone(),
    };
    fs::write(run_dir.join(CONFIG_FILE), toml::to_string(&config).context("serializing config")?)
        .with_context(|| format!("writing {}", run_dir.join(CONFIG_FILE).display()))?;

    let mut model = CascadeModel::new(model_cfg, a.seed)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut write_error = None;
    fscascade::training::train(&mut model, &train_scenes, &train_cfg, |rec| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  cls {:.3?}  box {:.3?}  {:.1}s",
            rec.epoch, rec.lr, rec.total_loss, rec.cls_loss, rec.box_loss, rec.wall_seconds
        );
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(anyhow::Error::new(e).context(format!("writing {}", metrics_path.display())).into());
    }
    checkpoint::save(&model.store, &run_dir.join(CHECKPOINT_FILE))?;
    RunRecord {
        run_id,
        config,
        checkpoint: CHECKPOINT_FILE.into(),
        metric_log: METRICS_FILE.into(),
        data_dir: a.data.clone(),
        dataset_manifest_sha1: manifest_hash(&a.data)?,
    }
    .save(&run_dir)?;
    println!("{}", run_dir.display());
    Ok(())
}

struct LoadedRun {
    dir: PathBuf,
    record: RunRecord,
    model: CascadeModel,
}

fn load_run(dir: &Path, data: &Path) -> std::result::Result<LoadedRun, Failure> {
    if !dir.join(crate::run::RUN_FILE).is_file() {
        return Err(usage(format!("{} is not a run directory", dir.display())));
    }
    let record = RunRecord::load(dir)?;
    let store = checkpoint::load(&dir.join(&record.checkpoint))?;
    let model = CascadeModel::from_store(record.config.model.clone(), store)?;
    if manifest_hash(data)? != record.dataset_manifest_sha1 {
        eprintln!(
            "warning: {} was trained on a different dataset manifest than {}",
            record.run_id,
            data.display()
        );
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        record,
        model,
    })
}

fn check_mode(run: &LoadedRun, mode: InferenceMode) -> CmdResult {
    if let InferenceMode::Stage(k) = mode {
        let n = run.model.num_stages();
        if k == 0 || k > n {
            return Err(usage(format!("mode {mode} is out of range for {} ({n} stages)", run.record.run_id)));
        }
    }
    Ok(())
}

fn eval_scenes<'a>(ds: &'a Dataset, data: &Path) -> std::result::Result<Vec<&'a SceneRecord>, Failure> {
    let scenes = ds.eval();
    if scenes.is_empty() {
        return Err(usage(format!("{} has no evaluation scenes", data.display())));
    }
    Ok(scenes)
}

fn threshold_header(thresholds: &[f64]) -> Vec<String> {
    thresholds.iter().map(|t| format!("AP{}", (t * 100.0).round())).collect()
}

fn ap_table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, &'a APReport)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header_done = false;
    for (run, mode, r) in rows {
        if !header_done {
            let mut h = vec!["run".to_string(), "mode".to_string()];
            h.extend(threshold_header(&r.thresholds));
            h.push("AP".into());
            w.write_record(&h)?;
            header_done = true;
        }
        let mut row = vec![run.to_string(), mode.to_string()];
        row.extend(r.ap.iter().map(|v| format!("{v:.6}")));
        row.push(format!("{:.6}", r.mean_ap));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn gap_table(gaps: &[GapReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = gaps.first() {
        let mut h = vec!["a".to_string(), "b".to_string()];
        h.extend(threshold_header(&first.thresholds));
        h.push("AP".into());
        w.write_record(&h)?;
    }
    for g in gaps {
        let mut row = vec![g.label_a.clone(), g.label_b.clone()];
        row.extend(g.delta.iter().map(|v| format!("{v:.6}")));
        row.push(format!("{:.6}", g.mean_delta));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn warn_undefined(label: &str, r: &APReport) {
    if !r.undefined_classes.is_empty() {
        eprintln!("note: {label}: classes {:?} have no ground truth and are excluded", r.undefined_classes);
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let ds = require_dataset(&a.data)?;
    let scenes = eval_scenes(&ds, &a.data)?;
    let mode_label = a.mode.to_string();
    let (label, report, out) = if let Some(dump) = &a.detections {
        let dets = read_detection_dump(dump)?;
        let images = group_detections(&dets, &scenes);
        let report = ap_sweep(&images, ReportMeta::default())?;
        (dump.display().to_string(), report, a.out.clone())
    } else {
        let run = load_run(a.run.as_deref().expect("clap requires --run"), &a.data)?;
        check_mode(&run, a.mode)?;
        let meta = ReportMeta {
            variant: Some(run.model.variant().to_string()),
            mode: Some(mode_label.clone()),
            seed: Some(run.record.config.training.seed),
        };
        let (report, images) = evaluate(&run.model, &scenes, a.mode, &InferConfig::default(), meta)?;
        write_detection_dump(&run.dir.join(format!("detections-{mode_label}.csv")), &to_detections(&images))?;
        let out = a.out.clone().unwrap_or_else(|| run.dir.join(format!("eval-{mode_label}.csv")));
        (run.record.run_id.clone(), report, Some(out))
    };
    warn_undefined(&label, &report);
    let table = ap_table([(label.as_str(), mode_label.as_str(), &report)])?;
    print!("{table}");
    if let Some(out) = out {
        write_file(&out, &table)?;
    }
    Ok(())
}

fn modes_for(stages: usize) -> Vec<InferenceMode> {
    let mut modes: Vec<InferenceMode> = (1..=stages).map(InferenceMode::Stage).collect();
    if stages > 1 {
        modes.push(InferenceMode::Ensemble);
    }
    modes
}

struct Evaluated {
    label: String,
    stages: usize,
    reports: Vec<(InferenceMode, APReport, Vec<ImageResult>)>,
}

impl Evaluated {
    fn report(&self, mode: InferenceMode) -> &APReport {
        &self.reports.iter().find(|r| r.0 == mode).expect("mode evaluated").1
    }
}

pub fn diagnose(a: &DiagnoseArgs) -> CmdResult {
    if !(0.0 <= a.iou_low && a.iou_low < a.iou_high && a.iou_high <= 1.0) || a.bins == 0 {
        return Err(usage("need 0 <= --iou-low < --iou-high <= 1 and --bins > 0"));
    }
    let ds = require_dataset(&a.data)?;
    let scenes = eval_scenes(&ds, &a.data)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("diagnose"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut seen = HashSet::new();
    let mut runs = Vec::new();
    for (i, dir) in a.runs.iter().enumerate() {
        let run = load_run(dir, &a.data)?;
        let mut label = run.record.run_id.clone();
        if !seen.insert(label.clone()) {
            label = format!("{label}#{i}");
            seen.insert(label.clone());
        }
        let stages = run.model.num_stages();
        let mut reports = Vec::new();
        for mode in modes_for(stages) {
            let meta = ReportMeta {
                variant: Some(run.model.variant().to_string()),
                mode: Some(mode.to_string()),
                seed: Some(run.record.config.training.seed),
            };
            let (r, images) = evaluate(&run.model, &scenes, mode, &InferConfig::default(), meta)?;
            warn_undefined(&label, &r);
            reports.push((mode, r, images));
        }
        runs.push(Evaluated { label, stages, reports });
    }

    let rows: Vec<(String, String, &APReport)> = runs
        .iter()
        .flat_map(|e| e.reports.iter().map(|(m, r, _)| (e.label.clone(), m.to_string(), r)))
        .collect();
    let table = ap_table(rows.iter().map(|(l, m, r)| (l.as_str(), m.as_str(), *r)))?;
    write_file(&out.join("ap.csv"), &table)?;
    print!("{table}");

    for e in &runs {
        for (mode, _, images) in &e.reports {
            let h = confidence_histogram(images, a.iou_low, a.iou_high, a.bins)?;
            write_file(&out.join(format!("hist-{}-{mode}.csv", e.label)), &h.to_csv())?;
        }
    }

    let mut gaps = Vec::new();
    for e in &runs {
        let last = InferenceMode::Stage(e.stages);
        let la = format!("{}:{last}", e.label);
        if e.stages > 1 {
            let prev = InferenceMode::Stage(e.stages - 1);
            gaps.push(gap_report(e.report(last), e.report(prev), &la, &format!("{}:{prev}", e.label))?);
            let ens = InferenceMode::Ensemble;
            gaps.push(gap_report(e.report(last), e.report(ens), &la, &format!("{}:{ens}", e.label))?);
        }
    }
    if let Some((reference, rest)) = runs.split_first() {
        let ref_mode = InferenceMode::Stage(reference.stages);
        for e in rest {
            let last = InferenceMode::Stage(e.stages);
            gaps.push(gap_report(
                e.report(last),
                reference.report(ref_mode),
                &format!("{}:{last}", e.label),
                &format!("{}:{ref_mode}", reference.label),
            )?);
        }
    }
    for g in &gaps {
        let name = format!("gap-{}-vs-{}.csv", g.label_a, g.label_b).replace(':', "-");
        write_file(&out.join(name), &g.to_csv())?;
    }
    write_file(&out.join("gaps.csv"), &gap_table(&gaps)?)?;
    eprintln!("wrote AP, gap and histogram tables to {}", out.display());
    Ok(())
}

fn params_config(path: &Path) -> std::result::Result<ModelConfig, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(cfg) = toml::from_str::<ModelConfig>(&text) {
        return Ok(cfg);
    }
    read_config_file(path)?
        .model
        .ok_or_else(|| usage(format!("{}: no model configuration found", path.display())))
}

pub fn params(a: &ParamsArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => params_config(p)?,
        None => ModelConfig::desk(Variant::Baseline, 3),
    };
    if let Some(c) = a.channels {
        cfg.backbone.channels = c;
    }
    if let Some(h) = a.hidden {
        cfg.hidden_width = h;
    }
    if let Some(s) = a.stages {
        set_stages(&mut cfg, s as usize);
    }
    cfg.validate()?;
    let base = count_for_variant(&cfg, Variant::Baseline);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string()];
    header.extend(Component::ALL.iter().map(|c| c.to_string()));
    header.extend(["total".to_string(), "extra_trunk_vs_baseline".to_string()]);
    w.write_record(&header).context("formatting table")?;
    for v in Variant::ALL {
        let c = count_for_variant(&cfg, v);
        let mut row = vec![v.to_string()];
        row.extend(Component::ALL.iter().map(|&k| c.get(k).to_string()));
        row.push(c.total().to_string());
        row.push((c.trunk_total() as i64 - base.trunk_total() as i64).to_string());
        w.write_record(&row).context("formatting table")?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    print!("{}", String::from_utf8(bytes).context("table is utf-8")?);
    Ok(())
}
