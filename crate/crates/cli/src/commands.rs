use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use dxformer::attention::CrossQvMode;
use dxformer::data::{
    feature_ids, feature_path, fold_ids, load_checkpoint, load_dataset_from, read_feature_file,
    read_labels, read_mapping, read_split, synth_generate, write_dataset, write_labels,
    ClassMapping, DataPaths, Dataset, FoldSubset, SynthSpec, FEATURES_DIR, LABELS_DIR,
    MAPPING_FILE,
};
use dxformer::gradcheck::suite::{run_suite, SuiteConfig};
use dxformer::metrics::MetricsAccumulator;
use dxformer::model::{predict, ModelConfig};
use dxformer::training::{evaluate_params, TrainConfig, Trainer};

use crate::schema::{keys_for, Command, RunConfig};

pub type CmdResult = Result<(), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> CmdResult {
    writeln!(out, "{line}").map_err(|e| format!("writing output: {e}"))
}

fn data_root(rc: &RunConfig) -> Option<PathBuf> {
    rc.path("data_root")
}

/// A path key, or its standard place under `data_root`.
fn located(rc: &RunConfig, key: &str, under_root: &str) -> Result<PathBuf, String> {
    match (rc.path(key), data_root(rc)) {
        (Some(p), _) => Ok(p),
        (None, Some(root)) => Ok(root.join(under_root)),
        (None, None) => Err(format!("set {key} or data_root")),
    }
}

fn data_paths(rc: &RunConfig, with_labels: bool) -> Result<DataPaths, String> {
    Ok(DataPaths {
        features: located(rc, "features_dir", FEATURES_DIR)?,
        labels: if with_labels {
            located(rc, "labels_dir", LABELS_DIR)?
        } else {
            PathBuf::new()
        },
        mapping: located(rc, "mapping", MAPPING_FILE)?,
    })
}

/// Video ids for one side of the configured split; `None` means every video.
fn selected_ids(rc: &RunConfig, side: FoldSubset) -> Result<Option<Vec<String>>, String> {
    let fold: usize = rc.get_or("fold", 0)?;
    match (rc.path("split"), fold) {
        (Some(_), f) if f > 0 => Err("set split or fold, not both".into()),
        (Some(split), _) => read_split(split).map(Some).map_err(err),
        (None, 0) => Ok(None),
        (None, f) => {
            let root = data_root(rc).ok_or("fold needs data_root")?;
            fold_ids(root, f, side).map(Some).map_err(err)
        }
    }
}

fn load(rc: &RunConfig, side: FoldSubset) -> Result<Dataset, String> {
    let ids = selected_ids(rc, side)?;
    let data = load_dataset_from(&data_paths(rc, true)?, ids.as_deref()).map_err(err)?;
    if data.is_empty() {
        return Err("the selected split has no videos".into());
    }
    Ok(data)
}

fn ignore_id(rc: &RunConfig, mapping: &ClassMapping) -> Result<Option<usize>, String> {
    match rc.raw("ignore_class") {
        None => Ok(None),
        Some(name) => mapping
            .id(name)
            .map(Some)
            .ok_or_else(|| format!("ignore_class {name:?} is not in the mapping")),
    }
}

pub fn synth(rc: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_videos: rc.get_or("num_videos", d.num_videos)?,
        num_classes: rc.get_or("num_classes", d.num_classes)?,
        input_dim: rc.get_or("input_dim", d.input_dim)?,
        min_frames: rc.get_or("min_frames", d.min_frames)?,
        max_frames: rc.get_or("max_frames", d.max_frames)?,
        mean_duration: rc.get_or("mean_duration", d.mean_duration)?,
        signal: rc.get_or("signal", d.signal)?,
        noise: rc.get_or("noise", d.noise)?,
        folds: rc.get_or("folds", d.folds)?,
        seed: rc.get_or("seed", d.seed)?,
    };
    let dir = rc.require_path("out")?;
    let data = synth_generate(&spec).map_err(err)?;
    write_dataset(&dir, &data.dataset, &data.folds).map_err(err)?;
    let frames: usize = data.dataset.samples.iter().map(|s| s.frames()).sum();
    emit(
        out,
        format_args!(
            "videos={} classes={} input_dim={} frames={} folds={} out={}",
            data.dataset.len(),
            spec.num_classes,
            spec.input_dim,
            frames,
            data.folds.len(),
            dir.display()
        ),
    )
}

fn model_config(rc: &RunConfig, data: &Dataset) -> Result<ModelConfig, String> {
    let d = data.input_dim().ok_or("dataset has no videos")?;
    let c = data.num_classes();
    let mut cfg = match rc.raw("preset") {
        Some("large") => ModelConfig::large(d, c),
        _ => ModelConfig::small(d, c),
    };
    if let Some(f) = rc.get("model_dim")? {
        cfg = cfg.with_model_dim(f);
    }
    cfg.blocks_per_stage = rc.get_or("blocks_per_stage", cfg.blocks_per_stage)?;
    cfg.num_decoders = rc.get_or("num_decoders", cfg.num_decoders)?;
    cfg.attn_dim = rc.get_or("attn_dim", cfg.attn_dim)?;
    cfg.cross_qv_mode = rc
        .require::<String>("cross_qv_mode")?
        .parse::<CrossQvMode>()
        .map_err(err)?;
    cfg.cross_connections = rc.require("cross_connections")?;
    cfg.seed = rc.require("seed")?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn train_config(rc: &RunConfig) -> Result<TrainConfig, String> {
    let mut t = match rc.raw("preset") {
        Some("large") => TrainConfig::large(),
        _ => TrainConfig::small(),
    };
    t.learning_rate = rc.get_or("learning_rate", t.learning_rate)?;
    t.batch_size = rc.get_or("batch_size", t.batch_size)?;
    t.epochs = rc.require("epochs")?;
    t.max_steps = rc.require("max_steps")?;
    t.loss.lambda = rc.require("lambda_smooth")?;
    t.loss.tau = rc.require("tau_clip")?;
    t.dropout = rc.require("dropout")?;
    t.seed = rc.require("seed")?;
    t.checkpoint_every = rc.require("checkpoint_every")?;
    t.workers = rc.require("workers")?;
    t.validate().map_err(err)?;
    Ok(t)
}

fn checkpoint_path(rc: &RunConfig) -> Result<PathBuf, String> {
    match (rc.path("checkpoint"), rc.path("out")) {
        (Some(p), _) => Ok(p),
        (None, Some(dir)) => Ok(dir.join("model.ckpt")),
        (None, None) => Err("set checkpoint or out".into()),
    }
}

/// Every train key with its resolved value, for the run directory.
fn resolved_config(rc: &RunConfig) -> String {
    keys_for(Command::Train)
        .filter(|k| k.name != "timing")
        .filter_map(|k| rc.raw(k.name).map(|v| format!("{} = {v}\n", k.name)))
        .collect()
}

pub fn train(rc: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let data = load(rc, FoldSubset::Train)?;
    let tc = train_config(rc)?;
    let ckpt_path = checkpoint_path(rc)?;
    let mut trainer = if rc.require::<bool>("resume")? {
        let ckpt = load_checkpoint(&ckpt_path).map_err(err)?;
        Trainer::from_checkpoint(ckpt, tc).map_err(err)?
    } else {
        Trainer::new(model_config(rc, &data)?, tc).map_err(err)?
    };
    if let Some(dir) = rc.path("out") {
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let conf = dir.join("train.conf");
        std::fs::write(&conf, resolved_config(rc))
            .map_err(|e| format!("{}: {e}", conf.display()))?;
    }
    let mut write_err = None;
    trainer
        .fit(&data, Some(&ckpt_path), |rec| {
            if let Err(e) = emit(out, rec) {
                write_err.get_or_insert(e);
            }
        })
        .map_err(err)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    emit(
        out,
        format_args!(
            "checkpoint={} epochs={} steps={}",
            ckpt_path.display(),
            trainer.epoch(),
            trainer.step()
        ),
    )
}

pub fn predict_cmd(rc: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let ckpt = load_checkpoint(rc.require_path("checkpoint")?).map_err(err)?;
    let paths = data_paths(rc, false)?;
    let mapping = read_mapping(&paths.mapping).map_err(err)?;
    if mapping.len() != ckpt.config.num_classes {
        return Err(format!(
            "mapping has {} classes but the checkpoint predicts {}",
            mapping.len(),
            ckpt.config.num_classes
        ));
    }
    let ids = match selected_ids(rc, FoldSubset::Test)? {
        Some(ids) => ids,
        None => feature_ids(&paths.features).map_err(err)?,
    };
    let dir = rc.require_path("out")?;
    for id in &ids {
        let features =
            read_feature_file(feature_path(&paths.features, id).map_err(err)?).map_err(err)?;
        let labels = predict(&ckpt.config, &ckpt.params, &features).map_err(err)?;
        write_labels(dir.join(format!("{id}.txt")), &labels, &mapping).map_err(err)?;
        emit(out, format_args!("video={id} frames={}", labels.len()))?;
    }
    emit(
        out,
        format_args!("predicted={} out={}", ids.len(), dir.display()),
    )
}

pub fn eval(rc: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let ckpt = load_checkpoint(rc.require_path("checkpoint")?).map_err(err)?;
    let data = load(rc, FoldSubset::Test)?;
    let ignore = ignore_id(rc, &data.mapping)?;
    let report = evaluate_params(&data, &ckpt.config, &ckpt.params, ignore).map_err(err)?;
    out.write_all(report.to_record().as_bytes())
        .map_err(|e| format!("writing output: {e}"))
}

fn label_files(dir: &Path) -> Result<Vec<String>, String> {
    let entries = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| format!("{}: {e}", dir.display()))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Class names seen in the files, sorted: a mapping for model-free scoring.
fn mapping_from_files(files: &[PathBuf]) -> Result<ClassMapping, String> {
    let mut names = BTreeSet::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| format!("{}: {e}", f.display()))?;
        names.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from),
        );
    }
    ClassMapping::new(names.into_iter().collect()).map_err(err)
}

pub fn metrics(rc: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let pred_dir = rc.require_path("pred_dir")?;
    let gt_dir = rc.require_path("gt_dir")?;
    let ids = label_files(&pred_dir)?;
    if ids.is_empty() {
        return Err(format!("no label files in {}", pred_dir.display()));
    }
    if let Some(id) = ids
        .iter()
        .find(|id| !gt_dir.join(format!("{id}.txt")).is_file())
    {
        return Err(format!("no ground truth for {id} in {}", gt_dir.display()));
    }
    let pairs: Vec<(PathBuf, PathBuf)> = ids
        .iter()
        .map(|id| {
            let name = format!("{id}.txt");
            (pred_dir.join(&name), gt_dir.join(&name))
        })
        .collect();
    let mapping = match rc.path("mapping") {
        Some(p) => read_mapping(p).map_err(err)?,
        None => {
            let files: Vec<PathBuf> = pairs
                .iter()
                .flat_map(|(p, g)| [p.clone(), g.clone()])
                .collect();
            mapping_from_files(&files)?
        }
    };
    let ignore = ignore_id(rc, &mapping)?;
    let mut acc = MetricsAccumulator::new(ignore);
    for (pred_path, gt_path) in &pairs {
        let pred = read_labels(pred_path, &mapping).map_err(err)?;
        let gt = read_labels(gt_path, &mapping).map_err(err)?;
        acc.add(&pred, &gt)
            .map_err(|e| format!("{}: {e}", pred_path.display()))?;
    }
    out.write_all(acc.finish().to_record().as_bytes())
        .map_err(|e| format!("writing output: {e}"))
}

pub fn gradcheck(rc: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let d = SuiteConfig::default();
    let cfg = SuiteConfig {
        seeds: rc.get_or("seeds", d.seeds)?,
        frames: rc.get_or("frames", d.frames)?,
        model_dim: rc.get_or("model_dim", d.model_dim)?,
        blocks: rc.get_or("blocks_per_stage", d.blocks)?,
        decoders: rc.get_or("num_decoders", d.decoders)?,
        classes: rc.get_or("num_classes", d.classes)?,
        input_dim: rc.get_or("input_dim", d.input_dim)?,
        eps: rc.get_or("eps", d.eps)?,
    };
    if cfg.seeds == 0 || cfg.frames < 2 || cfg.eps <= 0.0 {
        return Err("gradcheck needs seeds >= 1, frames >= 2 and eps > 0".into());
    }
    let results = run_suite(&cfg).map_err(err)?;
    let mut failed = Vec::new();
    for r in &results {
        emit(
            out,
            format_args!(
                "component={} max_rel_error={:.3e} tolerance={:e} coordinates={} kinked={} status={}",
                r.name,
                r.report.max_rel_error,
                r.tolerance,
                r.report.coordinates,
                r.report.kinked,
                if r.passes() { "pass" } else { "fail" }
            ),
        )?;
        if !r.passes() {
            failed.push(r.name.as_str());
        }
    }
    emit(
        out,
        format_args!("components={} failed={}", results.len(), failed.len()),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("gradient check failed for {}", failed.join(", ")))
    }
}
