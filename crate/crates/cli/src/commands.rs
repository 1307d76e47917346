use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stoneseg::annotations::{parse_annotations, rasterize_polygons, split_dataset_with_val, DatasetIndex, Split};
use stoneseg::imaging::{auto_crop, io, ImagingError, Rect};
use stoneseg::nnet::Checkpoint;
use stoneseg::synthdata::{generate_dataset, Challenge};
use stoneseg::training::{
    evaluate_model, grid_search, run_id, train_model, CellStatus, Dataset, JsonlLog, Optimizer, TrainConfig, TrainError,
};
use stoneseg::videopipe::{
    annotate_stream, bench_throughput, mask_dir_source, FpsReport, FrameSource, IdentitySegmenter, MaskSource,
    PanelWriter, StreamMode,
};

use crate::config::CliConfig;
use crate::{BenchMode, CliError, Command, ModeArg, OptimizerArg, SplitArg, TrainArgs};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Crop { input, out } => crop(&input, &out),
        Command::Rasterize { annotations, out } => rasterize(&annotations, &out),
        Command::Split {
            common,
            data,
            out,
            test_fraction,
            val_fraction,
            seed,
        } => {
            let mut cfg = CliConfig::load(common.config.as_deref())?.split;
            cfg.test_fraction = test_fraction.unwrap_or(cfg.test_fraction);
            cfg.val_fraction = val_fraction.unwrap_or(cfg.val_fraction);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let out = out.unwrap_or_else(|| data.with_file_name("split.json"));
            split(&data, &out, cfg.test_fraction, cfg.val_fraction, cfg.seed)
        }
        Command::Synth {
            common,
            out,
            seed,
            videos,
            frames,
            image_size,
            challenges,
            challenge_rate,
        } => {
            let mut spec = CliConfig::load(common.config.as_deref())?.scene;
            spec.seed = seed.unwrap_or(spec.seed);
            spec.image_size = image_size.unwrap_or(spec.image_size);
            spec.challenge_rate = challenge_rate.unwrap_or(spec.challenge_rate);
            if let Some(c) = challenges {
                spec.challenges = Challenge::parse_list(&c).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            let ds = generate_dataset(&spec, videos, frames)?;
            ds.write(&out)?;
            print_json(&serde_json::json!({
                "out": out,
                "videos": videos,
                "frames": ds.frames.len(),
                "seed": spec.seed,
            }))
        }
        Command::Train {
            common,
            train,
            data,
            log,
            out,
        } => {
            let cfg = CliConfig::load(common.config.as_deref())?;
            let tcfg = apply_train_args(cfg.train.clone(), train);
            train_cmd(&cfg, &tcfg, &data, &log, &out)
        }
        Command::Grid {
            common,
            train,
            data,
            lrs,
            batches,
            seeds_per_cell,
            log,
            out,
        } => {
            let mut cfg = CliConfig::load(common.config.as_deref())?;
            cfg.train = apply_train_args(cfg.train.clone(), train);
            if let Some(l) = lrs {
                cfg.grid.learning_rates = l;
            }
            if let Some(b) = batches {
                cfg.grid.batch_sizes = b;
            }
            cfg.grid.seeds_per_cell = seeds_per_cell.unwrap_or(cfg.grid.seeds_per_cell);
            grid_cmd(&cfg, &data, &log, &out)
        }
        Command::Eval { model, data, split, out } => {
            let ckpt = Checkpoint::load(&model)?;
            let index = DatasetIndex::load(&data)?;
            let c = ckpt.config();
            let ds = Dataset::load(&index, data_root(&data), split.into(), c.input_width, c.input_height)?;
            if ds.is_empty() {
                return Err(CliError::Data(format!("split {} of {} is empty", Split::from(split), data.display())));
            }
            let report = evaluate_model(&ckpt, &ds)?;
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
            }
            print_json(&report)
        }
        Command::AnnotateVideo {
            model,
            frames,
            pipe,
            gt,
            fps,
            out,
            pmap,
            mode,
            report,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let mut src = match (frames, pipe) {
                (Some(dir), _) => FrameSource::from_dir(&dir)?,
                (None, Some(p)) if p.as_os_str() == "-" => FrameSource::from_pipe(std::io::stdin()),
                (None, Some(p)) => FrameSource::from_pipe(std::fs::File::open(&p)?),
                (None, None) => return Err(CliError::Usage("one of --frames or --pipe is required".into())),
            };
            if let Some(f) = fps {
                src = src.resample(f)?;
            }
            let gt: Option<MaskSource> = gt.as_deref().map(mask_dir_source);
            let mut writer = PanelWriter::new(&out, pmap)?;
            let r = annotate_stream(&ckpt.model, src, gt, mode.into(), &mut |f| writer.write(&f))?;
            for e in &r.errors {
                eprintln!("frame {}: {}", e.index, e.message);
            }
            match report {
                Some(p) => std::fs::write(&p, serde_json::to_string_pretty(&r)?)?,
                None => print_json(&r)?,
            }
            if r.frames == 0 {
                return Err(CliError::Data("no frame could be annotated".into()));
            }
            Ok(())
        }
        Command::Bench {
            model,
            identity,
            size,
            frames,
            mode,
        } => {
            let modes: Vec<StreamMode> = match mode {
                BenchMode::Sequential => vec![StreamMode::Sequential],
                BenchMode::Pipelined => vec![StreamMode::Pipelined],
                BenchMode::Both => vec![StreamMode::Sequential, StreamMode::Pipelined],
            };
            let mut reports: Vec<FpsReport> = Vec::new();
            if identity {
                let (w, h) = match &model {
                    Some(p) => {
                        let c = Checkpoint::load(p)?;
                        (c.config().input_width, c.config().input_height)
                    }
                    None => (64, 64),
                };
                let seg = IdentitySegmenter { width: w, height: h };
                for m in modes {
                    reports.push(bench_throughput(&seg, size, frames, m)?);
                }
            } else {
                let path = model.ok_or_else(|| CliError::Usage("--model or --identity is required".into()))?;
                let ckpt = Checkpoint::load(&path)?;
                for m in modes {
                    reports.push(bench_throughput(&ckpt.model, size, frames, m)?);
                }
            }
            print_json(&reports)
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl From<ModeArg> for StreamMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sequential => StreamMode::Sequential,
            ModeArg::Pipelined => StreamMode::Pipelined,
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn data_root(index_path: &Path) -> &Path {
    index_path.parent().unwrap_or(Path::new("."))
}

fn apply_train_args(mut t: TrainConfig, a: TrainArgs) -> TrainConfig {
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch.unwrap_or(t.batch_size);
    t.seed = a.seed.unwrap_or(t.seed);
    if let Some(o) = a.optimizer {
        t.optimizer = match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        };
    }
    if a.validation_interval.is_some() {
        t.validation_interval = a.validation_interval;
    }
    if a.warm_start.is_some() {
        t.warm_start = a.warm_start;
    }
    t
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "ppm" | "pnm")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn crop(input: &Path, out: &Path) -> Result<(), CliError> {
    let files = image_files(input)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no frames found in {}", input.display())));
    }
    std::fs::create_dir_all(out)?;
    let mut boxes: BTreeMap<String, Option<Rect>> = BTreeMap::new();
    for f in files {
        let name = f.file_name().expect("listed files have names").to_string_lossy().into_owned();
        match auto_crop(&io::read_rgb(&f)?) {
            Ok((cropped, rect)) => {
                io::write_rgb(&out.join(&name), &cropped)?;
                boxes.insert(name, Some(rect));
            }
            Err(ImagingError::Uncroppable) => {
                eprintln!("{name}: uncroppable frame, skipped");
                boxes.insert(name, None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    std::fs::write(out.join("boxes.json"), serde_json::to_string_pretty(&boxes)?)?;
    Ok(())
}

fn rasterize(annotations: &Path, out: &Path) -> Result<(), CliError> {
    let docs = parse_annotations(&std::fs::read_to_string(annotations)?)?;
    for d in &docs {
        let path = out.join(&d.image_name).with_extension("png");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        io::write_mask(&path, &rasterize_polygons(d))?;
    }
    print_json(&serde_json::json!({ "masks": docs.len(), "out": out }))
}

fn split(data: &Path, out: &Path, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<(), CliError> {
    let index = DatasetIndex::load(data)?;
    let mut videos: Vec<(String, usize)> = Vec::new();
    for e in &index.entries {
        match videos.iter_mut().find(|(id, _)| *id == e.video_id) {
            Some((_, n)) => *n += 1,
            None => videos.push((e.video_id.clone(), 1)),
        }
    }
    let assigned = split_dataset_with_val(&videos, test_fraction, val_fraction, seed)?;
    let by_video: BTreeMap<&str, Split> = assigned
        .entries
        .iter()
        .map(|e| (e.video_id.as_str(), e.split))
        .collect();
    let mut result = DatasetIndex {
        entries: index.entries.clone(),
        seed,
    };
    for e in &mut result.entries {
        e.split = by_video[e.video_id.as_str()];
    }
    result.save(out)?;
    let count = |s| result.videos(s).len();
    print_json(&serde_json::json!({
        "out": out,
        "train_videos": count(Split::Train),
        "val_videos": count(Split::Val),
        "test_videos": count(Split::Test),
    }))
}

fn load_train_val(cfg: &CliConfig, data: &Path) -> Result<(Dataset, Option<Dataset>), CliError> {
    let index = DatasetIndex::load(data)?;
    let (w, h) = (cfg.model.input_width, cfg.model.input_height);
    let root = data_root(data);
    let train = Dataset::load(&index, root, Split::Train, w, h)?;
    if train.is_empty() {
        return Err(CliError::Data(format!("{} has no training frames", data.display())));
    }
    let val = Dataset::load(&index, root, Split::Val, w, h)?;
    Ok((train, (!val.is_empty()).then_some(val)))
}

fn train_cmd(cfg: &CliConfig, tcfg: &TrainConfig, data: &Path, log: &Path, out: &Path) -> Result<(), CliError> {
    let (train, val) = load_train_val(cfg, data)?;
    let sink = JsonlLog::create(log)?;
    match train_model(&cfg.model, tcfg, &train, val.as_ref()) {
        Ok(o) => {
            sink.write_all(&o.records)?;
            o.checkpoint.save(out)?;
            print_json(&serde_json::json!({
                "run_id": run_id(&cfg.model, tcfg),
                "steps": o.checkpoint.training_steps_completed,
                "records": o.records.len(),
                "final_val_dice": o.final_val_dice(),
                "best_val_dice": o.best_val_dice(),
                "checkpoint": out,
                "log": log,
            }))
        }
        Err(TrainError::Diverged {
            run_id,
            step,
            loss,
            records,
        }) => {
            sink.write_all(&records)?;
            Err(CliError::Diverged(format!("run {run_id} diverged at step {step} (loss {loss})")))
        }
        Err(e) => Err(e.into()),
    }
}

fn grid_cmd(cfg: &CliConfig, data: &Path, log: &Path, out: &Path) -> Result<(), CliError> {
    let (train, val) = load_train_val(cfg, data)?;
    let val = val.ok_or_else(|| CliError::Data("grid search needs a val split (see `split --val-fraction`)".into()))?;
    let g = grid_search(&cfg.model, &cfg.grid, &cfg.train, &train, &val)?;
    JsonlLog::create(log)?.write_all(&g.records)?;
    let summary = serde_json::json!({ "best": g.best, "cells": g.cells });
    std::fs::write(out, serde_json::to_string_pretty(&summary)?)?;
    print_json(&summary)?;
    if g.best.is_none() {
        let diverged = g.cells.iter().any(|c| matches!(c.status, CellStatus::Diverged { .. }));
        let msg = "every grid cell failed".to_string();
        return Err(if diverged { CliError::Diverged(msg) } else { CliError::Data(msg) });
    }
    Ok(())
}
