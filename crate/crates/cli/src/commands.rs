use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use stm_unet::checkpoint::{load_checkpoint, save_checkpoint};
use stm_unet::config::{DataSource, RunConfig};
use stm_unet::data::{load_dataset, save_dataset, split_samples, synth_blobs, DatasetSplit, SegmentationSample, SplitRatio};
use stm_unet::gradsuite;
use stm_unet::model::{ModelConfig, StmUNet};
use stm_unet::train::{evaluate, train_with, TrainOutcome};
use stm_unet::Error;

use crate::{CliError, EvalArgs, Format, Subset};

/// Parameter count the default configuration is calibrated against.
const REFERENCE_PARAMS: f64 = 6.12e6;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn square_side(cfg: &ModelConfig) -> Result<usize, CliError> {
    let (h, w) = cfg.input_size;
    if h != w {
        return Err(CliError::Usage(format!("synthetic data needs a square input size, got {h}x{w}")));
    }
    Ok(h)
}

fn load_samples(source: &DataSource, model: &ModelConfig, seed: u64) -> Result<Vec<SegmentationSample>, CliError> {
    Ok(match source {
        DataSource::Synth { count } => synth_blobs(*count, square_side(model)?, seed)?,
        DataSource::Folder(path) => load_dataset(Path::new(path), model.input_size)?,
    })
}

/// Tees lines to stdout and an optional log file.
struct Log {
    file: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl Log {
    fn line(&mut self, text: impl std::fmt::Display) -> Result<(), CliError> {
        println!("{text}");
        if let Some((f, path)) = &mut self.file {
            writeln!(f, "{text}").and_then(|_| f.flush()).map_err(io_err(path))?;
        }
        Ok(())
    }
}

fn run_training(
    cfg: &RunConfig,
    model_cfg: ModelConfig,
    samples: &[SegmentationSample],
    split: &DatasetSplit,
    log: &mut Log,
) -> Result<(StmUNet<f32>, TrainOutcome), CliError> {
    let (train_set, val_set) = split.select(samples)?;
    let mut model = StmUNet::<f32>::build(model_cfg)?;
    log.line(format!("params={}", model.param_count()))?;
    log.line(format!("init_checksum={}", model.params().checksum()))?;
    let mut pending = Ok(());
    let outcome = train_with(&mut model, &train_set, &val_set, &cfg.train, |epoch| {
        if pending.is_ok() {
            pending = log.line(epoch);
        }
    });
    pending?;
    let outcome = match outcome {
        Err(e @ Error::Divergence { .. }) => {
            log.line(format!("aborted: {e}"))?;
            return Err(e.into());
        }
        other => other?,
    };
    log.line(format!("final_checksum={}", model.params().checksum()))?;
    log.line(format!("best_epoch={} best_val_miou={:.6}", outcome.best_epoch, outcome.best_miou))?;
    Ok((model, outcome))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let samples = load_samples(&cfg.data.source, &cfg.model, cfg.data.seed)?;
    let split = split_samples(&samples, cfg.data.split, cfg.data.seed)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join("train.log");
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = Log {
        file: Some((BufWriter::new(file), log_path)),
    };
    log.line(cfg.header())?;
    log.line(format!(
        "train={} val={} split_checksum={}",
        split.train.len(),
        split.val.len(),
        split.checksum()
    ))?;
    let (_, outcome) = run_training(cfg, cfg.model.clone(), &samples, &split, &mut log)?;
    let ck = out.join("best.stmu");
    save_checkpoint(&outcome.best, &ck)?;
    log.line(format!("checkpoint={}", ck.display()))
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(&args.checkpoint)?;
    let source = match args.data.as_str() {
        "synth" => DataSource::Synth {
            count: args.synth_count,
        },
        path => DataSource::Folder(path.to_string()),
    };
    let samples = load_samples(&source, model.config(), args.seed)?;
    let chosen: Vec<&SegmentationSample> = match args.subset {
        Subset::All => samples.iter().collect(),
        side => {
            let split = split_samples(&samples, SplitRatio::default(), args.seed)?;
            let (train, val) = split.select(&samples)?;
            if side == Subset::Train {
                train
            } else {
                val
            }
        }
    };
    let report = evaluate(&model, &chosen)?;
    match args.format {
        Format::Tsv => print!("{}", report.to_tsv()),
        Format::Text => {
            for s in &report.per_image {
                println!("{} iou={:.6} dice={:.6}", s.id, s.iou, s.dice);
            }
            println!("mIoU={:.6} mDice={:.6}", report.miou, report.mdice);
        }
    }
    Ok(())
}

/// Row label, checkpoint stem, `use_swin_skips`, `use_parallel_conv`.
const ABLATIONS: [(&str, &str, bool, bool); 3] = [
    ("-swin -pconv", "baseline", false, false),
    ("+swin -pconv", "swin", true, false),
    ("+swin +pconv", "swin_pconv", true, true),
];

pub fn ablate(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let samples = load_samples(&cfg.data.source, &cfg.model, cfg.data.seed)?;
    let split = split_samples(&samples, cfg.data.split, cfg.data.seed)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = Log { file: None };
    log.line(cfg.header())?;
    let mut rows = Vec::new();
    for (label, stem, swin, pconv) in ABLATIONS {
        log.line(format!("run={label} split_checksum={}", split.checksum()))?;
        let model_cfg = ModelConfig {
            use_swin_skips: swin,
            use_parallel_conv: pconv,
            ..cfg.model.clone()
        };
        let (_, outcome) = run_training(cfg, model_cfg, &samples, &split, &mut log)?;
        if let Some(dir) = out {
            save_checkpoint(&outcome.best, &dir.join(format!("{stem}.stmu")))?;
        }
        let best = outcome.epochs[outcome.best_epoch - 1];
        rows.push((label, outcome.best.param_count(), best.val_miou, best.val_mdice));
    }
    println!();
    println!("{:<14} {:>10} {:>8} {:>8}", "config", "params", "mIoU", "mDice");
    for (label, params, miou, mdice) in rows {
        println!("{label:<14} {params:>10} {miou:>8.4} {mdice:>8.4}");
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let entries = gradsuite::run(seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        let r = &e.report;
        let mut skipped = String::new();
        if r.skipped_kinks > 0 || r.skipped_unresolved > 0 {
            skipped = format!(" skipped_kinks={} skipped_unresolved={}", r.skipped_kinks, r.skipped_unresolved);
        }
        println!(
            "{:<20} max_rel_err={:.3e} tol={:.0e} checked={}{skipped} {status}",
            e.name, r.max_rel_error, e.tolerance, r.checked
        );
        if !e.passed() {
            if let Some(w) = e.report.worst {
                println!(
                    "  worst: input {} element {} analytic={:.9e} numeric={:.9e}",
                    w.input, w.element, w.analytic, w.numeric
                );
            }
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", entries.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn params(cfg: &RunConfig) -> Result<(), CliError> {
    println!("{}", cfg.header());
    let model = StmUNet::<f32>::build(cfg.model.clone())?;
    let mut sections: Vec<(String, usize)> = Vec::new();
    for p in model.params().iter() {
        let head = p.name.split('.').next().unwrap_or("").to_string();
        match sections.iter_mut().find(|(name, _)| *name == head) {
            Some((_, n)) => *n += p.value.numel(),
            None => sections.push((head, p.value.numel())),
        }
    }
    for (name, n) in &sections {
        println!("{name:<12} {n:>10}");
    }
    let total = model.param_count();
    println!("params={total}");
    println!(
        "reference={:.2}M deviation={:+.2}%",
        REFERENCE_PARAMS / 1e6,
        (total as f64 / REFERENCE_PARAMS - 1.0) * 100.0
    );
    Ok(())
}

pub fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let samples = synth_blobs(n, size, seed)?;
    save_dataset(out, &samples)?;
    println!("wrote {} samples of {size}x{size} to {}", samples.len(), out.display());
    Ok(())
}
