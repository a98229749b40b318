//! The four commands as library functions, so tests can drive them without
//! spawning the binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use ltcf_core::data::{self, PairedDataset};
use ltcf_core::losses::{self, FeatureExtractor};
use ltcf_core::optim::{self, History, TrainEvent};
use ltcf_core::{Error, LossWeights, LtcfNet, Tensor};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::report::{self, CardInputs, EvalReport, ImageScore};
use crate::tiling;

pub fn build_dataset(cfg: &RunConfig) -> Result<PairedDataset> {
    match (&cfg.data.root, cfg.data.synthetic) {
        (_, Some(n)) => {
            let s = cfg.data.synthetic_size;
            Ok(data::synthetic_dataset(n, s, s, &cfg.degradation)?)
        }
        (Some(root), None) => Ok(data::load_root(root)?),
        (None, None) => bail!(Error::Config(
            "no dataset: pass --data <dir> or --synthetic <n>, or set [data] in the config".into()
        )),
    }
}

/// Train and evaluation splits; a zero test ratio evaluates on the
/// training pairs.
pub fn split(cfg: &RunConfig, ds: &PairedDataset) -> Result<(PairedDataset, PairedDataset)> {
    if cfg.data.test_ratio == 0.0 {
        return Ok((ds.clone(), ds.clone()));
    }
    Ok(ds.split(cfg.data.test_ratio)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: History,
    pub eval: EvalReport,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let config_toml = cfg.to_toml()?;
    write_file(&out.join("resolved.toml"), config_toml.as_bytes())?;

    let dataset = build_dataset(cfg)?;
    let (train_set, test_set) = split(cfg, &dataset)?;
    if cfg.train.patch > 0 {
        for e in train_set.entries() {
            if cfg.train.patch > e.height.min(e.width) {
                bail!(Error::Config(format!(
                    "patch {} does not fit `{}` ({}x{})",
                    cfg.train.patch, e.name, e.height, e.width
                )));
            }
        }
    }
    info!(
        "training {} on {} pair(s), evaluating on {}",
        cfg.model.variant_name(),
        train_set.len(),
        test_set.len()
    );

    let mut net = LtcfNet::build(&cfg.model)?;
    let extractor = FeatureExtractor::from_source(&cfg.extractor)?;
    let ckpt_dir = out.join("checkpoints");
    if cfg.output.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io {
            path: ckpt_dir.clone(),
            source: e,
        })?;
    }
    let hist_path = out.join("history.jsonl");
    let mut hist = BufWriter::new(create(&hist_path)?);
    let steps_path = out.join("steps.csv");
    let mut steps = csv::Writer::from_writer(create(&steps_path)?);
    steps.write_record(["step", "epoch", "lr", "loss", "grad_norm", "clipped"])?;

    let mut on_event = |ev: TrainEvent<'_>| -> ltcf_core::Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| Error::Io { path, source: e }
        };
        match ev {
            TrainEvent::Step(s) => {
                let row = (s.step, s.epoch, s.lr, s.loss, s.grad_norm, s.clipped);
                steps.serialize(row).map_err(|e| Error::Io {
                    path: steps_path.clone(),
                    source: e.into(),
                })?;
            }
            TrainEvent::Epoch { record, net } => {
                let mut line =
                    json!({ "epoch": record.epoch, "lr": record.lr, "loss": record.loss });
                for (name, v) in record.named_terms() {
                    line[name] = json!(v);
                }
                writeln!(hist, "{line}").map_err(io(&hist_path))?;
                hist.flush().map_err(io(&hist_path))?;
                info!(
                    "epoch {:>4}  lr {:.2e}  loss {:.5}",
                    record.epoch, record.lr, record.loss
                );
                let every = cfg.output.checkpoint_every;
                if every > 0 && (record.epoch + 1) % every == 0 {
                    net.save_checkpoint(
                        &ckpt_dir.join(format!("epoch_{:04}.ltcf", record.epoch + 1)),
                    )?;
                }
            }
        }
        Ok(())
    };
    let history = optim::train(
        &mut net,
        &train_set,
        &cfg.loss,
        &extractor,
        &cfg.schedule,
        &cfg.train,
        &mut on_event,
    )?;
    steps.flush().map_err(|e| Error::Io {
        path: steps_path.clone(),
        source: e,
    })?;

    let checkpoint = out.join("model.ltcf");
    net.save_checkpoint(&checkpoint)?;
    let eval = evaluate(Some(&net), &test_set, cfg)?;
    eval.write_csv(&out.join("metrics.csv"))?;
    info!(
        "held-out mean PSNR {:.3} dB, SSIM {:.4}",
        eval.mean_psnr(),
        eval.mean_ssim()
    );
    let card = report::model_card(&CardInputs {
        net: &net,
        config_toml: &config_toml,
        epochs_run: history.epochs.len(),
        final_loss: history.epochs.last().map(|e| e.loss),
        eval: Some(&eval),
    });
    write_file(&out.join("model_card.md"), card.as_bytes())?;
    Ok(TrainOutcome {
        out_dir: out,
        checkpoint,
        history,
        eval,
    })
}

/// Scores every pair, enhancing the low image with `net` or, without a
/// network, scoring the low image itself.
pub fn evaluate(net: Option<&LtcfNet>, ds: &PairedDataset, cfg: &RunConfig) -> Result<EvalReport> {
    let rows = (0..ds.len())
        .into_par_iter()
        .map(|i| score(net, ds, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows))
}

fn score(
    net: Option<&LtcfNet>,
    ds: &PairedDataset,
    i: usize,
    cfg: &RunConfig,
) -> Result<ImageScore> {
    let pair = ds.get(i)?;
    let pred = match net {
        Some(n) => tiling::enhance_tiled(n, &pair.low, cfg.inference.tile, cfg.inference.overlap)?,
        None => pair.low.clone(),
    };
    Ok(ImageScore {
        psnr: losses::psnr(&pair.high, &pred)?,
        ssim: ssim_metric(&pair.high, &pred, &cfg.loss)?,
        name: pair.name,
    })
}

/// SSIM with the window shrunk to fit images smaller than it.
fn ssim_metric(a: &Tensor, b: &Tensor, w: &LossWeights) -> Result<f64> {
    let side = a.shape()[0].min(a.shape()[1]);
    let mut w = w.clone();
    if side < w.ssim_window {
        w.ssim_window = if side % 2 == 1 { side } else { side - 1 };
    }
    Ok(losses::ssim_index(a, b, &w)?)
}

#[derive(Clone, Debug)]
pub struct EnhanceArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub tile: usize,
    pub overlap: usize,
    pub preview: bool,
    /// Directory of ground-truth images with matching names, shown as the
    /// third preview panel.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Default)]
pub struct EnhanceSummary {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

pub fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!(Error::Dataset(vec![ltcf_core::FileIssue {
            path: input.to_path_buf(),
            reason: "no such file or directory".into(),
        }]));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::Io {
            path: input.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    data::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())
                })
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::EmptyDataset(format!(
            "no PNG or JPEG files in {}",
            input.display()
        )));
    }
    Ok(files)
}

/// Writes `<out>/<stem>.png` per input; failures are collected rather than
/// stopping the batch.
pub fn enhance(args: &EnhanceArgs) -> Result<EnhanceSummary> {
    let net = LtcfNet::load_checkpoint(&args.checkpoint)?;
    let files = input_files(&args.input)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    if args.preview {
        let p = args.out_dir.join("preview");
        fs::create_dir_all(&p).map_err(|e| Error::Io { path: p, source: e })?;
    }
    let results: Vec<(PathBuf, Result<PathBuf>)> = files
        .par_iter()
        .map(|f| (f.clone(), enhance_one(&net, f, args)))
        .collect();
    let mut summary = EnhanceSummary::default();
    for (f, r) in results {
        match r {
            Ok(p) => summary.written.push(p),
            Err(e) => {
                warn!("{}: {e:#}", f.display());
                summary.failed.push((f, format!("{e:#}")));
            }
        }
    }
    Ok(summary)
}

fn enhance_one(net: &LtcfNet, file: &Path, args: &EnhanceArgs) -> Result<PathBuf> {
    let img = data::load_image(file)?;
    let out = tiling::enhance_tiled(net, &img, args.tile, args.overlap)?;
    let stem = file
        .file_stem()
        .and_then(|s| s.to_str())
        .context("file name is not UTF-8")?;
    let target = args.out_dir.join(format!("{stem}.png"));
    data::save_png(&target, &out)?;
    if args.preview {
        let reference = match &args.reference {
            Some(dir) => Some(data::load_image(
                &dir.join(file.file_name().unwrap_or_default()),
            )?),
            None => None,
        };
        let mut panels = vec![&img, &out];
        if let Some(r) = &reference {
            panels.push(r);
        }
        let grid = report::preview_grid(&panels)?;
        data::save_png(
            &args.out_dir.join("preview").join(format!("{stem}.png")),
            &grid,
        )?;
    }
    Ok(target)
}

pub fn inspect(net: &LtcfNet, h: usize, w: usize) -> String {
    let rows = net.module_stats(h, w);
    format!(
        "variant {}\n\n{}",
        net.config.variant_name(),
        report::module_table(&rows, h, w)
    )
}

fn create(path: &Path) -> Result<File> {
    Ok(File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Process exit status for an error: 2 configuration, 3 data ingestion,
/// 4 numeric failure, 5 file or checkpoint I/O, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Usage(_)
                | Error::Shape { .. }
                | Error::Resource { .. }
                | Error::ConfigMismatch(_)
                | Error::TensorShapeMismatch { .. } => 2,
                Error::EmptyDataset(_) | Error::Dataset(_) | Error::Decode { .. } => 3,
                Error::NonFinite(_) => 4,
                Error::Io { .. } | Error::Corrupt(_) | Error::VersionMismatch { .. } => 5,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 5;
        }
    }
    1
}
