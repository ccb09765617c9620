//! The CLI commands as library functions: dataset synthesis, training,
//! evaluation and single-image segmentation.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::Config;
use crate::data::{
    augment_flips, extract_rois, inference_batch, load_dataset, load_roi_cache, pgm::read_image, pgm::write_mask8,
    save_dataset, save_roi_cache, split_dataset, synth_dataset, DatasetSplit, RoiGeometry, RoiSample, SplitGuard,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{binarize, MetricReport};
use crate::net::{Ablation, DualCoreNet};
use crate::nn::NetworkParams;
use crate::rng::Rng;
use crate::scalar::{Precision, Scalar};
use crate::train::{evaluate, load_checkpoint, save_train_state, TrainEvent, TrainState, Trainer};

pub const HISTORY_FILE: &str = "history.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const ROC_FILE: &str = "roc.svg";
pub const CONFIG_FILE: &str = "config.ini";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
/// Full training state, written whenever `cmd_train` returns.
pub const STATE_CHECKPOINT: &str = "state.ckpt";

/// Label for the split RNG stream, shared by training and evaluation.
const SPLIT_STREAM: u64 = 0x5e;
const INIT_STREAM: u64 = 0x1a;

fn usage_io(what: &str, path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("cannot {what} {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| usage_io("create directory", path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `count` synthetic images under `out`.
pub fn cmd_synth(out: &Path, count: usize, seed: u64, spec: &SynthSpec) -> Result<()> {
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    create_dir(out)?;
    let items = synth_dataset::<f32>(count, &Rng::new(seed), spec);
    save_dataset(out, &items).map_err(|e| match e {
        Error::Io { path, source } => usage_io("write", &path, source),
        other => other,
    })
}

fn require_dataset(data: &Path) -> Result<()> {
    if data.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("dataset directory {} not found", data.display())))
    }
}

/// ROIs for every image of a dataset, from the crop cache when present.
pub fn dataset_rois<T: Scalar>(data: &Path, g: &RoiGeometry, log: &mut dyn Write) -> Result<Vec<RoiSample<T>>> {
    require_dataset(data)?;
    if let Some(rois) = load_roi_cache(data, g)? {
        return Ok(rois);
    }
    let rois: Vec<RoiSample<T>> =
        load_dataset::<T>(data)?.iter().map(|img| extract_rois(img, g)).collect::<Result<_>>()?;
    if let Err(e) = save_roi_cache(data, g, &rois) {
        let _ = writeln!(log, "warning: ROI cache not written: {e}");
    }
    Ok(rois)
}

/// Deterministic train/test split of a dataset's ROIs.
pub fn split_rois<T: Scalar>(rois: Vec<RoiSample<T>>, cfg: &Config) -> Result<DatasetSplit<RoiSample<T>>> {
    split_dataset(rois, cfg.data.split_ratio, &Rng::new(cfg.run.seed).derive(&[SPLIT_STREAM]))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from a `state.ckpt` written by an earlier run.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs (the state is saved for resuming).
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub complete: bool,
    /// Test-split report, present when training completed.
    pub report: Option<MetricReport>,
}

/// Runs the configured training plan on `data` and writes history,
/// checkpoints, the resolved config and, once complete, the test report.
pub fn cmd_train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    match cfg.run.precision {
        Precision::F32 => train_impl::<f32>(cfg, data, out, opts, log),
        Precision::F64 => train_impl::<f64>(cfg, data, out, opts, log),
    }
}

fn train_impl<T: Scalar>(
    cfg: &Config,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    require_dataset(data)?;
    let net = DualCoreNet::new(cfg.network.clone())?;
    cfg.training.validate(&net)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_ini())?;
    for w in cfg.warnings() {
        let _ = writeln!(log, "warning: {w}");
    }

    let g = RoiGeometry::for_net(&cfg.network);
    let split = split_rois(dataset_rois::<T>(data, &g, log)?, cfg)?;
    let train = if cfg.data.augment { split.train.iter().flat_map(augment_flips).collect() } else { split.train };
    let _ = writeln!(log, "{} training samples, {} test samples", train.len(), split.test.len());
    let guard = SplitGuard::new(DatasetSplit { train, test: split.test, seed: split.seed });

    let history_path = out.join(HISTORY_FILE);
    let mut st = match &opts.resume {
        Some(path) => {
            let (params, state) = load_checkpoint::<T>(path)?;
            params.check_against(net.spec())?;
            let mut st = state.ok_or_else(|| Error::format(path, "checkpoint holds no training state"))?;
            st.adam.cfg = cfg.training.adam;
            st
        }
        None => {
            write_file(&history_path, "phase\tepoch\tloss\tmetric\n")?;
            let params = net.init_params::<T>(&mut Rng::new(cfg.run.seed).derive(&[INIT_STREAM]));
            TrainState::fresh(params, cfg.training.adam)
        }
    };
    let history =
        OpenOptions::new().create(true).append(true).open(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut history = BufWriter::new(history);

    let trainer =
        Trainer { net: &net, crf: &cfg.crf, plan: &cfg.training, seed: cfg.run.seed, threshold: cfg.data.threshold };
    let mut on_event = |e: &TrainEvent, st: &TrainState<T>| -> Result<()> {
        match e {
            TrainEvent::Epoch(r) => {
                writeln!(history, "{}", r.tsv())
                    .and_then(|_| history.flush())
                    .map_err(|e| Error::io(&history_path, e))?;
                let _ = writeln!(log, "{} epoch {} loss {:.4} metric {:.4}", r.phase, r.epoch, r.loss, r.metric);
            }
            TrainEvent::Best(kind) => st.params.save(&out.join(format!("best_{kind}.ckpt")))?,
            TrainEvent::PhaseEnd(kind) => st.params.save(&out.join(format!("phase_{kind}.ckpt")))?,
        }
        Ok(())
    };
    let complete = trainer.run(&guard, &mut st, opts.max_epochs, &mut on_event)?;
    save_train_state(&out.join(STATE_CHECKPOINT), &st)?;
    if !complete {
        let _ = writeln!(log, "stopped before the plan finished; resume from {}", out.join(STATE_CHECKPOINT).display());
        return Ok(TrainOutcome { complete, report: None });
    }
    st.params.save(&out.join(FINAL_CHECKPOINT))?;
    let report = evaluate(&net, &st.params, &cfg.crf, guard.test()?, cfg.run.eval_batch_size, cfg.data.threshold)?;
    write_report(out, &report)?;
    Ok(TrainOutcome { complete, report: Some(report) })
}

pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(REPORT_FILE), &report.to_text())?;
    write_file(&dir.join(ROC_FILE), &report.to_svg())
}

/// Which samples of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSplit {
    #[default]
    All,
    Train,
    Test,
}

impl FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EvalSplit::All),
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::config(format!("unknown split `{s}` (expected all|train|test)"))),
        }
    }
}

fn load_params<T: Scalar>(net: &DualCoreNet, ckpt: &Path) -> Result<NetworkParams<T>> {
    let (params, _) = load_checkpoint::<T>(ckpt)?;
    params.check_against(net.spec())?;
    Ok(params)
}

/// Evaluates a checkpoint on `data` (or one of its config-defined splits)
/// and writes `report.txt` and `roc.svg` to `out` when given.
pub fn cmd_eval(cfg: &Config, ckpt: &Path, data: &Path, split: EvalSplit, out: Option<&Path>) -> Result<MetricReport> {
    fn run<T: Scalar>(cfg: &Config, ckpt: &Path, data: &Path, split: EvalSplit) -> Result<MetricReport> {
        let net = DualCoreNet::new(cfg.network.clone())?;
        let params = load_params::<T>(&net, ckpt)?;
        let rois = dataset_rois::<T>(data, &RoiGeometry::for_net(&cfg.network), &mut std::io::sink())?;
        let samples = match split {
            EvalSplit::All => rois,
            EvalSplit::Train => split_rois(rois, cfg)?.train,
            EvalSplit::Test => split_rois(rois, cfg)?.test,
        };
        evaluate(&net, &params, &cfg.crf, &samples, cfg.run.eval_batch_size, cfg.data.threshold)
    }
    require_dataset(data)?;
    let report = match cfg.run.precision {
        Precision::F32 => run::<f32>(cfg, ckpt, data, split)?,
        Precision::F64 => run::<f64>(cfg, ckpt, data, split)?,
    };
    if let Some(dir) = out {
        write_report(dir, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutcome {
    /// Fused, LPL-only and CGL-only probability of the malignant class.
    pub class_probs: [f64; 3],
    /// Fraction of mask pixels marked foreground.
    pub foreground_fraction: f64,
    pub soft_path: PathBuf,
}

/// `<stem>.soft.pgm` next to the mask.
pub fn default_soft_path(mask_out: &Path) -> PathBuf {
    let stem = mask_out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mask".into());
    mask_out.with_file_name(format!("{stem}.soft.pgm"))
}

/// Segments and classifies one image treated as a bounding-box ROI; writes
/// the binarized mask and the 8-bit soft mask.
pub fn cmd_segment(
    cfg: &Config,
    ckpt: &Path,
    image: &Path,
    mask_out: &Path,
    soft_out: Option<&Path>,
) -> Result<SegmentOutcome> {
    fn run<T: Scalar>(
        cfg: &Config,
        ckpt: &Path,
        image: &Path,
        mask_out: &Path,
        soft_out: &Path,
    ) -> Result<SegmentOutcome> {
        let net = DualCoreNet::new(cfg.network.clone())?;
        let params = load_params::<T>(&net, ckpt)?;
        let pixels = read_image::<T>(image)?;
        let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let batch = inference_batch(&id, &pixels, &cfg.network)?;
        let out = net.infer(&params, &batch, &cfg.crf, Ablation::None)?;
        let mask = binarize(&out.soft_mask, cfg.data.threshold).remove(0);
        write_mask8(mask_out, &mask)?;
        write_mask8(soft_out, &out.soft_mask.foreground(0))?;
        let p1 = |t: &crate::tensor::Tensor<T>| t.data()[1].as_f64();
        Ok(SegmentOutcome {
            class_probs: [p1(&out.class_probs), p1(&out.lpl_probs), p1(&out.cgl_probs)],
            foreground_fraction: mask.data().iter().filter(|&&v| v == T::one()).count() as f64 / mask.numel() as f64,
            soft_path: soft_out.to_path_buf(),
        })
    }
    let soft = soft_out.map(Path::to_path_buf).unwrap_or_else(|| default_soft_path(mask_out));
    match cfg.run.precision {
        Precision::F32 => run::<f32>(cfg, ckpt, image, mask_out, &soft),
        Precision::F64 => run::<f64>(cfg, ckpt, image, mask_out, &soft),
    }
}
