//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{from_rows, generate, load_dataset, read_records, rows, save_dataset, DatasetSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, lift_sample, metrics_from_shapes, EvalReport, SampleMetrics};
use crate::keypoints::{KeypointSet3D, VisibilityMask};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Dtype, ModelWeights};
use crate::train::{fit, gradient_check, LossSpace, RunConfig};

pub use plot::{curves_svg, shape_svg};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "LFM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lfm3d", version, about = "Lift 2D keypoints of arbitrary rigs to 3D")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StoreDtype {
    F64,
    F32,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed given in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint directory with its history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: StoreDtype,
    },
    /// Evaluate a checkpoint on a dataset, or score a prediction file.
    Eval {
        #[arg(long, required_unless_present = "pred", requires = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Prediction file written by `lift`, scored without running a model.
        #[arg(long, conflicts_with_all = ["data", "ckpt"])]
        pred: Option<PathBuf>,
        /// JSON report path; an aligned-column text copy is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict 3D shapes for every sample of a file.
    Lift {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences on one sample.
    Gradcheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Sample index within the data file.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Render training curves or a predicted shape as SVG.
    Plot {
        #[arg(long, required_unless_present = "pred")]
        history: Option<PathBuf>,
        #[arg(long, conflicts_with = "history", requires = "index")]
        pred: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    // A pool built earlier in the same process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out, seed } => {
            let mut s = DatasetSpec::parse(&read_text(&spec)?)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let d = generate(&s)?;
            save_dataset(&d, &out)?;
            println!(
                "wrote {} samples in {} categories to {}",
                d.len(),
                d.categories.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            val,
            config,
            out,
            dtype,
        } => train(&data, &val, &config, &out, dtype),
        Command::Eval {
            data,
            ckpt,
            pred,
            report,
        } => {
            let r = match (data, ckpt, pred) {
                (_, _, Some(pred)) => eval_predictions(&pred)?,
                (Some(data), Some(ckpt), None) => {
                    let (w, space) = load_model(&ckpt)?;
                    evaluate(&w, &load_dataset(&data)?, space)?
                }
                _ => return Err(Error::Argument("eval needs --data with --ckpt, or --pred".into())),
            };
            write_text(&report, &r.to_json())?;
            write_text(&report.with_extension("txt"), &r.to_text())?;
            print!("{}", r.to_text());
            Ok(())
        }
        Command::Lift { input, ckpt, out } => lift(&input, &ckpt, &out),
        Command::Gradcheck { ckpt, data, eps, index } => {
            let (w, space) = load_model(&ckpt)?;
            let d = load_dataset(&data)?;
            let sample = d
                .samples
                .get(index)
                .ok_or_else(|| Error::Argument(format!("sample index {index} out of range ({} samples)", d.len())))?;
            let report = gradient_check(&w, sample, eps, space)?;
            print!("{}", report.to_text());
            if report.passed {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_error
                )))
            }
        }
        Command::Plot {
            history,
            pred,
            index,
            out,
        } => {
            let svg = match (history, pred, index) {
                (Some(h), None, _) => curves_svg(&crate::train::TrainHistory::from_csv(&read_text(&h)?)?)?,
                (None, Some(p), Some(k)) => {
                    let (_, records) = read_records::<PredRecord>(&p)?;
                    let (_, rec) = records.get(k).ok_or_else(|| {
                        Error::Argument(format!("index {k} out of range ({} records)", records.len()))
                    })?;
                    shape_svg(rec)?
                }
                _ => return Err(Error::Argument("plot needs --history, or --pred with --index".into())),
            };
            write_text(&out, &svg)
        }
    }
}

const LOSS_SPACE_KEY: &str = "loss_space";

fn load_model(dir: &Path) -> Result<(ModelWeights, LossSpace)> {
    let (w, meta) = load_checkpoint(dir)?;
    let space = match meta.get(LOSS_SPACE_KEY) {
        Some(s) => s.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?,
        None => LossSpace::Aligned,
    };
    Ok((w, space))
}

fn train(data: &Path, val: &Path, config: &Path, out: &Path, dtype: StoreDtype) -> Result<()> {
    let cfg = RunConfig::parse(&read_text(config)?)?;
    let train_set = load_dataset(data)?;
    let val_set = load_dataset(val)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_max = cfg.n_max.unwrap_or(train_set.n_max.max(val_set.n_max));
    let w = ModelWeights::init(model_cfg, cfg.rff, cfg.init_seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let history_path = out.join("history.csv");
    let result = fit(w, &train_set, &val_set, &cfg.train);
    let output = match result {
        Ok(o) => o,
        Err(abort) => {
            write_text(&history_path, &abort.history.to_csv())?;
            return Err(abort.error);
        }
    };
    write_text(&history_path, &output.history.to_csv())?;
    let mut meta = CheckpointMeta::new();
    meta.insert(LOSS_SPACE_KEY.into(), cfg.train.loss_space.to_string());
    meta.insert("train_seed".into(), cfg.train.seed.to_string());
    meta.insert("epochs_run".into(), output.history.epochs.len().to_string());
    if let Some(r) = output.history.stop_reason {
        meta.insert("stop_reason".into(), r.as_str().into());
    }
    if let Some(b) = output.history.best_index() {
        meta.insert("best_epoch".into(), output.history.epochs[b].epoch.to_string());
        meta.insert("best_val_mpjpe".into(), output.history.epochs[b].val_mpjpe.to_string());
    }
    let dtype = match dtype {
        StoreDtype::F64 => Dtype::F64,
        StoreDtype::F32 => Dtype::F32,
    };
    save_checkpoint(out, &output.weights, dtype, &meta)?;
    println!(
        "trained {} epochs ({}), checkpoint in {}",
        output.history.epochs.len(),
        output.history.stop_reason.map_or("?", |r| r.as_str()),
        out.display()
    );
    Ok(())
}

/// A dataset line extended with the model's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredRecord {
    #[serde(flatten)]
    pub sample: SampleRecord,
    /// Centered canonical shape in dataset units; occluded rows are zero.
    pub s3d_canonical: Vec<[f64; 3]>,
    /// Final prediction in the centered ground-truth frame.
    pub s3d_pred: Option<Vec<[f64; 3]>>,
    /// Row-vector convention: `s3d_pred = scale * s3d_canonical * rotation`.
    pub rotation: Option<[[f64; 3]; 3]>,
    pub scale: Option<f64>,
}

#[derive(Serialize)]
struct Header<'a> {
    n_max: usize,
    categories: &'a [String],
}

fn lift(input: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let (w, space) = load_model(ckpt)?;
    let d = load_dataset(input)?;
    let mut text = serde_json::to_string(&Header {
        n_max: d.n_max,
        categories: &d.categories,
    })
    .expect("header serializes");
    text.push('\n');
    for s in &d.samples {
        let l = lift_sample(s, &w, space)?;
        let p = l.prediction.as_ref();
        let rec = PredRecord {
            sample: SampleRecord::from_sample(s),
            s3d_canonical: rows(l.canonical.coords()),
            s3d_pred: p.map(|p| rows(p.shape.coords())),
            rotation: p.map(|p| std::array::from_fn(|r| std::array::from_fn(|c| p.rotation[(r, c)]))),
            scale: p.map(|p| p.scale),
        };
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push('\n');
    }
    write_text(out, &text)?;
    println!("wrote {} predictions to {}", d.len(), out.display());
    Ok(())
}

fn eval_predictions(path: &Path) -> Result<EvalReport> {
    let (_, records) = read_records::<PredRecord>(path)?;
    let mut items: Vec<(String, SampleMetrics)> = Vec::with_capacity(records.len());
    for (line, r) in &records {
        let at = |e: Error| Error::Validation(format!("line {line}: {e}"));
        let sample = r.sample.to_sample().map_err(at)?;
        let (Some(gt), Some(pred)) = (&sample.s3d_gt, &r.s3d_pred) else {
            return Err(at(Error::Validation("record has no ground truth or prediction".into())));
        };
        let mask: &VisibilityMask = &sample.mask;
        let reference = gt.centered(mask).map_err(at)?;
        let canonical = KeypointSet3D::new(from_rows(&r.s3d_canonical)).map_err(at)?;
        let prediction = KeypointSet3D::new(from_rows(pred)).map_err(at)?;
        items.push((
            sample.category_id.clone(),
            metrics_from_shapes(&canonical, &prediction, &reference, mask).map_err(at)?,
        ));
    }
    EvalReport::from_samples(&items)
}
