//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or integrity error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{count_trainable_params, format_storage, summary, ArchId, ArchSpec, Network};
use crate::autograd::grad_check;
use crate::data::{scan_dataset, stratified_split, AugmentConfig, DiskSource, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{auc, roc_points, MetricsReport};
use crate::model_io::{self, RunReport};
use crate::tensor::Tensor4;
use crate::training::{evaluate_source, fit, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ulsqueeze", version, about = "SqueezeNet1.1 and ultralight variants for malaria cell classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the exact trainable-parameter count and 4-byte storage size.
    CountParams {
        #[arg(long)]
        arch: String,
    },
    /// Print the per-layer shape and parameter table.
    Summary {
        #[arg(long)]
        arch: String,
        /// Emit JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Freeze a stratified train/validation split to a manifest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate stored weights on a manifest's validation partition.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the metrics report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        roc_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Finite-difference check of backpropagated gradients on a reduced input.
    Gradcheck {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

/// JSON run configuration; every field optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<ArchId>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub dropout: Option<f64>,
    pub validate_each_epoch: Option<bool>,
    pub augmentation: Option<AugmentConfig>,
    /// Dataset root with Parasitized/ and Uninfected/.
    pub data_root: Option<PathBuf>,
    /// Frozen split manifest; takes precedence over splitting `data_root`.
    pub manifest: Option<PathBuf>,
    pub val_frac: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// Keep decoded images in memory across epochs.
    pub cache_images: Option<bool>,
}

/// Run configuration with every default applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub train: TrainConfig,
    pub augmentation: AugmentConfig,
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub val_frac: f64,
    pub out_dir: PathBuf,
    pub cache_images: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::usage(format!("invalid run config: {e}")))
    }

    /// Applies defaults. Relative paths are resolved against `base`.
    pub fn resolve(&self, base: &Path) -> Result<ResolvedRun> {
        let d = TrainConfig::default();
        let train = TrainConfig {
            arch: self.arch.unwrap_or(d.arch),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            augment: self.augment.unwrap_or(d.augment),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            dropout: self.dropout.or(d.dropout),
            validate_each_epoch: self.validate_each_epoch.unwrap_or(d.validate_each_epoch),
        };
        train.validate()?;
        let augmentation = self.augmentation.clone().unwrap_or_default();
        augmentation.validate()?;
        let rebase = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let resolved = ResolvedRun {
            train,
            augmentation,
            data_root: self.data_root.as_ref().map(rebase),
            manifest: self.manifest.as_ref().map(rebase),
            val_frac: self.val_frac.unwrap_or(0.2),
            out_dir: self.out_dir.as_ref().map(rebase).unwrap_or_else(|| base.join("run")),
            cache_images: self.cache_images.unwrap_or(true),
        };
        if resolved.data_root.is_none() && resolved.manifest.is_none() {
            return Err(Error::usage("run config needs data_root or manifest"));
        }
        if !(0.0..1.0).contains(&resolved.val_frac) {
            return Err(Error::usage("val_frac must lie in [0, 1)"));
        }
        Ok(resolved)
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::CountParams { arch } => {
            println!("{}", count_params_line(arch.parse()?));
            Ok(())
        }
        Command::Summary { arch, json } => {
            let s = summary(&ArchSpec::for_arch(arch.parse()?))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                println!("{s}");
            }
            Ok(())
        }
        Command::Split {
            data,
            seed,
            out,
            val_frac,
        } => {
            let samples = scan_dataset(&data)?;
            let split = stratified_split(&samples, val_frac, seed)?;
            SplitManifest::from_split(&data, &split).save(&out)?;
            println!(
                "{} train / {} validation -> {}",
                split.train.len(),
                split.validation.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            seed,
            epochs,
            arch,
            out_dir,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut rc = RunConfig::from_json(&text)?;
            // flags override the file
            rc.seed = seed.or(rc.seed);
            rc.epochs = epochs.or(rc.epochs);
            if let Some(a) = arch {
                rc.arch = Some(a.parse()?);
            }
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut resolved = rc.resolve(&base)?;
            if let Some(o) = out_dir {
                resolved.out_dir = o;
            }
            let report = train_run(&resolved)?;
            if let Some(m) = &report.metrics {
                println!("validation accuracy {:.2}%", m.accuracy * 100.0);
            }
            println!("outputs in {}", resolved.out_dir.display());
            Ok(())
        }
        Command::Eval {
            weights,
            manifest,
            out,
            roc_csv,
            batch_size,
        } => {
            let network = model_io::load_weights(&weights)?;
            let manifest = SplitManifest::load(&manifest)?;
            let report = eval_manifest(&network, &manifest, batch_size, roc_csv.as_deref())?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                fs::write(&path, json.clone() + "\n").map_err(|e| Error::io(&path, e))?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Gradcheck {
            arch,
            size,
            epsilon,
            seed,
            batch,
        } => {
            let spec = ArchSpec::for_arch(arch.parse()?).with_input_size(size);
            let network = Network::<f64>::init(spec, seed)?;
            let (input, labels) = random_batch(batch, size, seed);
            let report = grad_check(&network, &input, &labels, epsilon)?;
            println!(
                "max relative error {:.3e} over {} parameters",
                report.max_relative_error, report.params_checked
            );
            Ok(())
        }
    }
}

/// `13458 (52.57 KB)`.
pub fn count_params_line(arch: ArchId) -> String {
    let n = count_trainable_params(&ArchSpec::for_arch(arch));
    format!("{n} ({})", format_storage(n))
}

/// Uniform `[0, 1)` images with alternating labels.
pub fn random_batch(batch: usize, size: usize, seed: u64) -> (Tensor4<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let input = Tensor4::from_fn([batch.max(1), size, size, 3], |_, _, _, _| rng.random::<f64>());
    let labels = (0..batch.max(1)).map(|i| i % 2).collect();
    (input, labels)
}

/// Metrics for the validation partition of a manifest.
pub fn eval_manifest(
    network: &Network<f32>,
    manifest: &SplitManifest,
    batch_size: usize,
    roc_csv: Option<&Path>,
) -> Result<MetricsReport> {
    let source = DiskSource::new(&manifest.root, manifest.validation_samples()?, false);
    let preds = evaluate_source(network, &source, batch_size)?;
    let report = MetricsReport::from_predictions(&preds)?;
    if let Some(path) = roc_csv {
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let positives: Vec<bool> = preds.iter().map(|p| p.truth == 0).collect();
        model_io::write_roc_csv(&roc_points(&scores, &positives)?, path)?;
    }
    Ok(report)
}

/// Full training run: resolves the split, trains, writes weights, report,
/// epoch log (JSON lines), loss/ROC CSVs and the split manifest.
pub fn train_run(run: &ResolvedRun) -> Result<RunReport> {
    let manifest = match (&run.manifest, &run.data_root) {
        (Some(m), root) => {
            let mut manifest = SplitManifest::load(m)?;
            if let Some(r) = root {
                manifest.root = r.clone();
            }
            manifest
        }
        (None, Some(root)) => {
            let samples = scan_dataset(root)?;
            let split = stratified_split(&samples, run.val_frac, run.train.seed)?;
            SplitManifest::from_split(root, &split)
        }
        (None, None) => return Err(Error::usage("run config needs data_root or manifest")),
    };
    let train_src = DiskSource::new(&manifest.root, manifest.train_samples()?, run.cache_images);
    let val_src = DiskSource::new(&manifest.root, manifest.validation_samples()?, run.cache_images);
    if train_src.samples().is_empty() {
        return Err(Error::EmptyDataset);
    }

    fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    manifest.save(&run.out_dir.join("split.json"))?;
    let log_path = run.out_dir.join("epochs.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }

    let mut network = Network::<f32>::init(ArchSpec::for_arch(run.train.arch), run.train.seed)?;
    let outcome = fit(
        &mut network,
        &train_src,
        Some(&val_src),
        &run.train,
        &run.augmentation,
        |log| model_io::append_epoch_log(log, &log_path),
    )?;
    model_io::save_weights(&network, run.out_dir.join("weights.ulsq"))?;
    model_io::write_loss_csv(&outcome.logs, run.out_dir.join("loss.csv"))?;

    let metrics = match &outcome.validation {
        Some(preds) if !preds.is_empty() => {
            let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
            let positives: Vec<bool> = preds.iter().map(|p| p.truth == 0).collect();
            let curve = roc_points(&scores, &positives).ok();
            if let Some(c) = &curve {
                model_io::write_roc_csv(c, run.out_dir.join("roc.csv"))?;
            }
            let cm = crate::metrics::confusion_matrix(preds.iter().map(|p| (p.truth, p.predicted)))?;
            Some(MetricsReport::from_confusion(&cm, curve.as_ref().map(auc))?)
        }
        _ => None,
    };
    let report = RunReport::new(run.train.arch, run.train.seed, run, outcome.logs, metrics)?;
    model_io::write_report(&report, run.out_dir.join("report.json"))?;
    Ok(report)
}
