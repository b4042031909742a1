//! `train` and `infer`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use twn::data::{balanced_split, load_mnist, synth_blobs, DataError, Dataset};
use twn::nn::{Network, WeightMode};
use twn::packfmt::ModelFile;
use twn::trainer::{evaluate, train, TrainError};

use crate::config::{parse_config, DataSpec, NetConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::RunDir;

pub const MODEL_NAME: &str = "model.twn";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
const EVAL_BATCH: usize = 500;

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Default MNIST location: `$TWN_MNIST_DIR`, else `data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("TWN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn load_mnist_dir(dir: &Path) -> CliResult<twn::data::Mnist> {
    load_mnist(dir).map_err(|e| match e {
        DataError::Missing { .. } => CliError::usage(format!(
            "{e}\nfetch MNIST with scripts/fetch_mnist.sh, or point --data or TWN_MNIST_DIR at the IDX files"
        )),
        other => other.into(),
    })
}

pub fn load_splits(spec: &DataSpec, seed: u64, mnist_dir: &Path) -> CliResult<Splits> {
    match *spec {
        DataSpec::Mnist {
            train_per_class,
            val_per_class,
        } => {
            let mnist = load_mnist_dir(mnist_dir)?;
            let (train, val) = balanced_split(&mnist.train, train_per_class, val_per_class, seed)?;
            Ok(Splits {
                train,
                val,
                test: mnist.test,
            })
        }
        DataSpec::Blobs {
            classes,
            train_per_class,
            val_per_class,
            test_per_class,
            dims,
            separation,
        } => {
            let split = |per_class, offset: u64, name: &str| -> CliResult<Dataset> {
                let mut d = synth_blobs(classes, per_class, dims, separation, seed.wrapping_add(offset))?;
                d.tag = format!("{}/{name}-seed{seed}", d.tag);
                Ok(d)
            };
            Ok(Splits {
                train: split(train_per_class, 0, "train")?,
                val: split(val_per_class, 1, "val")?,
                test: split(test_per_class, 2, "test")?,
            })
        }
    }
}

pub fn read_config(path: &Path) -> CliResult<(String, NetConfig)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    let config = parse_config(&text)?;
    Ok((text, config))
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub mode: Option<WeightMode>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub data: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs, run: &mut RunDir) -> CliResult<serde_json::Value> {
    let (text, mut config) = read_config(&args.config)?;
    run.set_config(&args.config, &text);
    if let Some(mode) = args.mode {
        config.train.weight_mode = mode;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    config.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    run.set_seed(config.train.seed);

    let network = config
        .train
        .build_network(&config.input_dims, &config.layers)
        .map_err(|e| CliError::usage(format!("cannot build network from {}: {e}", args.config.display())))?;
    let mnist_dir = args.data.clone().unwrap_or_else(default_mnist_dir);
    let splits = load_splits(&config.data, config.train.seed, &mnist_dir)?;

    let checkpoint = run.path(MODEL_NAME);
    let outcome = train(network, &splits.train, &splits.val, &config.train, Some(&checkpoint))?;
    let mut report = outcome.report;
    let test = evaluate(&outcome.best, &splits.test, EVAL_BATCH)?;
    report.test_acc = Some(test.accuracy());
    report.test_tag = Some(splits.test.tag.clone());
    report.model_path = Some(PathBuf::from(MODEL_NAME));

    run.record_existing(MODEL_NAME)?;
    run.write(REPORT_JSON, (report.to_json() + "\n").as_bytes(), true)?;
    run.write(REPORT_CSV, report.to_csv().as_bytes(), false)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.5}  train {:.2}%  val {:.2}%  lr {}",
            e.epoch,
            e.loss,
            100.0 * e.train_acc,
            100.0 * e.val_acc,
            e.lr
        );
    }
    Ok(json!({
        "network": report.network,
        "weight_mode": config.train.weight_mode,
        "seed": config.train.seed,
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "best_val_acc": report.best_val_acc,
        "test_acc": test.accuracy(),
        "test_correct": test.correct,
        "test_total": test.total,
        "train_tag": report.train_tag,
        "test_tag": splits.test.tag,
        "model": MODEL_NAME,
        "report": REPORT_JSON,
    }))
}

pub struct InferArgs {
    pub model: PathBuf,
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub batch: usize,
}

pub fn load_model(path: &Path, run: Option<&mut RunDir>) -> CliResult<ModelFile> {
    let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
    if let Some(run) = run {
        run.add_input(path, &bytes);
    }
    ModelFile::from_bytes(&bytes).map_err(|e| CliError::input(path, e))
}

pub fn cmd_infer(args: &InferArgs, run: &mut RunDir) -> CliResult<serde_json::Value> {
    if args.batch == 0 {
        return Err(CliError::usage("--batch must be positive"));
    }
    let model = load_model(&args.model, Some(run))?;
    let network = Network::from_model_file(&model).map_err(|e| CliError::input(&args.model, e))?;
    let mnist_dir = args.data.clone().unwrap_or_else(default_mnist_dir);
    let (spec, seed) = match &args.config {
        Some(path) => {
            let (text, config) = read_config(path)?;
            run.set_config(path, &text);
            (config.data, args.seed.unwrap_or(config.train.seed))
        }
        None => (DataSpec::default(), args.seed.unwrap_or(1)),
    };
    run.set_seed(seed);
    let test = match spec {
        // the test split does not depend on the seed; skip the training split
        DataSpec::Mnist { .. } => load_mnist_dir(&mnist_dir)?.test,
        blobs => load_splits(&blobs, seed, &mnist_dir)?.test,
    };
    let start = Instant::now();
    let eval = evaluate(&network, &test, args.batch).map_err(|e| match e {
        TrainError::DatasetMismatch(m) => CliError::usage(format!("model does not fit the data: {m}")),
        other => other.into(),
    })?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(json!({
        "model": args.model,
        "network": twn::trainer::network_label(&network),
        "data_tag": test.tag,
        "batch": args.batch,
        "correct": eval.correct,
        "total": eval.total,
        "accuracy": eval.accuracy(),
        "seconds": seconds,
        "microseconds_per_example": 1e6 * seconds / eval.total.max(1) as f64,
    }))
}
