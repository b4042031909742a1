//! `bench`, `compare` and `inspect`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde_json::json;
use twn::kernels::{bench, BenchKernel, BenchResult, BENCH_CSV_HEADER};
use twn::packfmt::{compression_report, LayerRecord, PackError, WeightRecord};
use twn::quantizer::TernaryCode;
use twn::trainer::TrainReport;

use crate::error::{CliError, CliResult};
use crate::manifest::RunDir;
use crate::train::load_model;

pub struct BenchArgs {
    pub kernel: Option<String>,
    pub sizes: Option<Vec<usize>>,
    pub reps: usize,
    pub zero_fraction: f64,
    pub seed: u64,
}

pub fn default_sizes(kernel: BenchKernel) -> Vec<usize> {
    match kernel {
        BenchKernel::TernaryDot | BenchKernel::ReferenceDot => vec![4096],
        BenchKernel::TernaryMatmul | BenchKernel::ReferenceMatmul => vec![1, 256, 256],
        BenchKernel::TernaryConv | BenchKernel::ReferenceConv => vec![1, 16, 28, 28, 32, 5],
    }
}

fn bench_json(r: &BenchResult) -> serde_json::Value {
    json!({
        "kernel": r.kernel.name(),
        "shape": r.shape,
        "ns_per_call": r.ns_per_call,
        "accumulate_ops": r.accumulate_ops,
        "multiply_ops": r.multiply_ops,
        "inner_multiply_ops": r.inner_multiply_ops,
    })
}

pub fn cmd_bench(args: &BenchArgs, run: &mut RunDir) -> CliResult<serde_json::Value> {
    if !(0.0..=1.0).contains(&args.zero_fraction) {
        return Err(CliError::usage("--zero-fraction must be in [0, 1]"));
    }
    let kernels = match args.kernel.as_deref() {
        None | Some("all") => BenchKernel::ALL.to_vec(),
        Some(name) => vec![name.parse::<BenchKernel>()?],
    };
    if args.sizes.is_some() && kernels.len() != 1 {
        return Err(CliError::usage("--sizes needs a single --kernel"));
    }
    run.set_seed(args.seed);
    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    let mut rows = Vec::new();
    for kernel in kernels {
        let sizes = args.sizes.clone().unwrap_or_else(|| default_sizes(kernel));
        let r = bench(kernel, &sizes, args.reps, args.zero_fraction, args.seed)?;
        eprintln!("{}", r.csv_row());
        csv.push_str(&r.csv_row());
        csv.push('\n');
        rows.push(bench_json(&r));
    }
    run.write("bench.csv", csv.as_bytes(), true)?;
    Ok(json!({ "zero_fraction": args.zero_fraction, "repetitions": args.reps, "results": rows }))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Accuracy used for ranking: test accuracy when every report has one.
fn headline(reports: &[TrainReport]) -> (&'static str, Vec<f64>) {
    if reports.iter().all(|r| r.test_acc.is_some()) {
        ("test", reports.iter().map(|r| r.test_acc.unwrap_or(0.0)).collect())
    } else {
        ("val", reports.iter().map(|r| r.best_val_acc).collect())
    }
}

fn mean_for(reports: &[TrainReport], acc: &[f64], label: &str) -> Option<f64> {
    let v: Vec<f64> = reports
        .iter()
        .zip(acc)
        .filter(|(r, _)| r.network == label)
        .map(|(_, &a)| a)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub struct CompareOutput {
    pub table: String,
    pub json: serde_json::Value,
}

pub fn cmd_compare(paths: &[PathBuf], run: &mut RunDir) -> CliResult<CompareOutput> {
    if paths.is_empty() {
        return Err(CliError::usage("compare needs at least one report"));
    }
    let mut reports = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        run.add_input(path, text.as_bytes());
        reports.push(TrainReport::from_json(&text).map_err(|e| CliError::input(path, e))?);
    }
    let (basis, acc) = headline(&reports);

    let mut warnings = Vec::new();
    let distinct = |f: &dyn Fn(&TrainReport) -> Option<String>| -> BTreeSet<Option<String>> { reports.iter().map(f).collect() };
    for (what, tags) in [
        ("training", distinct(&|r| Some(r.train_tag.clone()))),
        ("validation", distinct(&|r| Some(r.val_tag.clone()))),
        ("test", distinct(&|r| r.test_tag.clone())),
    ] {
        if tags.len() > 1 {
            let list: Vec<String> = tags.into_iter().map(|t| t.unwrap_or_else(|| "-".into())).collect();
            warnings.push(format!("reports use different {what} data: {}", list.join(", ")));
        }
    }
    let twn = mean_for(&reports, &acc, "TWN");
    let bpwn = mean_for(&reports, &acc, "BPWN");
    let ordering = match (twn, bpwn) {
        (Some(t), Some(b)) => {
            if t < b {
                warnings.push(format!(
                    "expected TWN >= BPWN, got TWN {} < BPWN {} ({basis} accuracy)",
                    pct(t),
                    pct(b)
                ));
            }
            Some(t >= b)
        }
        _ => None,
    };

    let mut order: Vec<usize> = (0..reports.len()).collect();
    let rank = |label: &str| match label {
        "FPWN" => 0,
        "TWN" => 1,
        "BPWN" => 2,
        _ => 3,
    };
    order.sort_by_key(|&i| (rank(&reports[i].network), reports[i].config.seed));

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<7} {:>6} {:>6} {:>10} {:>10} {:>10}  train data",
        "network", "seed", "epochs", "best_epoch", "val_acc %", "test_acc %"
    );
    let mut rows = Vec::new();
    for &i in &order {
        let r = &reports[i];
        let _ = writeln!(
            table,
            "{:<7} {:>6} {:>6} {:>10} {:>10} {:>10}  {}",
            r.network,
            r.config.seed,
            r.epochs.len(),
            r.best_epoch,
            pct(r.best_val_acc),
            r.test_acc.map_or("-".into(), pct),
            r.train_tag
        );
        rows.push(json!({
            "report": paths[i],
            "network": r.network,
            "seed": r.config.seed,
            "epochs": r.epochs.len(),
            "best_epoch": r.best_epoch,
            "best_val_acc": r.best_val_acc,
            "test_acc": r.test_acc,
            "train_tag": r.train_tag,
        }));
    }
    for w in &warnings {
        let _ = writeln!(table, "warning: {w}");
    }
    Ok(CompareOutput {
        table,
        json: json!({
            "basis": basis,
            "rows": rows,
            "twn_ge_bpwn": ordering,
            "warnings": warnings,
        }),
    })
}

pub struct InspectOutput {
    pub text: String,
    pub json: serde_json::Value,
}

fn alpha_summary(alphas: &[f32]) -> (f32, f32, f64) {
    let min = alphas.iter().copied().fold(f32::INFINITY, f32::min);
    let max = alphas.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mean = alphas.iter().map(|&a| f64::from(a)).sum::<f64>() / alphas.len().max(1) as f64;
    (min, max, mean)
}

pub fn cmd_inspect(path: &PathBuf, run: &mut RunDir) -> CliResult<InspectOutput> {
    let model = load_model(path, Some(run))?;
    let mut text = String::new();
    let _ = writeln!(text, "{}: input {:?}, {} layers", path.display(), model.input_dims, model.layers.len());
    let mut layers = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let mut entry = json!({ "index": i, "kind": layer.kind() });
        let mut line = format!("{i:>3} {:<8}", layer.kind());
        match layer {
            LayerRecord::Conv { mode, weight, .. } | LayerRecord::Dense { mode, weight, .. } => {
                entry["mode"] = json!(mode);
                entry["shape"] = json!(weight.shape().dims());
                let _ = write!(line, " {:<8} {:<16}", mode.name(), format!("{}", weight.shape()));
                if let WeightRecord::Packed(p) = weight {
                    let codes = p.codes()?;
                    let zeros = codes.iter().filter(|&&c| c == TernaryCode::Zero).count();
                    let zero_fraction = zeros as f64 / codes.len().max(1) as f64;
                    let (min, max, mean) = alpha_summary(&p.alphas);
                    entry["groups"] = json!(p.groups);
                    entry["group_size"] = json!(p.group_size);
                    entry["alphas"] = json!(p.alphas);
                    entry["zero_fraction"] = json!(zero_fraction);
                    let _ = write!(
                        line,
                        " groups {:<4} alpha min {min:.4} mean {mean:.4} max {max:.4}  zeros {:.1}%",
                        p.groups,
                        100.0 * zero_fraction
                    );
                }
            }
            LayerRecord::MaxPool { size, stride } => {
                entry["size"] = json!(size);
                entry["stride"] = json!(stride);
                let _ = write!(line, " size {size} stride {stride}");
            }
            LayerRecord::BatchNorm { gamma, eps, .. } => {
                entry["channels"] = json!(gamma.len());
                entry["eps"] = json!(eps);
                let _ = write!(line, " channels {}", gamma.len());
            }
            _ => {}
        }
        let _ = writeln!(text, "{line}");
        layers.push(entry);
    }
    let compression = match compression_report(&model) {
        Ok(r) => {
            let _ = writeln!(
                text,
                "packed weights: {} ({} B fp32 -> {} B packed, {:.4}x; {:.4}x vs fp64)",
                r.weights, r.fp32_bytes, r.packed_bytes, r.ratio, r.ratio_vs_fp64
            );
            let _ = writeln!(
                text,
                "file: {} B = {} B packed + {} B float side data + {} B header",
                r.file_bytes, r.packed_bytes, r.float_side_bytes, r.header_bytes
            );
            serde_json::to_value(&r).expect("report serializes")
        }
        Err(PackError::NoPackedLayers) => {
            let _ = writeln!(text, "no packed layers (full-precision model)");
            serde_json::Value::Null
        }
        Err(e) => return Err(e.into()),
    };
    Ok(InspectOutput {
        text,
        json: json!({
            "model": path,
            "input_dims": model.input_dims,
            "layers": layers,
            "compression": compression,
        }),
    })
}
