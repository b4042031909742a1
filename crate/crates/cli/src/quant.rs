//! `ternarize`, `validate-rules` and `pack`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde_json::json;
use twn::nn::{Grouping, WeightMode};
use twn::packfmt::{compression_report, pack, LayerRecord, WeightRecord};
use twn::quantizer::{
    binarize_sign, brute_force_oracle, ternarize_exact, ternarize_heuristic, validate_distribution_rule, Distribution,
    TernaryCode, ORACLE_MAX_LEN,
};
use twn::tensor::{DenseTensor, Rng};

use crate::error::{CliError, CliResult};
use crate::manifest::RunDir;
use crate::train::load_model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Exact,
    Heuristic,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dist {
    Uniform,
    Normal,
}

impl From<Dist> for Distribution {
    fn from(d: Dist) -> Self {
        match d {
            Dist::Uniform => Distribution::Uniform,
            Dist::Normal => Distribution::Normal,
        }
    }
}

/// Weights from a file: raw little-endian f32 for `.f32` files, otherwise
/// numbers separated by whitespace or commas.
pub fn read_weights(path: &Path) -> CliResult<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
    let weights: Vec<f32> = if path.extension().is_some_and(|e| e == "f32") {
        if bytes.len() % 4 != 0 {
            return Err(CliError::usage(format!(
                "{}: {} bytes is not a whole number of f32 values",
                path.display(),
                bytes.len()
            )));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    } else {
        let text = String::from_utf8(bytes).map_err(|e| CliError::input(path, e))?;
        text.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f32>()
                    .map_err(|_| CliError::usage(format!("{}: not a number: {t:?}", path.display())))
            })
            .collect::<CliResult<_>>()?
    };
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(CliError::usage(format!("{}: weight {i} is not finite", path.display())));
    }
    Ok(weights)
}

pub struct TernarizeArgs {
    pub input: Option<PathBuf>,
    pub random: Option<usize>,
    pub seed: u64,
    pub dist: Dist,
    pub param: f32,
    pub method: Method,
}

fn code_values(codes: &[TernaryCode]) -> Vec<i8> {
    codes.iter().map(|c| c.value()).collect()
}

pub fn cmd_ternarize(args: &TernarizeArgs, run: &mut RunDir) -> CliResult<serde_json::Value> {
    let (weights, source) = match (&args.input, args.random) {
        (Some(path), None) => {
            let w = read_weights(path)?;
            run.add_input(path, &w.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>());
            (w, json!({ "file": path }))
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(CliError::usage("--random needs a positive length"));
            }
            if !(args.param > 0.0 && args.param.is_finite()) {
                return Err(CliError::usage("--param must be positive"));
            }
            run.set_seed(args.seed);
            let dist = Distribution::from(args.dist);
            let w = dist.sample(&mut Rng::new(args.seed), n, args.param)?;
            (
                w.into_data(),
                json!({ "random": n, "seed": args.seed, "dist": dist, "param": args.param }),
            )
        }
        _ => return Err(CliError::usage("give exactly one of --in or --random")),
    };
    if args.method == Method::Oracle && weights.len() > ORACLE_MAX_LEN {
        return Err(CliError::usage(format!(
            "the oracle enumerates 3^n patterns and is limited to n <= {ORACLE_MAX_LEN}; got n = {}",
            weights.len()
        )));
    }
    let (alpha, delta, codes, objective) = match args.method {
        Method::Exact => {
            let s = ternarize_exact(&weights)?;
            (s.alpha, Some(s.delta), s.codes, s.objective)
        }
        Method::Heuristic => {
            let s = ternarize_heuristic(&weights)?;
            (s.alpha, Some(s.delta), s.codes, s.objective)
        }
        Method::Oracle => {
            let s = brute_force_oracle(&weights)?;
            (s.alpha, None, s.codes, s.objective)
        }
    };
    let nonzero = codes.iter().filter(|&&c| c != TernaryCode::Zero).count();
    eprintln!(
        "{:?}: n = {}  alpha = {alpha:.6}  delta = {}  J = {objective:.6e}  nonzero = {nonzero}",
        args.method,
        weights.len(),
        delta.map_or("-".to_string(), |d| format!("{d:.6}")),
    );
    Ok(json!({
        "method": format!("{:?}", args.method).to_lowercase(),
        "source": source,
        "n": weights.len(),
        "alpha": alpha,
        "delta": delta,
        "objective": objective,
        "nonzero": nonzero,
        "codes": code_values(&codes),
    }))
}

pub struct RulesArgs {
    pub dist: Dist,
    pub n: usize,
    pub seed: u64,
    pub param: f32,
}

/// Allowed distance of the exact threshold from the closed-form rule, in
/// units of the distribution parameter.
pub fn rule_tolerance(dist: Distribution) -> f64 {
    match dist {
        Distribution::Uniform => 0.02,
        Distribution::Normal => 0.03,
    }
}

pub fn cmd_validate_rules(args: &RulesArgs, run: &mut RunDir) -> CliResult<serde_json::Value> {
    if !(args.param > 0.0 && args.param.is_finite()) {
        return Err(CliError::usage("--param must be positive"));
    }
    run.set_seed(args.seed);
    let dist = Distribution::from(args.dist);
    let report = validate_distribution_rule(dist, args.param, args.n, &mut Rng::new(args.seed))?;
    let tolerance = rule_tolerance(dist) * f64::from(args.param);
    let deviation = (report.delta_exact - report.delta_predicted).abs();
    let within = deviation <= tolerance;
    eprintln!(
        "{dist:?}(param {}): exact delta {:.4}, rule {:.4}, heuristic {:.4}, J ratio {:.4} -> {}",
        args.param,
        report.delta_exact,
        report.delta_predicted,
        report.delta_heuristic,
        report.objective_ratio,
        if within { "within tolerance" } else { "OUTSIDE tolerance" }
    );
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["deviation"] = json!(deviation);
    value["tolerance"] = json!(tolerance);
    value["within_tolerance"] = json!(within);
    Ok(value)
}

pub struct PackArgs {
    pub model: PathBuf,
    pub mode: WeightMode,
    pub method: Method,
    pub grouping: Option<Grouping>,
}

fn quantize_groups(weights: &[f32], group_size: usize, mode: WeightMode, method: Method) -> CliResult<(Vec<TernaryCode>, Vec<f32>)> {
    let mut codes = Vec::with_capacity(weights.len());
    let mut alphas = Vec::new();
    for chunk in weights.chunks(group_size) {
        let (c, a) = match (mode, method) {
            (WeightMode::Binary, _) => {
                let s = binarize_sign(chunk)?;
                (s.codes, s.alpha)
            }
            (_, Method::Heuristic) => {
                let s = ternarize_heuristic(chunk)?;
                (s.codes, s.alpha)
            }
            (_, Method::Exact) => {
                let s = ternarize_exact(chunk)?;
                (s.codes, s.alpha)
            }
            (_, Method::Oracle) => unreachable!("rejected before packing"),
        };
        codes.extend(c);
        alphas.push(a);
    }
    Ok((codes, alphas))
}

fn pack_weight(
    weight: &DenseTensor,
    mode: WeightMode,
    method: Method,
    grouping: Grouping,
) -> CliResult<WeightRecord> {
    let dims = weight.shape().dims();
    let group_size = match grouping {
        Grouping::PerOutput => weight.len() / dims[0].max(1),
        Grouping::PerLayer => weight.len(),
    };
    let (codes, alphas) = quantize_groups(weight.data(), group_size.max(1), mode, method)?;
    Ok(WeightRecord::Packed(pack(weight.shape(), &codes, &alphas, group_size.max(1))?))
}

/// Post-training quantization of a full-precision model file.
pub fn cmd_pack(args: &PackArgs, run: &mut RunDir) -> CliResult<serde_json::Value> {
    if args.mode == WeightMode::Full {
        return Err(CliError::usage("--mode must be ternary or binary"));
    }
    if args.method == Method::Oracle {
        return Err(CliError::usage("pack supports --method exact or heuristic"));
    }
    let mut model = load_model(&args.model, Some(run))?;
    let mut converted = 0;
    for layer in &mut model.layers {
        let (mode, weight, default) = match layer {
            LayerRecord::Conv { mode, weight, .. } => (mode, weight, Grouping::PerOutput),
            LayerRecord::Dense { mode, weight, .. } => (mode, weight, Grouping::PerLayer),
            _ => continue,
        };
        if let WeightRecord::Raw(w) = weight {
            *weight = pack_weight(w, args.mode, args.method, args.grouping.unwrap_or(default))?;
            *mode = args.mode;
            converted += 1;
        }
    }
    let report = compression_report(&model)?;
    let bytes = model.to_bytes();
    run.write(crate::train::MODEL_NAME, &bytes, false)?;
    eprintln!(
        "packed {converted} layer(s): {} weights, {} -> {} bytes ({:.2}x)",
        report.weights, report.fp32_bytes, report.packed_bytes, report.ratio
    );
    Ok(json!({
        "model": crate::train::MODEL_NAME,
        "converted_layers": converted,
        "compression": report,
    }))
}
