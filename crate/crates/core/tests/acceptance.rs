//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The MNIST criteria read IDX files from `$TWN_MNIST_DIR`, falling back to
//! `data/mnist` at the workspace root (see `scripts/fetch_mnist.sh`).

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use twn::data::{balanced_split, load_mnist, Mnist};
use twn::kernels::{
    reference_conv2d, reference_dot, reference_matmul, ternary_conv2d, ternary_dot, ternary_matmul, OpCounts,
    TernaryWeights,
};
use twn::nn::gradcheck::{check_all_layers, FD_EPS, FD_REL_TOL, FD_SAMPLES};
use twn::nn::{lenet_small, WeightMode};
use twn::packfmt::{compression_report, pack, unpack, LayerRecord, ModelFile, PackError, PackedTernaryTensor, WeightRecord};
use twn::quantizer::{
    brute_force_oracle, ternarize_exact, ternarize_heuristic, template_count, validate_distribution_rule,
    Distribution, TernaryCode,
};
use twn::tensor::{DenseTensor, Rng, Shape};
use twn::trainer::{evaluate, train, TrainConfig};

// 1
const ORACLE_TRIALS: usize = 500;
const ORACLE_MAX_N: usize = 8;
const ORACLE_TOL: f64 = 1e-6;
const ORACLE_BUDGET_S: f64 = 10.0;
// 2
const RULE_N: usize = 100_000;
const UNIFORM_DELTA: (f64, f64) = (1.0 / 3.0, 0.02);
const NORMAL_DELTA: (f64, f64) = (0.6, 0.03);
const RULE_BUDGET_S: f64 = 5.0;
// 3
const HEURISTIC_TRIALS: usize = 1000;
const HEURISTIC_N: usize = 1000;
const HEURISTIC_RATIO: f64 = 1.05;
const HEURISTIC_SHARE: f64 = 0.95;
const HEURISTIC_BUDGET_S: f64 = 30.0;
// 4
const KERNEL_TRIALS: usize = 200;
const KERNEL_REL_TOL: f64 = 1e-5;
// 5
const PACK_TRIALS: usize = 1000;
// 6
const COMPRESSION_WEIGHTS: usize = 1_000_000;
const COMPRESSION_RANGE: (f64, f64) = (15.9, 16.0);
// 8
const MNIST_SEEDS: [u64; 3] = [1, 2, 3];
const MNIST_TRAIN_PER_CLASS: usize = 500;
const MNIST_VAL_PER_CLASS: usize = 100;
const MNIST_EPOCHS: usize = 10;
const FPWN_MIN: f64 = 0.96;
const TWN_MIN: f64 = 0.95;
const MAX_GAP_POINTS: f64 = 2.0;
const MNIST_BUDGET_S: f64 = 15.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: u32, name: &str, started: Instant, outcome: Outcome) -> bool {
    println!(
        "[{}] {id:>2} {name}: {} ({:.1}s)",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    outcome.pass
}

fn sample(rng: &mut Rng, n: usize, dist: Distribution) -> Vec<f32> {
    dist.sample(rng, n, 1.0).unwrap().into_data()
}

fn exact_vs_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for trial in 0..ORACLE_TRIALS {
        let n = 1 + rng.below(ORACLE_MAX_N as u64) as usize;
        let dist = if trial % 2 == 0 { Distribution::Normal } else { Distribution::Uniform };
        let w = sample(&mut rng, n, dist);
        let exact = ternarize_exact(&w).unwrap();
        let oracle = brute_force_oracle(&w).unwrap();
        worst = worst.max((exact.objective - oracle.objective).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worst <= ORACLE_TOL && secs < ORACLE_BUDGET_S,
        format!("{ORACLE_TRIALS} vectors, max |J_exact - J_oracle| = {worst:.2e} (tol {ORACLE_TOL:e}), {secs:.2}s (budget {ORACLE_BUDGET_S}s)"),
    )
}

fn distribution_rules() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(2);
    let u = validate_distribution_rule(Distribution::Uniform, 1.0, RULE_N, &mut rng).unwrap();
    let g = validate_distribution_rule(Distribution::Normal, 1.0, RULE_N, &mut rng).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let u_ok = (u.delta_exact - UNIFORM_DELTA.0).abs() <= UNIFORM_DELTA.1;
    let g_ok = (g.delta_exact - NORMAL_DELTA.0).abs() <= NORMAL_DELTA.1;
    Outcome::new(
        u_ok && g_ok && secs < RULE_BUDGET_S,
        format!(
            "uniform[-1,1] delta* = {:.4} (want {:.3} +- {}), N(0,1) delta* = {:.4} (want {} +- {}), {secs:.2}s",
            u.delta_exact, UNIFORM_DELTA.0, UNIFORM_DELTA.1, g.delta_exact, NORMAL_DELTA.0, NORMAL_DELTA.1
        ),
    )
}

fn heuristic_quality() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(3);
    let mut good = 0;
    let mut worst = 1.0f64;
    for _ in 0..HEURISTIC_TRIALS {
        let w = sample(&mut rng, HEURISTIC_N, Distribution::Normal);
        let ratio = ternarize_heuristic(&w).unwrap().objective / ternarize_exact(&w).unwrap().objective;
        worst = worst.max(ratio);
        if ratio <= HEURISTIC_RATIO {
            good += 1;
        }
    }
    let share = good as f64 / HEURISTIC_TRIALS as f64;
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        share >= HEURISTIC_SHARE && secs < HEURISTIC_BUDGET_S,
        format!(
            "{good}/{HEURISTIC_TRIALS} trials with J_heur/J_exact <= {HEURISTIC_RATIO} (need {:.0}%), worst ratio {worst:.4}",
            HEURISTIC_SHARE * 100.0
        ),
    )
}

fn random_codes(rng: &mut Rng, n: usize, zero_fraction: f64) -> Vec<TernaryCode> {
    (0..n)
        .map(|_| {
            if rng.next_f64() < zero_fraction {
                TernaryCode::Zero
            } else if rng.next_u64() & 1 == 0 {
                TernaryCode::Pos
            } else {
                TernaryCode::Neg
            }
        })
        .collect()
}

fn random_tensor(rng: &mut Rng, dims: &[usize]) -> DenseTensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let v = (0..shape.numel()).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
    DenseTensor::from_vec(shape, v).unwrap()
}

/// Per-row ternary weights with positive scales.
fn random_weights(rng: &mut Rng, dims: &[usize]) -> TernaryWeights {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let rows = dims[0];
    let row = shape.numel() / rows;
    let zero_fraction = rng.next_f64();
    TernaryWeights {
        codes: random_codes(rng, shape.numel(), zero_fraction),
        alphas: (0..rows).map(|_| 0.05 + rng.next_f32()).collect(),
        group_size: row,
        shape,
    }
}

/// Normwise: `max |t - r| / max |r|`.
fn rel_err(t: &[f32], r: &[f32]) -> f64 {
    let scale = r.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let diff = t
        .iter()
        .zip(r)
        .fold(0.0f64, |m, (&a, &b)| m.max((f64::from(a) - f64::from(b)).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn kernel_equivalence() -> Outcome {
    let mut rng = Rng::new(4);
    let (mut worst, mut inner_mults) = ([0.0f64; 3], [0u64; 3]);
    let mut naive_dot = 0.0f64;
    for _ in 0..KERNEL_TRIALS {
        // dot
        let n = 1 + rng.below(4096) as usize;
        let w = random_weights(&mut rng, &[1, n]);
        let x = random_tensor(&mut rng, &[n]);
        let mut c = OpCounts::default();
        let t = ternary_dot(x.data(), &w.codes, w.alphas[0], &mut c).unwrap();
        let wq = w.dequantize();
        let r = reference_dot(x.data(), &wq, &mut OpCounts::default()).unwrap();
        let magnitude: f64 = x.data().iter().zip(&wq).map(|(&a, &b)| (f64::from(a) * f64::from(b)).abs()).sum();
        let diff = (f64::from(t) - f64::from(r)).abs();
        worst[0] = worst[0].max(if magnitude == 0.0 { diff } else { diff / magnitude });
        naive_dot = naive_dot.max(rel_err(&[t], &[r]));
        inner_mults[0] += c.inner_multiply;

        // matmul
        let (b, o, i) = (1 + rng.below(16) as usize, 1 + rng.below(64) as usize, 1 + rng.below(256) as usize);
        let w = random_weights(&mut rng, &[o, i]);
        let x = random_tensor(&mut rng, &[b, i]);
        let bias: Vec<f32> = (0..o).map(|_| rng.next_f32() - 0.5).collect();
        let mut c = OpCounts::default();
        let t = ternary_matmul(&x, w.view(), &bias, &mut c).unwrap();
        let wd = DenseTensor::from_vec(w.shape.clone(), w.dequantize()).unwrap();
        let r = reference_matmul(&x, &wd, &bias, &mut OpCounts::default()).unwrap();
        worst[1] = worst[1].max(rel_err(t.data(), r.data()));
        inner_mults[1] += c.inner_multiply;

        // conv
        let k = 1 + 2 * rng.below(3) as usize;
        let (cin, cout) = (1 + rng.below(4) as usize, 1 + rng.below(8) as usize);
        let (h, wd_) = (k + rng.below(10) as usize, k + rng.below(10) as usize);
        let stride = 1 + rng.below(2) as usize;
        let pad = rng.below(k as u64 / 2 + 1) as usize;
        let w = random_weights(&mut rng, &[cout, cin, k, k]);
        let batch = 1 + rng.below(3) as usize;
        let x = random_tensor(&mut rng, &[batch, cin, h, wd_]);
        let bias: Vec<f32> = (0..cout).map(|_| rng.next_f32() - 0.5).collect();
        let mut c = OpCounts::default();
        let t = ternary_conv2d(&x, w.view(), &bias, stride, pad, &mut c).unwrap();
        let wd = DenseTensor::from_vec(w.shape.clone(), w.dequantize()).unwrap();
        let r = reference_conv2d(&x, &wd, &bias, stride, pad, &mut OpCounts::default()).unwrap();
        worst[2] = worst[2].max(rel_err(t.data(), r.data()));
        inner_mults[2] += c.inner_multiply;
    }
    let pass = worst.iter().all(|&e| e <= KERNEL_REL_TOL) && inner_mults.iter().all(|&m| m == 0);
    Outcome::new(
        pass,
        format!(
            "{KERNEL_TRIALS} instances each, max rel err dot {:.1e} / matmul {:.1e} / conv {:.1e} (tol {KERNEL_REL_TOL:e}; dot against sum |a*c*x|, |t-r|/|r| would be {:.1e}), inner multiplies {:?}",
            worst[0], worst[1], worst[2], naive_dot, inner_mults
        ),
    )
}

fn pack_round_trip() -> Outcome {
    let mut rng = Rng::new(5);
    let (mut round_trips, mut rejected, mut slots) = (0, 0, 0);
    for _ in 0..PACK_TRIALS {
        let rank = 1 + rng.below(4) as usize;
        let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6) as usize).collect();
        let shape = Shape::new(dims).unwrap();
        let n = shape.numel();
        let divisors: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
        let group_size = divisors[rng.below(divisors.len() as u64) as usize];
        let zero_fraction = rng.next_f64();
        let codes = random_codes(&mut rng, n, zero_fraction);
        let alphas: Vec<f32> = (0..n / group_size).map(|_| rng.next_f32() * 3.0).collect();
        let packed = pack(&shape, &codes, &alphas, group_size).unwrap();
        let (c2, a2) = unpack(&packed).unwrap();
        let bits_equal = a2.iter().zip(&alphas).all(|(x, y)| x.to_bits() == y.to_bits());
        if c2 == codes && bits_equal && a2.len() == alphas.len() {
            round_trips += 1;
        }
        for i in 0..n {
            let mut bits = packed.bits.clone();
            let (group, offset) = (i / group_size, i % group_size);
            let byte = group * group_size.div_ceil(4) + offset / 4;
            bits[byte] |= 0b11 << (2 * (offset % 4));
            slots += 1;
            let r = PackedTernaryTensor::from_parts(shape.clone(), group_size, alphas.clone(), bits);
            if matches!(r, Err(PackError::InvalidCode { .. })) {
                rejected += 1;
            }
        }
    }

    let golden = ModelFile::load(Path::new(common::GOLDEN_PATH));
    let golden_ok = matches!(&golden, Ok(m) if *m == common::golden_model());
    let pass = round_trips == PACK_TRIALS && rejected == slots && golden_ok;
    Outcome::new(
        pass,
        format!(
            "{round_trips}/{PACK_TRIALS} bit-exact round trips, {rejected}/{slots} injected 11 slots rejected, golden file {}",
            if golden_ok { "matches" } else { "MISMATCH" }
        ),
    )
}

fn compression() -> Outcome {
    let mut rng = Rng::new(6);
    let shape = Shape::new([1000, COMPRESSION_WEIGHTS / 1000]).unwrap();
    let codes = random_codes(&mut rng, COMPRESSION_WEIGHTS, 0.4);
    let packed = pack(&shape, &codes, &[0.5], COMPRESSION_WEIGHTS).unwrap();
    let model = ModelFile {
        input_dims: vec![COMPRESSION_WEIGHTS / 1000],
        layers: vec![LayerRecord::Dense {
            mode: WeightMode::Ternary,
            weight: WeightRecord::Packed(packed),
            bias: DenseTensor::zeros(Shape::new([1000]).unwrap()),
        }],
    };
    let r = compression_report(&model).unwrap();
    let pass = (COMPRESSION_RANGE.0..=COMPRESSION_RANGE.1).contains(&r.ratio);
    Outcome::new(
        pass,
        format!(
            "{} weights: fp32 {} B / payload {} B = {:.4}x (want [{}, {}]); header {} B and float-side {} B reported separately, file {} B",
            r.weights,
            r.fp32_bytes,
            r.packed_bytes,
            r.ratio,
            COMPRESSION_RANGE.0,
            COMPRESSION_RANGE.1,
            r.header_bytes,
            r.float_side_bytes,
            r.file_bytes
        ),
    )
}

fn gradient_checks() -> Outcome {
    let checks = check_all_layers(7);
    let pass = checks.iter().all(|c| c.passed() && c.checked >= FD_SAMPLES);
    let summary: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {}/{} {:.1e}", c.layer, c.checked - c.failures, c.checked, c.max_rel_err))
        .collect();
    Outcome::new(
        pass,
        format!("eps {FD_EPS:e}, rel tol {FD_REL_TOL:e}, >= {FD_SAMPLES} coords each: {}", summary.join(", ")),
    )
}

fn template_counts() -> Outcome {
    let s = Shape::new([3, 3]).unwrap();
    let (t, b) = (template_count(&s, 3).unwrap(), template_count(&s, 2).unwrap());
    Outcome::new(
        t == 19683u32.into() && b == 512u32.into(),
        format!("3x3 ternary {t} (want 19683), binary {b} (want 512)"),
    )
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("TWN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct MnistRun {
    test_acc: f64,
    losses: Vec<f64>,
}

fn mnist_run(mnist: &Mnist, mode: WeightMode, seed: u64) -> MnistRun {
    let (train_set, val_set) = balanced_split(&mnist.train, MNIST_TRAIN_PER_CLASS, MNIST_VAL_PER_CLASS, seed).unwrap();
    let cfg = TrainConfig::mnist(mode, MNIST_EPOCHS, seed);
    let net = cfg.build_network(&[1, 28, 28], &lenet_small()).unwrap();
    let out = train(net, &train_set, &val_set, &cfg, None).unwrap();
    MnistRun {
        test_acc: evaluate(&out.best, &mnist.test, 500).unwrap().accuracy(),
        losses: out.report.losses(),
    }
}

fn majority(flags: &[bool]) -> bool {
    flags.iter().filter(|&&f| f).count() * 2 > flags.len()
}

fn desk_mnist(mnist: &Mnist) -> (Outcome, Vec<f64>) {
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut twn_seed1 = Vec::new();
    for &seed in &MNIST_SEEDS {
        let f = mnist_run(mnist, WeightMode::Full, seed);
        let t = mnist_run(mnist, WeightMode::Ternary, seed);
        let b = mnist_run(mnist, WeightMode::Binary, seed);
        if seed == 1 {
            twn_seed1 = t.losses.clone();
        }
        rows.push((seed, f.test_acc, t.test_acc, b.test_acc));
    }
    let secs = started.elapsed().as_secs_f64();
    let checks = [
        majority(&rows.iter().map(|r| r.1 >= FPWN_MIN).collect::<Vec<_>>()),
        majority(&rows.iter().map(|r| r.2 >= TWN_MIN).collect::<Vec<_>>()),
        majority(&rows.iter().map(|r| r.2 >= r.3).collect::<Vec<_>>()),
        majority(&rows.iter().map(|r| (r.1 - r.2) * 100.0 <= MAX_GAP_POINTS).collect::<Vec<_>>()),
    ];
    let table: Vec<String> = rows
        .iter()
        .map(|(s, f, t, b)| format!("seed {s}: FPWN {:.2} TWN {:.2} BPWN {:.2}", f * 100.0, t * 100.0, b * 100.0))
        .collect();
    let labels = ["FPWN>=96", "TWN>=95", "TWN>=BPWN", "gap<=2"];
    let verdicts: Vec<String> = labels
        .iter()
        .zip(checks)
        .map(|(l, ok)| format!("{l} {}", if ok { "ok" } else { "MISSED" }))
        .collect();
    (
        Outcome::new(
            checks.iter().all(|&c| c),
            format!(
                "{}; majority checks: {}; {secs:.0}s for 9 runs (target {MNIST_BUDGET_S:.0}s{})",
                table.join("; "),
                verdicts.join(", "),
                if secs < MNIST_BUDGET_S { "" } else { ", EXCEEDED" }
            ),
        ),
        twn_seed1,
    )
}

fn determinism(mnist: &Mnist, first: &[f64]) -> Outcome {
    let again = mnist_run(mnist, WeightMode::Ternary, 1).losses;
    let same = first.len() == again.len() && first.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits());
    Outcome::new(
        same,
        format!("TWN seed 1 repeated: {} epoch losses, bit-identical: {same}", again.len()),
    )
}

fn main() {
    let mut all = true;
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        all &= report(id, name, started, outcome);
    };
    run(1, "exact solver matches brute-force oracle", &mut exact_vs_oracle);
    run(2, "distribution rules for the optimal threshold", &mut distribution_rules);
    run(3, "rule-of-thumb threshold quality", &mut heuristic_quality);
    run(4, "ternary kernels match float reference, no inner multiplies", &mut kernel_equivalence);
    run(5, "2-bit pack round trip, golden file, 11 rejection", &mut pack_round_trip);
    run(6, "weight payload compression vs float32", &mut compression);
    run(7, "finite-difference gradient checks", &mut gradient_checks);

    let dir = mnist_dir();
    match load_mnist(&dir) {
        Ok(mnist) => {
            let mut twn_losses = Vec::new();
            run(8, "desk-scale MNIST FPWN/TWN/BPWN", &mut || {
                let (o, l) = desk_mnist(&mnist);
                twn_losses = l;
                o
            });
            run(9, "training determinism", &mut || determinism(&mnist, &twn_losses));
        }
        Err(e) => {
            let msg = format!("MNIST not available in {} ({e}); run scripts/fetch_mnist.sh or set TWN_MNIST_DIR", dir.display());
            run(8, "desk-scale MNIST FPWN/TWN/BPWN", &mut || Outcome::new(false, msg.clone()));
            run(9, "training determinism", &mut || Outcome::new(false, msg.clone()));
        }
    }

    run(10, "template counts", &mut template_counts);

    if !all {
        std::process::exit(1);
    }
}
