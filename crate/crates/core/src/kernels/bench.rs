use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::{
    reference_conv2d, reference_dot, reference_matmul, ternary_conv2d, ternary_dot, ternary_matmul, KernelError,
    NoCount, OpCounts, TernaryOperandView,
};
use crate::quantizer::TernaryCode;
use crate::tensor::{DenseTensor, Rng, Shape};

pub const BENCH_CSV_HEADER: &str = "kernel,shape,ns_per_call,accumulate_ops,multiply_ops";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKernel {
    /// sizes: `[n]`
    TernaryDot,
    ReferenceDot,
    /// sizes: `[batch, out, in]`
    TernaryMatmul,
    ReferenceMatmul,
    /// sizes: `[batch, cin, h, w, cout, k]`, stride 1, pad `k / 2`
    TernaryConv,
    ReferenceConv,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 6] = [
        BenchKernel::TernaryDot,
        BenchKernel::ReferenceDot,
        BenchKernel::TernaryMatmul,
        BenchKernel::ReferenceMatmul,
        BenchKernel::TernaryConv,
        BenchKernel::ReferenceConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::TernaryDot => "ternary_dot",
            BenchKernel::ReferenceDot => "reference_dot",
            BenchKernel::TernaryMatmul => "ternary_matmul",
            BenchKernel::ReferenceMatmul => "reference_matmul",
            BenchKernel::TernaryConv => "ternary_conv2d",
            BenchKernel::ReferenceConv => "reference_conv2d",
        }
    }

    fn arity(self) -> usize {
        match self {
            BenchKernel::TernaryDot | BenchKernel::ReferenceDot => 1,
            BenchKernel::TernaryMatmul | BenchKernel::ReferenceMatmul => 3,
            BenchKernel::TernaryConv | BenchKernel::ReferenceConv => 6,
        }
    }
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKernel {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let short = |k: BenchKernel| k.name().trim_end_matches("2d").to_string();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || short(*k) == s)
            .ok_or_else(|| KernelError::ShapeMismatch(format!("unknown kernel {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub kernel: BenchKernel,
    pub shape: Vec<usize>,
    pub ns_per_call: f64,
    pub accumulate_ops: u64,
    /// Every multiplication performed: scale multiplies plus inner-loop ones.
    pub multiply_ops: u64,
    pub inner_multiply_ops: u64,
}

impl BenchResult {
    pub fn csv_row(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        format!(
            "{},{},{:.1},{},{}",
            self.kernel,
            shape.join("x"),
            self.ns_per_call,
            self.accumulate_ops,
            self.multiply_ops
        )
    }
}

/// Random ternary codes with exactly `round(zero_fraction * n)` zeros.
fn random_codes(rng: &mut Rng, n: usize, zero_fraction: f64) -> Vec<TernaryCode> {
    let zeros = ((zero_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut codes: Vec<TernaryCode> = (0..n)
        .map(|i| {
            if i < zeros {
                TernaryCode::Zero
            } else if rng.below(2) == 0 {
                TernaryCode::Pos
            } else {
                TernaryCode::Neg
            }
        })
        .collect();
    rng.shuffle(&mut codes);
    codes
}

fn random_tensor(rng: &mut Rng, dims: &[usize]) -> DenseTensor {
    let shape = Shape::new(dims.to_vec()).expect("bench sizes are valid");
    let data = (0..shape.numel()).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
    DenseTensor::from_vec(shape, data).expect("finite")
}

/// Times `repetitions` calls of `kernel` on seeded random operands whose
/// ternary codes contain the given fraction of zeros. Op counts are those of
/// a single call.
pub fn bench(
    kernel: BenchKernel,
    sizes: &[usize],
    repetitions: usize,
    zero_fraction: f64,
    seed: u64,
) -> Result<BenchResult, KernelError> {
    if sizes.len() != kernel.arity() || sizes.contains(&0) {
        return Err(KernelError::ShapeMismatch(format!(
            "{kernel} takes {} positive sizes, got {sizes:?}",
            kernel.arity()
        )));
    }
    let reps = repetitions.max(1);
    let mut rng = Rng::new(seed);
    let mut counts = OpCounts::default();
    let start;
    match kernel {
        BenchKernel::TernaryDot | BenchKernel::ReferenceDot => {
            let n = sizes[0];
            let x: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
            let codes = random_codes(&mut rng, n, zero_fraction);
            if kernel == BenchKernel::TernaryDot {
                ternary_dot(&x, &codes, 0.5, &mut counts)?;
                start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(ternary_dot(&x, &codes, 0.5, &mut NoCount)?);
                }
            } else {
                let w: Vec<f32> = codes.iter().map(|c| 0.5 * c.as_f32()).collect();
                reference_dot(&x, &w, &mut counts)?;
                start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(reference_dot(&x, &w, &mut NoCount)?);
                }
            }
        }
        BenchKernel::TernaryMatmul | BenchKernel::ReferenceMatmul => {
            let (batch, out, inp) = (sizes[0], sizes[1], sizes[2]);
            let x = random_tensor(&mut rng, &[batch, inp]);
            let wshape = Shape::new([out, inp]).expect("positive");
            let codes = random_codes(&mut rng, out * inp, zero_fraction);
            let alphas = [0.5f32];
            let view = TernaryOperandView {
                codes: &codes,
                alphas: &alphas,
                group_size: out * inp,
                shape: &wshape,
            };
            let bias = vec![0.0f32; out];
            if kernel == BenchKernel::TernaryMatmul {
                ternary_matmul(&x, view, &bias, &mut counts)?;
                start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(ternary_matmul(&x, view, &bias, &mut NoCount)?);
                }
            } else {
                let w = DenseTensor::from_vec(wshape, codes.iter().map(|c| 0.5 * c.as_f32()).collect())
                    .expect("finite");
                reference_matmul(&x, &w, &bias, &mut counts)?;
                start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(reference_matmul(&x, &w, &bias, &mut NoCount)?);
                }
            }
        }
        BenchKernel::TernaryConv | BenchKernel::ReferenceConv => {
            let (batch, cin, h, w, cout, k) = (sizes[0], sizes[1], sizes[2], sizes[3], sizes[4], sizes[5]);
            let x = random_tensor(&mut rng, &[batch, cin, h, w]);
            let wshape = Shape::new([cout, cin, k, k]).expect("positive");
            let codes = random_codes(&mut rng, wshape.numel(), zero_fraction);
            let alphas = vec![0.5f32; cout];
            let view = TernaryOperandView {
                codes: &codes,
                alphas: &alphas,
                group_size: cin * k * k,
                shape: &wshape,
            };
            let bias = vec![0.0f32; cout];
            let pad = k / 2;
            if kernel == BenchKernel::TernaryConv {
                ternary_conv2d(&x, view, &bias, 1, pad, &mut counts)?;
                start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(ternary_conv2d(&x, view, &bias, 1, pad, &mut NoCount)?);
                }
            } else {
                let wt = DenseTensor::from_vec(wshape, codes.iter().map(|c| 0.5 * c.as_f32()).collect())
                    .expect("finite");
                reference_conv2d(&x, &wt, &bias, 1, pad, &mut counts)?;
                start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(reference_conv2d(&x, &wt, &bias, 1, pad, &mut NoCount)?);
                }
            }
        }
    }
    let ns_per_call = start.elapsed().as_nanos() as f64 / reps as f64;
    Ok(BenchResult {
        kernel,
        shape: sizes.to_vec(),
        ns_per_call,
        accumulate_ops: counts.accumulate,
        multiply_ops: counts.multiply_ops(),
        inner_multiply_ops: counts.inner_multiply,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_accumulates_only_nonzeros() {
        let r = bench(BenchKernel::TernaryDot, &[100], 1, 0.3, 1).unwrap();
        assert_eq!(r.accumulate_ops, 70);
        assert_eq!(r.multiply_ops, 1);
        assert_eq!(r.inner_multiply_ops, 0);
    }

    #[test]
    fn matmul_multiply_counts() {
        let t = bench(BenchKernel::TernaryMatmul, &[4, 256, 256], 1, 0.5, 2).unwrap();
        assert_eq!(t.multiply_ops, 4 * 256);
        assert_eq!(t.inner_multiply_ops, 0);
        let r = bench(BenchKernel::ReferenceMatmul, &[4, 256, 256], 1, 0.5, 2).unwrap();
        assert_eq!(r.multiply_ops, 4 * 256 * 256);
    }

    #[test]
    fn conv_counts() {
        let t = bench(BenchKernel::TernaryConv, &[1, 2, 6, 6, 3, 3], 1, 0.0, 3).unwrap();
        assert_eq!(t.multiply_ops, 3 * 36);
        assert_eq!(t.inner_multiply_ops, 0);
        // every tap is visited, padded ones included
        assert_eq!(t.accumulate_ops, 3 * 36 * 18);
    }

    #[test]
    fn sparsity_strictly_reduces_accumulates() {
        let mut last = u64::MAX;
        for z in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let r = bench(BenchKernel::TernaryMatmul, &[2, 16, 32], 1, z, 5).unwrap();
            assert!(r.accumulate_ops < last, "zero fraction {z}");
            last = r.accumulate_ops;
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn parse_and_csv() {
        assert_eq!("ternary_matmul".parse::<BenchKernel>().unwrap(), BenchKernel::TernaryMatmul);
        assert_eq!("ternary_conv".parse::<BenchKernel>().unwrap(), BenchKernel::TernaryConv);
        assert!("fft".parse::<BenchKernel>().is_err());
        let r = bench(BenchKernel::TernaryDot, &[8], 2, 0.0, 1).unwrap();
        let row = r.csv_row();
        assert!(row.starts_with("ternary_dot,8,"));
        assert_eq!(row.split(',').count(), BENCH_CSV_HEADER.split(',').count());
        assert!(bench(BenchKernel::TernaryMatmul, &[8], 1, 0.0, 1).is_err());
    }
}
