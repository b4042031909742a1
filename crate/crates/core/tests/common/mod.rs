//! Literal contents of `tests/fixtures/golden.twn`.

#![allow(dead_code)]

use twn::nn::WeightMode;
use twn::packfmt::{pack, LayerRecord, ModelFile, WeightRecord};
use twn::quantizer::TernaryCode::{self, Neg as N, Pos as P, Zero as Z};
use twn::tensor::{DenseTensor, Shape};

pub const GOLDEN_PATH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden.twn");

pub const CONV_CODES: [TernaryCode; 18] = [P, Z, N, Z, P, Z, N, Z, P, Z, Z, P, N, P, Z, Z, N, Z];
pub const CONV_ALPHAS: [f32; 2] = [0.75, 0.375];
pub const CONV_BIAS: [f32; 2] = [0.125, -0.25];
pub const FC1_CODES: [TernaryCode; 32] = [
    P, N, P, N, P, N, P, N, //
    N, N, P, P, N, N, P, P, //
    P, P, P, P, N, N, N, N, //
    N, P, P, N, P, N, N, P,
];
pub const FC1_ALPHAS: [f32; 4] = [0.5, 1.5, 0.25, 1.0];
pub const FC1_BIAS: [f32; 4] = [0.0, 0.5, -0.5, 1.0];
pub const FC2_WEIGHTS: [f32; 12] = [0.5, -1.0, 0.25, 2.0, -0.75, 1.25, 0.0, -0.5, 1.0, 0.5, -0.25, -1.5];
pub const FC2_BIAS: [f32; 3] = [0.1, -0.2, 0.3];
pub const BN_GAMMA: [f32; 2] = [1.0, 2.0];
pub const BN_BETA: [f32; 2] = [0.0, -0.5];
pub const BN_MEAN: [f32; 2] = [0.25, -0.125];
pub const BN_VAR: [f32; 2] = [1.0, 0.5];

fn t(values: &[f32]) -> DenseTensor {
    DenseTensor::from_slice(values).unwrap()
}

/// conv(ternary, 2x1x3x3, pad 1) -> bn -> relu -> maxpool 2 -> fc(binary,
/// 8 -> 4) -> relu -> fc(full, 4 -> 3) -> squared hinge, on `[1, 4, 4]`.
pub fn golden_model() -> ModelFile {
    let conv_shape = Shape::new([2, 1, 3, 3]).unwrap();
    let fc1_shape = Shape::new([4, 8]).unwrap();
    ModelFile {
        input_dims: vec![1, 4, 4],
        layers: vec![
            LayerRecord::Conv {
                mode: WeightMode::Ternary,
                stride: 1,
                pad: 1,
                weight: WeightRecord::Packed(pack(&conv_shape, &CONV_CODES, &CONV_ALPHAS, 9).unwrap()),
                bias: t(&CONV_BIAS),
            },
            LayerRecord::BatchNorm {
                eps: 1e-5,
                gamma: t(&BN_GAMMA),
                beta: t(&BN_BETA),
                running_mean: t(&BN_MEAN),
                running_var: t(&BN_VAR),
            },
            LayerRecord::Relu,
            LayerRecord::MaxPool { size: 2, stride: 2 },
            LayerRecord::Dense {
                mode: WeightMode::Binary,
                weight: WeightRecord::Packed(pack(&fc1_shape, &FC1_CODES, &FC1_ALPHAS, 8).unwrap()),
                bias: t(&FC1_BIAS),
            },
            LayerRecord::Relu,
            LayerRecord::Dense {
                mode: WeightMode::Full,
                weight: WeightRecord::Raw(
                    DenseTensor::from_vec(Shape::new([3, 4]).unwrap(), FC2_WEIGHTS.to_vec()).unwrap(),
                ),
                bias: t(&FC2_BIAS),
            },
            LayerRecord::Hinge { squared: true },
        ],
    }
}

/// Input used for the frozen golden scores: `(i mod 7) * 0.25 - 0.75`.
pub fn golden_input() -> DenseTensor {
    let v: Vec<f32> = (0..16).map(|i| (i % 7) as f32 * 0.25 - 0.75).collect();
    DenseTensor::from_vec(Shape::new([1, 1, 4, 4]).unwrap(), v).unwrap()
}
