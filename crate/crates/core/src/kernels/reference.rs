//! Naive dense kernels. They define the accumulation order that the
//! blocked GEMM path reproduces bit for bit, and serve as the full-precision
//! baseline.

use super::{ConvGeometry, KernelError, OpCounter};
use crate::tensor::{DenseTensor, Shape};

pub fn reference_dot<C: OpCounter>(x: &[f32], w: &[f32], counter: &mut C) -> Result<f32, KernelError> {
    if x.len() != w.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "dot of lengths {} and {}",
            x.len(),
            w.len()
        )));
    }
    let mut acc = 0.0f32;
    for (&a, &b) in x.iter().zip(w) {
        acc += a * b;
    }
    counter.inner_multiply(x.len() as u64);
    counter.accumulate(x.len() as u64);
    Ok(acc)
}

/// `[batch, in] x [out, in]^T + bias -> [batch, out]`.
pub fn reference_matmul<C: OpCounter>(
    x: &DenseTensor,
    w: &DenseTensor,
    bias: &[f32],
    counter: &mut C,
) -> Result<DenseTensor, KernelError> {
    let (batch, inputs) = matrix_dims(x.shape(), "input")?;
    let (outputs, w_in) = matrix_dims(w.shape(), "weight")?;
    if w_in != inputs || bias.len() != outputs {
        return Err(KernelError::ShapeMismatch(format!(
            "input {} weight {} bias {}",
            x.shape(),
            w.shape(),
            bias.len()
        )));
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0f32; batch * outputs];
    for b in 0..batch {
        let row = &xd[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let wrow = &wd[o * inputs..(o + 1) * inputs];
            let mut acc = 0.0f32;
            for (&a, &c) in row.iter().zip(wrow) {
                acc += a * c;
            }
            out[b * outputs + o] = acc + bias[o];
        }
    }
    let macs = (batch * outputs * inputs) as u64;
    counter.inner_multiply(macs);
    counter.accumulate(macs);
    Ok(DenseTensor::from_vec(shape2(batch, outputs), out).expect("finite inputs give finite sums"))
}

/// Direct NCHW convolution with zero padding.
pub fn reference_conv2d<C: OpCounter>(
    x: &DenseTensor,
    w: &DenseTensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
    counter: &mut C,
) -> Result<DenseTensor, KernelError> {
    let geo = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    if bias.len() != geo.cout {
        return Err(KernelError::ShapeMismatch(format!(
            "bias length {} for {} output channels",
            bias.len(),
            geo.cout
        )));
    }
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0f32; geo.batch * geo.out_image_len()];
    for b in 0..geo.batch {
        let image = &xd[b * geo.in_image_len()..][..geo.in_image_len()];
        for co in 0..geo.cout {
            let filter = &wd[co * geo.patch_len()..][..geo.patch_len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..geo.cin {
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let v = geo
                                    .source(oy, ox, ky, kx)
                                    .map_or(0.0, |(y, xx)| image[(ci * geo.height + y) * geo.width + xx]);
                                acc += filter[(ci * geo.kh + ky) * geo.kw + kx] * v;
                            }
                        }
                    }
                    out[((b * geo.cout + co) * oh + oy) * ow + ox] = acc + bias[co];
                }
            }
        }
    }
    let macs = (geo.batch * geo.out_image_len() * geo.patch_len()) as u64;
    counter.inner_multiply(macs);
    counter.accumulate(macs);
    let shape = Shape::new([geo.batch, geo.cout, oh, ow]).expect("non-empty rank");
    Ok(DenseTensor::from_vec(shape, out).expect("finite inputs give finite sums"))
}

pub(super) fn matrix_dims(shape: &Shape, what: &str) -> Result<(usize, usize), KernelError> {
    match shape.dims() {
        &[r, c] => Ok((r, c)),
        _ => Err(KernelError::ShapeMismatch(format!("{what} must be rank 2, got {shape}"))),
    }
}

pub(super) fn shape2(r: usize, c: usize) -> Shape {
    Shape::new([r, c]).expect("rank 2")
}

pub(super) fn conv_geometry(
    x: &Shape,
    w: &Shape,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry, KernelError> {
    let (&[batch, cin, height, width], &[cout, w_cin, kh, kw]) = (x.dims(), w.dims()) else {
        return Err(KernelError::ShapeMismatch(format!(
            "conv needs rank-4 input and weight, got {x} and {w}"
        )));
    };
    if cin != w_cin {
        return Err(KernelError::ShapeMismatch(format!(
            "input has {cin} channels, weight expects {w_cin}"
        )));
    }
    let geo = ConvGeometry {
        batch,
        cin,
        height,
        width,
        cout,
        kh,
        kw,
        stride,
        pad,
    };
    geo.validate()?;
    Ok(geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{NoCount, OpCounts};

    fn t(dims: &[usize], v: Vec<f32>) -> DenseTensor {
        DenseTensor::from_vec(Shape::new(dims.to_vec()).unwrap(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let x = t(&[2, 2], vec![1.5, -2.0, 3.0, 0.25]);
        let w = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = reference_matmul(&x, &w, &[0.0, 0.0], &mut NoCount).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn delta_kernel_shifts() {
        // 3x3 kernel with a single 1 at (0, 0) and padding 1 shifts the
        // image down-right by one pixel.
        let x = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect());
        let mut k = vec![0.0; 9];
        k[0] = 1.0;
        let w = t(&[1, 1, 3, 3], k);
        let y = reference_conv2d(&x, &w, &[0.0], 1, 1, &mut NoCount).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn dense_mac_count() {
        let x = t(&[3, 4], vec![1.0; 12]);
        let w = t(&[5, 4], vec![1.0; 20]);
        let mut c = OpCounts::default();
        reference_matmul(&x, &w, &[0.0; 5], &mut c).unwrap();
        assert_eq!(c.multiply_ops(), 3 * 5 * 4);
    }

    #[test]
    fn golden_fixture() {
        // Frozen output of this kernel on a fixed fixture; any change to the
        // accumulation order shows up here.
        let x = t(&[1, 2, 3, 3], (0..18).map(|i| ((i * 7) % 11) as f32 * 0.37 - 1.5).collect());
        let w = t(&[2, 2, 2, 2], (0..16).map(|i| ((i * 5) % 9) as f32 * 0.29 - 1.1).collect());
        let y = reference_conv2d(&x, &w, &[0.1, -0.2], 1, 0, &mut NoCount).unwrap();
        let bits: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, GOLDEN_CONV_BITS);
    }

    const GOLDEN_CONV_BITS: [u32; 8] = [
        3207703038, 3211427586, 3232442299, 1076642183, 1061091797, 1065860726, 1067381578, 3209553563,
    ];

    #[test]
    fn shape_errors() {
        let x = t(&[1, 3], vec![0.0; 3]);
        let w = t(&[2, 4], vec![0.0; 8]);
        assert!(reference_matmul(&x, &w, &[0.0; 2], &mut NoCount).is_err());
        let x4 = t(&[1, 1, 2, 2], vec![0.0; 4]);
        let w4 = t(&[1, 2, 1, 1], vec![0.0; 2]);
        assert!(reference_conv2d(&x4, &w4, &[0.0], 1, 0, &mut NoCount).is_err());
    }
}
