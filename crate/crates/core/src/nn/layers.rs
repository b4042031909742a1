//! Stateless forward and backward passes for each layer kind.
//!
//! Convolution and fully connected layers run on the fixed-order GEMM, so a
//! full-precision forward matches the reference kernels bit for bit.

use super::NnError;
use crate::kernels::gemm::{gemm, MatRef};
use crate::kernels::{col2im, im2col, ConvGeometry};
use crate::tensor::{DenseTensor, Shape};

fn tensor(dims: Vec<usize>, data: Vec<f32>) -> Result<DenseTensor, NnError> {
    let shape = Shape::new(dims)?;
    DenseTensor::from_vec(shape, data).map_err(NnError::from)
}

/// Forward input kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub geo: ConvGeometry,
    pub input: Vec<f32>,
}

pub fn conv_geometry(x: &Shape, w: &Shape, stride: usize, pad: usize) -> Result<ConvGeometry, NnError> {
    let (&[batch, cin, height, width], &[cout, wc, kh, kw]) = (x.dims(), w.dims()) else {
        return Err(NnError::Shape(format!("conv input {x} and weight {w} must be rank 4")));
    };
    if cin != wc {
        return Err(NnError::Shape(format!("conv input {x} does not match weight {w}")));
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

/// `y = W * x + b` over NCHW input. `keep` retains the input for
/// [`conv_backward`].
pub fn conv_forward(
    x: &DenseTensor,
    w: &[f32],
    wshape: &Shape,
    bias: &[f32],
    stride: usize,
    pad: usize,
    keep: bool,
) -> Result<(DenseTensor, Option<ConvCache>), NnError> {
    let geo = conv_geometry(x.shape(), wshape, stride, pad)?;
    let (p, s) = (geo.patch_len(), geo.out_spatial());
    let mut out = vec![0.0f32; geo.batch * geo.out_image_len()];
    let mut cols = vec![0.0f32; p * s];
    for b in 0..geo.batch {
        let image = &x.data()[b * geo.in_image_len()..][..geo.in_image_len()];
        im2col(&geo, image, &mut cols);
        let y = &mut out[b * geo.out_image_len()..][..geo.out_image_len()];
        gemm(
            MatRef::row_major(w, geo.cout, p),
            MatRef::row_major(&cols, p, s),
            y,
            s,
            false,
        );
        for (row, &bv) in y.chunks_exact_mut(s).zip(bias) {
            for v in row {
                *v += bv;
            }
        }
    }
    let y = tensor(vec![geo.batch, geo.cout, geo.out_height(), geo.out_width()], out)?;
    Ok((
        y,
        keep.then(|| ConvCache {
            geo,
            input: x.data().to_vec(),
        }),
    ))
}

pub struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub input: Option<Vec<f32>>,
}

pub fn conv_backward(dy: &DenseTensor, w: &[f32], cache: &ConvCache, need_input: bool) -> ConvGrads {
    let geo = &cache.geo;
    let (p, s) = (geo.patch_len(), geo.out_spatial());
    let mut dw = vec![0.0f32; geo.cout * p];
    let mut db = vec![0.0f32; geo.cout];
    let mut dx = need_input.then(|| vec![0.0f32; geo.batch * geo.in_image_len()]);
    let mut dcols = vec![0.0f32; if need_input { p * s } else { 0 }];
    let mut cols = vec![0.0f32; p * s];
    for b in 0..geo.batch {
        let g = &dy.data()[b * geo.out_image_len()..][..geo.out_image_len()];
        im2col(geo, &cache.input[b * geo.in_image_len()..][..geo.in_image_len()], &mut cols);
        gemm(
            MatRef::row_major(g, geo.cout, s),
            MatRef::row_major(&cols, p, s).t(),
            &mut dw,
            p,
            true,
        );
        for (acc, row) in db.iter_mut().zip(g.chunks_exact(s)) {
            *acc += row.iter().sum::<f32>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::row_major(w, geo.cout, p).t(),
                MatRef::row_major(g, geo.cout, s),
                &mut dcols,
                s,
                false,
            );
            col2im(geo, &dcols, &mut dx[b * geo.in_image_len()..][..geo.in_image_len()]);
        }
    }
    ConvGrads {
        weight: dw,
        bias: db,
        input: dx,
    }
}

/// `y = x W^T + b` for `x: [batch, in]`, `W: [out, in]`.
pub fn dense_forward(x: &[f32], batch: usize, w: &[f32], outputs: usize, bias: &[f32]) -> Vec<f32> {
    let inputs = if batch == 0 { 0 } else { x.len() / batch };
    let mut y = vec![0.0f32; batch * outputs];
    gemm(
        MatRef::row_major(x, batch, inputs),
        MatRef::row_major(w, outputs, inputs).t(),
        &mut y,
        outputs,
        false,
    );
    for row in y.chunks_exact_mut(outputs.max(1)) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
    y
}

pub struct DenseGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub input: Option<Vec<f32>>,
}

pub fn dense_backward(dy: &[f32], x: &[f32], batch: usize, w: &[f32], outputs: usize, need_input: bool) -> DenseGrads {
    let inputs = w.len() / outputs.max(1);
    let mut dw = vec![0.0f32; outputs * inputs];
    gemm(
        MatRef::row_major(dy, batch, outputs).t(),
        MatRef::row_major(x, batch, inputs),
        &mut dw,
        inputs,
        false,
    );
    let mut db = vec![0.0f32; outputs];
    for row in dy.chunks_exact(outputs.max(1)) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let input = need_input.then(|| {
        let mut dx = vec![0.0f32; batch * inputs];
        gemm(
            MatRef::row_major(dy, batch, outputs),
            MatRef::row_major(w, outputs, inputs),
            &mut dx,
            inputs,
            false,
        );
        dx
    });
    DenseGrads {
        weight: dw,
        bias: db,
        input,
    }
}

/// `(batch, channels, inner)` view of `[batch, channels, ...]`.
pub fn channel_layout(shape: &Shape) -> Result<(usize, usize, usize), NnError> {
    match shape.dims() {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        _ => Err(NnError::Shape(format!("batch norm needs [batch, channels, ...], got {shape}"))),
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f32>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var: Vec<f32>,
}

/// Normalizes with batch statistics.
pub fn batch_norm_train(
    x: &DenseTensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(DenseTensor, BnCache), NnError> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if c != gamma.len() {
        return Err(NnError::Shape(format!("{} channels for {c}-channel input", gamma.len())));
    }
    let m = n * inner;
    if m < 2 {
        return Err(NnError::BatchTooSmall(m));
    }
    let xd = x.data();
    let mut x_hat = vec![0.0f32; xd.len()];
    let mut y = vec![0.0f32; xd.len()];
    let (mut means, mut vars, mut inv_stds) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for ch in 0..c {
        let plane = |b: usize| &xd[(b * c + ch) * inner..][..inner];
        let mut sum = 0.0f64;
        for b in 0..n {
            sum += plane(b).iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += plane(b).iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>();
        }
        let var = sq / m as f64;
        let inv_std = (1.0 / (var + f64::from(eps)).sqrt()) as f32;
        let mean32 = mean as f32;
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let h = (xd[i] - mean32) * inv_std;
                x_hat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
        means[ch] = mean32;
        vars[ch] = (sq / (m - 1) as f64) as f32;
        inv_stds[ch] = inv_std;
    }
    Ok((
        tensor(x.shape().dims().to_vec(), y)?,
        BnCache {
            x_hat,
            inv_std: inv_stds,
            batch_mean: means,
            batch_var: vars,
        },
    ))
}

/// Normalizes with running statistics.
pub fn batch_norm_eval(
    x: &DenseTensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<DenseTensor, NnError> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if c != gamma.len() {
        return Err(NnError::Shape(format!("{} channels for {c}-channel input", gamma.len())));
    }
    let mut y = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut y[(b * c + ch) * inner..][..inner] {
                *v = *v * scale + shift;
            }
        }
    }
    tensor(x.shape().dims().to_vec(), y)
}

pub struct BnGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub fn batch_norm_backward(dy: &DenseTensor, gamma: &[f32], cache: &BnCache) -> Result<BnGrads, NnError> {
    let (n, c, inner) = channel_layout(dy.shape())?;
    let m = (n * inner) as f64;
    let g = dy.data();
    let mut dx = vec![0.0f32; g.len()];
    let (mut dgamma, mut dbeta) = (vec![0.0f32; c], vec![0.0f32; c]);
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                sum_g += f64::from(g[i]);
                sum_gx += f64::from(g[i]) * f64::from(cache.x_hat[i]);
            }
        }
        dgamma[ch] = sum_gx as f32;
        dbeta[ch] = sum_g as f32;
        let k = f64::from(gamma[ch]) * f64::from(cache.inv_std[ch]) / m;
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dx[i] = (k * (m * f64::from(g[i]) - sum_g - f64::from(cache.x_hat[i]) * sum_gx)) as f32;
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn relu_forward(x: &DenseTensor) -> DenseTensor {
    x.map(|v| v.max(0.0)).expect("relu keeps values finite")
}

pub fn relu_backward(dy: &[f32], x: &[f32]) -> Vec<f32> {
    dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// Flat input index chosen by each pooled output.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

pub fn pool_out(len: usize, size: usize, stride: usize) -> Result<usize, NnError> {
    if size == 0 || stride == 0 || len < size {
        return Err(NnError::Shape(format!("pool {size}/{stride} does not fit extent {len}")));
    }
    Ok((len - size) / stride + 1)
}

/// Max pooling over NCHW; ties go to the first element in scan order.
pub fn max_pool_forward(x: &DenseTensor, size: usize, stride: usize) -> Result<(DenseTensor, PoolCache), NnError> {
    let &[n, c, h, w] = x.shape().dims() else {
        return Err(NnError::Shape(format!("max pool needs NCHW input, got {}", x.shape())));
    };
    let (oh, ow) = (pool_out(h, size, stride)?, pool_out(w, size, stride)?);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = xd[best];
                for ky in 0..size {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for (kx, &v) in xd[row..row + size].iter().enumerate() {
                        let better = v > best_v;
                        best = if better { row + kx } else { best };
                        best_v = if better { v } else { best_v };
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
    }
    Ok((
        tensor(vec![n, c, oh, ow], out)?,
        PoolCache {
            input_shape: x.shape().clone(),
            argmax,
        },
    ))
}

pub fn max_pool_backward(dy: &[f32], cache: &PoolCache) -> Vec<f32> {
    let mut dx = vec![0.0f32; cache.input_shape.numel()];
    for (&g, &i) in dy.iter().zip(&cache.argmax) {
        dx[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{reference_conv2d, reference_matmul, NoCount};
    use crate::tensor::Rng;

    fn rand_tensor(rng: &mut Rng, dims: &[usize]) -> DenseTensor {
        let n = dims.iter().product();
        tensor(dims.to_vec(), (0..n).map(|_| rng.next_f32() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn conv_matches_reference_bitwise() {
        let mut rng = Rng::new(3);
        let x = rand_tensor(&mut rng, &[2, 3, 9, 8]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let bias = [0.1, -0.2, 0.3, 0.0];
        for (s, p) in [(1, 1), (2, 0), (1, 2)] {
            let (y, _) = conv_forward(&x, w.data(), w.shape(), &bias, s, p, false).unwrap();
            let r = reference_conv2d(&x, &w, &bias, s, p, &mut NoCount).unwrap();
            assert_eq!(y, r);
        }
    }

    #[test]
    fn dense_matches_reference_bitwise() {
        let mut rng = Rng::new(4);
        let x = rand_tensor(&mut rng, &[5, 37]);
        let w = rand_tensor(&mut rng, &[11, 37]);
        let bias: Vec<f32> = (0..11).map(|i| i as f32 * 0.01).collect();
        let y = dense_forward(x.data(), 5, w.data(), 11, &bias);
        let r = reference_matmul(&x, &w, &bias, &mut NoCount).unwrap();
        assert_eq!(y, r.data());
    }

    #[test]
    fn constant_channel_normalizes_to_beta() {
        let x = tensor(vec![4, 1, 2, 2], vec![3.0; 16]).unwrap();
        let (y, _) = batch_norm_train(&x, &[2.0], &[0.5], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let one = tensor(vec![1, 1], vec![3.0]).unwrap();
        assert!(matches!(batch_norm_train(&one, &[1.0], &[0.0], 1e-5), Err(NnError::BatchTooSmall(1))));
    }

    #[test]
    fn pool_ties_take_first_index() {
        let x = tensor(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (y, cache) = max_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(cache.argmax, vec![0]);
        assert_eq!(max_pool_backward(&[2.0], &cache), vec![2.0, 0.0, 0.0, 0.0]);
    }
}
