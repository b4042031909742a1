use super::reference::{conv_geometry, matrix_dims, shape2};
use super::{im2col, ConvGeometry, KernelError, OpCounter};
use crate::quantizer::TernaryCode;
use crate::tensor::{DenseTensor, Shape};

/// Borrowed ternary operand: codes in row-major order of `shape` plus one
/// scale per group of `group_size` consecutive codes.
///
/// Groups must cover whole rows, where a row is everything after the first
/// dimension (one output unit).
#[derive(Debug, Clone, Copy)]
pub struct TernaryOperandView<'a> {
    pub codes: &'a [TernaryCode],
    pub alphas: &'a [f32],
    pub group_size: usize,
    pub shape: &'a Shape,
}

/// Owned counterpart of [`TernaryOperandView`].
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryWeights {
    pub shape: Shape,
    pub codes: Vec<TernaryCode>,
    pub alphas: Vec<f32>,
    pub group_size: usize,
}

impl TernaryWeights {
    pub fn view(&self) -> TernaryOperandView<'_> {
        TernaryOperandView {
            codes: &self.codes,
            alphas: &self.alphas,
            group_size: self.group_size,
            shape: &self.shape,
        }
    }

    /// `alpha * code` per element.
    pub fn dequantize(&self) -> Vec<f32> {
        let gs = self.group_size.max(1);
        self.codes
            .iter()
            .enumerate()
            .map(|(i, c)| self.alphas[i / gs] * c.as_f32())
            .collect()
    }
}

impl<'a> TernaryOperandView<'a> {
    pub fn rows(&self) -> usize {
        self.shape.dims()[0]
    }

    pub fn row_len(&self) -> usize {
        self.shape.dims()[1..].iter().product()
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let n = self.shape.numel();
        if self.codes.len() != n {
            return Err(KernelError::ShapeMismatch(format!(
                "{} codes for shape {}",
                self.codes.len(),
                self.shape
            )));
        }
        if n == 0 {
            return Ok(());
        }
        let row = self.row_len();
        if self.group_size == 0 || !self.group_size.is_multiple_of(row) || !n.is_multiple_of(self.group_size) {
            return Err(KernelError::InvalidGrouping(format!(
                "group size {} must be a multiple of the row length {row} and divide {n}",
                self.group_size
            )));
        }
        if self.alphas.len() != n / self.group_size {
            return Err(KernelError::InvalidGrouping(format!(
                "{} scales for {} groups",
                self.alphas.len(),
                n / self.group_size
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn row_alpha(&self, row: usize) -> f32 {
        self.alphas[row * self.row_len() / self.group_size]
    }

    pub fn row_codes(&self, row: usize) -> &'a [TernaryCode] {
        let len = self.row_len();
        &self.codes[row * len..(row + 1) * len]
    }
}

#[inline(always)]
fn signed_accumulate<C: OpCounter>(acc: f32, x: f32, code: TernaryCode, counter: &mut C) -> f32 {
    match code {
        TernaryCode::Pos => {
            counter.accumulate(1);
            acc + x
        }
        TernaryCode::Neg => {
            counter.accumulate(1);
            acc - x
        }
        TernaryCode::Zero => acc,
    }
}

/// `alpha * (sum_{c=+1} x - sum_{c=-1} x)` with a single scale for the whole
/// vector.
pub fn ternary_dot<C: OpCounter>(
    x: &[f32],
    codes: &[TernaryCode],
    alpha: f32,
    counter: &mut C,
) -> Result<f32, KernelError> {
    if x.len() != codes.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "dot of lengths {} and {}",
            x.len(),
            codes.len()
        )));
    }
    let mut acc = 0.0f32;
    for (&v, &c) in x.iter().zip(codes) {
        acc = signed_accumulate(acc, v, c, counter);
    }
    counter.scale_multiply(1);
    Ok(alpha * acc)
}

/// `[batch, in]` against `[out, in]` ternary weights, plus bias.
pub fn ternary_matmul<C: OpCounter>(
    x: &DenseTensor,
    w: TernaryOperandView<'_>,
    bias: &[f32],
    counter: &mut C,
) -> Result<DenseTensor, KernelError> {
    w.validate()?;
    let (batch, inputs) = matrix_dims(x.shape(), "input")?;
    let (outputs, w_in) = matrix_dims(w.shape, "weight")?;
    if w_in != inputs || bias.len() != outputs {
        return Err(KernelError::ShapeMismatch(format!(
            "input {} weight {} bias {}",
            x.shape(),
            w.shape,
            bias.len()
        )));
    }
    let xd = x.data();
    let mut out = vec![0.0f32; batch * outputs];
    for b in 0..batch {
        let row = &xd[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let mut acc = 0.0f32;
            for (&v, &c) in row.iter().zip(w.row_codes(o)) {
                acc = signed_accumulate(acc, v, c, counter);
            }
            counter.scale_multiply(1);
            out[b * outputs + o] = w.row_alpha(o) * acc + bias[o];
        }
    }
    Ok(DenseTensor::from_vec(shape2(batch, outputs), out).expect("finite inputs give finite sums"))
}

/// Direct NCHW convolution with ternary `[cout, cin, kh, kw]` weights.
///
/// Every output element is accumulated over `(ci, ky, kx)` in order and
/// scaled once by its output channel's alpha.
pub fn ternary_conv2d<C: OpCounter>(
    x: &DenseTensor,
    w: TernaryOperandView<'_>,
    bias: &[f32],
    stride: usize,
    pad: usize,
    counter: &mut C,
) -> Result<DenseTensor, KernelError> {
    w.validate()?;
    let geo = conv_geometry(x.shape(), w.shape, stride, pad)?;
    check_bias(&geo, bias)?;
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let xd = x.data();
    let mut out = vec![0.0f32; geo.batch * geo.out_image_len()];
    for b in 0..geo.batch {
        let image = &xd[b * geo.in_image_len()..][..geo.in_image_len()];
        for co in 0..geo.cout {
            let filter = w.row_codes(co);
            let alpha = w.row_alpha(co);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..geo.cin {
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let v = geo
                                    .source(oy, ox, ky, kx)
                                    .map_or(0.0, |(y, xx)| image[(ci * geo.height + y) * geo.width + xx]);
                                let code = filter[(ci * geo.kh + ky) * geo.kw + kx];
                                acc = signed_accumulate(acc, v, code, counter);
                            }
                        }
                    }
                    counter.scale_multiply(1);
                    out[((b * geo.cout + co) * oh + oy) * ow + ox] = alpha * acc + bias[co];
                }
            }
        }
    }
    let shape = Shape::new([geo.batch, geo.cout, oh, ow]).expect("rank 4");
    Ok(DenseTensor::from_vec(shape, out).expect("finite inputs give finite sums"))
}

fn check_bias(geo: &ConvGeometry, bias: &[f32]) -> Result<(), KernelError> {
    if bias.len() != geo.cout {
        return Err(KernelError::ShapeMismatch(format!(
            "bias length {} for {} output channels",
            bias.len(),
            geo.cout
        )));
    }
    Ok(())
}

/// Same result as [`ternary_conv2d`], bit for bit, computed by unfolding
/// each image and sweeping whole rows of the unfolded matrix per nonzero
/// code. This is the fast path used by network inference.
pub fn ternary_conv2d_im2col(
    x: &DenseTensor,
    w: TernaryOperandView<'_>,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<DenseTensor, KernelError> {
    w.validate()?;
    let geo = conv_geometry(x.shape(), w.shape, stride, pad)?;
    check_bias(&geo, bias)?;
    let rows = SignedRows::from_view(w);
    let mut out = vec![0.0f32; geo.batch * geo.out_image_len()];
    let mut cols = vec![0.0f32; geo.patch_len() * geo.out_spatial()];
    for b in 0..geo.batch {
        let image = &x.data()[b * geo.in_image_len()..][..geo.in_image_len()];
        im2col(&geo, image, &mut cols);
        rows.apply_to_columns(
            &cols,
            geo.out_spatial(),
            bias,
            &mut out[b * geo.out_image_len()..][..geo.out_image_len()],
        );
    }
    let shape = Shape::new([geo.batch, geo.cout, geo.out_height(), geo.out_width()]).expect("rank 4");
    Ok(DenseTensor::from_vec(shape, out).expect("finite inputs give finite sums"))
}

const SIGN_BIT: u32 = 0x8000_0000;

/// Ternary rows compiled to lists of nonzero positions, each tagged with a
/// sign bit. Adding `x` with its sign bit flipped is exactly `acc - x`, so
/// this performs the same operations as the code-by-code kernels without
/// branching on codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedRows {
    row_start: Vec<usize>,
    entries: Vec<u32>,
    alphas: Vec<f32>,
    row_len: usize,
}

impl SignedRows {
    pub fn from_view(w: TernaryOperandView<'_>) -> Self {
        let rows = if w.codes.is_empty() { 0 } else { w.rows() };
        let row_len = if rows == 0 { 0 } else { w.row_len() };
        assert!(row_len < SIGN_BIT as usize, "row too long for signed index");
        let mut row_start = Vec::with_capacity(rows + 1);
        let mut entries = Vec::new();
        let mut alphas = Vec::with_capacity(rows);
        row_start.push(0);
        for r in 0..rows {
            for (k, &c) in w.row_codes(r).iter().enumerate() {
                match c {
                    TernaryCode::Pos => entries.push(k as u32),
                    TernaryCode::Neg => entries.push(k as u32 | SIGN_BIT),
                    TernaryCode::Zero => {}
                }
            }
            row_start.push(entries.len());
            alphas.push(w.row_alpha(r));
        }
        Self {
            row_start,
            entries,
            alphas,
            row_len,
        }
    }

    pub fn rows(&self) -> usize {
        self.alphas.len()
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.len()
    }

    fn row(&self, r: usize) -> &[u32] {
        &self.entries[self.row_start[r]..self.row_start[r + 1]]
    }

    /// `out[r] = alpha_r * signed_sum(x over row r) + bias[r]`.
    pub fn dot_rows(&self, x: &[f32], bias: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.row_len);
        for (r, o) in out.iter_mut().enumerate().take(self.rows()) {
            let mut acc = 0.0f32;
            for &e in self.row(r) {
                let v = x[(e & !SIGN_BIT) as usize];
                acc += f32::from_bits(v.to_bits() ^ (e & SIGN_BIT));
            }
            *o = self.alphas[r] * acc + bias[r];
        }
    }

    /// `out[r, n] = alpha_r * signed_sum_k(cols[k, n]) + bias[r]` for a
    /// `[row_len, width]` column matrix.
    pub fn apply_to_columns(&self, cols: &[f32], width: usize, bias: &[f32], out: &mut [f32]) {
        debug_assert_eq!(cols.len(), self.row_len * width);
        for r in 0..self.rows() {
            let acc = &mut out[r * width..(r + 1) * width];
            acc.fill(0.0);
            for &e in self.row(r) {
                let src = &cols[(e & !SIGN_BIT) as usize * width..][..width];
                let flip = e & SIGN_BIT;
                for (a, &v) in acc.iter_mut().zip(src) {
                    *a += f32::from_bits(v.to_bits() ^ flip);
                }
            }
            let (alpha, b) = (self.alphas[r], bias[r]);
            for a in acc.iter_mut() {
                *a = alpha * *a + b;
            }
        }
    }
}
