use super::KernelError;

/// Shape bookkeeping for a zero-padded 2-d convolution over NCHW input and
/// `[cout, cin, kh, kw]` weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub height: usize,
    pub width: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.stride == 0 {
            return Err(KernelError::InvalidGeometry("stride must be positive".into()));
        }
        if self.kh == 0 || self.kw == 0 || self.cin == 0 || self.cout == 0 {
            return Err(KernelError::InvalidGeometry(
                "kernel and channel dimensions must be positive".into(),
            ));
        }
        if self.height + 2 * self.pad < self.kh || self.width + 2 * self.pad < self.kw {
            return Err(KernelError::InvalidGeometry(format!(
                "{}x{} kernel does not fit {}x{} input with padding {}",
                self.kh, self.kw, self.height, self.width, self.pad
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Reduction length per output: `cin * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn in_image_len(&self) -> usize {
        self.cin * self.height * self.width
    }

    pub fn out_image_len(&self) -> usize {
        self.cout * self.out_spatial()
    }

    /// Input value feeding output `(oy, ox)` through kernel tap `(ky, kx)`,
    /// or `None` when the tap lands in the padding.
    #[inline(always)]
    pub(crate) fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, oh*ow]`; padded taps
/// become `0.0`.
pub fn im2col(geo: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let n = oh * ow;
    debug_assert_eq!(cols.len(), geo.patch_len() * n);
    for ci in 0..geo.cin {
        let plane = &image[ci * geo.height * geo.width..][..geo.height * geo.width];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((ci * geo.kh + ky) * geo.kw + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..oh {
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let Some(y) = (oy * geo.stride + ky).checked_sub(geo.pad).filter(|&y| y < geo.height)
                    else {
                        out_row.fill(0.0);
                        continue;
                    };
                    let src = &plane[y * geo.width..(y + 1) * geo.width];
                    if geo.stride == 1 {
                        // x = ox + kx - pad is in range for ox in [lo, hi)
                        let lo = geo.pad.saturating_sub(kx).min(ow);
                        let hi = (geo.width + geo.pad).saturating_sub(kx).min(ow).max(lo);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        let start = lo + kx - geo.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            *v = (ox * geo.stride + kx)
                                .checked_sub(geo.pad)
                                .filter(|&x| x < geo.width)
                                .map_or(0.0, |x| src[x]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `[cin*kh*kw, oh*ow]` into an image
/// gradient `[cin, h, w]`. Contributions land in (ci, ky, kx, oy, ox) order.
pub fn col2im(geo: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let n = oh * ow;
    for ci in 0..geo.cin {
        let plane = &mut image[ci * geo.height * geo.width..][..geo.height * geo.width];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &cols[((ci * geo.kh + ky) * geo.kw + kx) * n..][..n];
                for oy in 0..oh {
                    let Some(y) = (oy * geo.stride + ky).checked_sub(geo.pad).filter(|&y| y < geo.height)
                    else {
                        continue;
                    };
                    let dst = &mut plane[y * geo.width..(y + 1) * geo.width];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in src.iter().enumerate() {
                        if let Some(x) = (ox * geo.stride + kx).checked_sub(geo.pad).filter(|&x| x < geo.width) {
                            dst[x] += g;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ConvGeometry {
        ConvGeometry {
            batch: 1,
            cin: 2,
            height: h,
            width: w,
            cout: 1,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    #[test]
    fn output_dims() {
        let g = geo(28, 28, 5, 1, 2);
        assert_eq!((g.out_height(), g.out_width()), (28, 28));
        let g = geo(7, 7, 3, 2, 0);
        assert_eq!((g.out_height(), g.out_width()), (3, 3));
        assert!(geo(2, 2, 5, 1, 1).validate().is_err());
        assert!(geo(4, 4, 3, 0, 0).validate().is_err());
    }

    #[test]
    fn im2col_matches_source_rule() {
        for &(h, w, k, s, p) in &[(5, 4, 3, 1, 1), (6, 7, 3, 2, 2), (4, 4, 5, 1, 2), (3, 3, 1, 1, 0)] {
            let g = geo(h, w, k, s, p);
            let image: Vec<f32> = (0..g.in_image_len()).map(|i| i as f32 + 1.0).collect();
            let mut cols = vec![f32::NAN; g.patch_len() * g.out_spatial()];
            im2col(&g, &image, &mut cols);
            let n = g.out_spatial();
            for ci in 0..g.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..g.out_height() {
                            for ox in 0..g.out_width() {
                                let expect = g
                                    .source(oy, ox, ky, kx)
                                    .map_or(0.0, |(y, x)| image[(ci * h + y) * w + x]);
                                let got = cols[((ci * k + ky) * k + kx) * n + oy * g.out_width() + ox];
                                assert_eq!(got, expect);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = geo(6, 5, 3, 2, 1);
        let image: Vec<f32> = (0..g.in_image_len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let cols_probe: Vec<f32> = (0..g.patch_len() * g.out_spatial())
            .map(|i| (i as f32 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&g, &image, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(&a, &b)| f64::from(a * b)).sum();
        let mut back = vec![0.0; image.len()];
        col2im(&g, &cols_probe, &mut back);
        let rhs: f64 = back.iter().zip(&image).map(|(&a, &b)| f64::from(a * b)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
