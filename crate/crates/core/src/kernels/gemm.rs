//! Blocked `f32` matrix multiply with a fixed per-element summation order.
//!
//! Every output is computed as `c = c0; for p in 0..k { c = c + a[i,p] * b[p,j] }`
//! with `c0` either zero or the existing value of `c`. Blocking only changes
//! which outputs are in flight at once, never the order of additions into
//! any single output, so results are bit-identical to the naive triple loop
//! regardless of tile sizes or SIMD width. Rust never contracts `a * b + c`
//! into a fused multiply-add, which is what makes that hold.

const KC: usize = 256;
const MC: usize = 72;
const NC: usize = 2048;
const MR: usize = 6;

/// Strided read-only matrix view.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too short");
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of the same buffer.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// `C = A B` (or `C += A B` when `accumulate`), `C` row-major with row
/// stride `ldc`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], ldc: usize, accumulate: bool) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: AVX-512F support was just checked.
            return blocked::<32>(a, b, c, ldc, accumulate, |ap, bp, acc| unsafe { micro_kernel_avx512(ap, bp, acc) });
        }
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was just checked.
            return blocked::<16>(a, b, c, ldc, accumulate, |ap, bp, acc| unsafe { micro_kernel_avx(ap, bp, acc) });
        }
    }
    blocked::<16>(a, b, c, ldc, accumulate, micro_kernel_portable::<16>)
}

fn blocked<const NR: usize>(
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
    kernel: impl Fn(&[f32], &[f32], &mut [[f32; NR]; MR]),
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "output buffer too short");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(0.0);
            }
        }
        return;
    }

    let kc_max = KC.min(k);
    let mut packed_b = vec![0.0f32; kc_max * NC.min(n.next_multiple_of(NR))];
    let mut packed_a = vec![0.0f32; kc_max * MC.min(m.next_multiple_of(MR))];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            let load = accumulate || pc > 0;
            pack_b::<NR>(&b, pc, kc, jc, nc, &mut packed_b);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(&a, ic, mc, pc, kc, &mut packed_a);
                for jr in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jr);
                    let bp = &packed_b[jr / NR * kc * NR..][..kc * NR];
                    for ir in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ir);
                        let ap = &packed_a[ir / MR * kc * MR..][..kc * MR];
                        let origin = (ic + ir) * ldc + jc + jr;
                        let mut acc = [[0.0f32; NR]; MR];
                        if load {
                            for i in 0..mr {
                                acc[i][..nr].copy_from_slice(&c[origin + i * ldc..][..nr]);
                            }
                        }
                        kernel(ap, bp, &mut acc);
                        for i in 0..mr {
                            c[origin + i * ldc..][..nr].copy_from_slice(&acc[i][..nr]);
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel_portable<const NR: usize>(a: &[f32], b: &[f32], acc: &mut [[f32; NR]; MR]) {
    for (ap, bp) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for i in 0..MR {
            let ai = ap[i];
            for j in 0..NR {
                acc[i][j] += ai * bp[j];
            }
        }
    }
}

// Multiply and add stay separate in both vector kernels: the rounding
// sequence must match the scalar loop exactly.

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn micro_kernel_avx(a: &[f32], b: &[f32], acc: &mut [[f32; 16]; MR]) {
    use std::arch::x86_64::*;
    let kc = a.len() / MR;
    assert!(b.len() >= kc * 16);
    let mut c0 = [_mm256_setzero_ps(); MR];
    let mut c1 = [_mm256_setzero_ps(); MR];
    for i in 0..MR {
        c0[i] = _mm256_loadu_ps(acc[i].as_ptr());
        c1[i] = _mm256_loadu_ps(acc[i].as_ptr().add(8));
    }
    let mut ap = a.as_ptr();
    let mut bp = b.as_ptr();
    for _ in 0..kc {
        let b0 = _mm256_loadu_ps(bp);
        let b1 = _mm256_loadu_ps(bp.add(8));
        for i in 0..MR {
            let ai = _mm256_broadcast_ss(&*ap.add(i));
            c0[i] = _mm256_add_ps(c0[i], _mm256_mul_ps(ai, b0));
            c1[i] = _mm256_add_ps(c1[i], _mm256_mul_ps(ai, b1));
        }
        ap = ap.add(MR);
        bp = bp.add(16);
    }
    for i in 0..MR {
        _mm256_storeu_ps(acc[i].as_mut_ptr(), c0[i]);
        _mm256_storeu_ps(acc[i].as_mut_ptr().add(8), c1[i]);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn micro_kernel_avx512(a: &[f32], b: &[f32], acc: &mut [[f32; 32]; MR]) {
    use std::arch::x86_64::*;
    let kc = a.len() / MR;
    assert!(b.len() >= kc * 32);
    let mut c0 = [_mm512_setzero_ps(); MR];
    let mut c1 = [_mm512_setzero_ps(); MR];
    for i in 0..MR {
        c0[i] = _mm512_loadu_ps(acc[i].as_ptr());
        c1[i] = _mm512_loadu_ps(acc[i].as_ptr().add(16));
    }
    let mut ap = a.as_ptr();
    let mut bp = b.as_ptr();
    for _ in 0..kc {
        let b0 = _mm512_loadu_ps(bp);
        let b1 = _mm512_loadu_ps(bp.add(16));
        for i in 0..MR {
            let ai = _mm512_set1_ps(*ap.add(i));
            c0[i] = _mm512_add_ps(c0[i], _mm512_mul_ps(ai, b0));
            c1[i] = _mm512_add_ps(c1[i], _mm512_mul_ps(ai, b1));
        }
        ap = ap.add(MR);
        bp = bp.add(32);
    }
    for i in 0..MR {
        _mm512_storeu_ps(acc[i].as_mut_ptr(), c0[i]);
        _mm512_storeu_ps(acc[i].as_mut_ptr().add(16), c1[i]);
    }
}

fn pack_a(a: &MatRef<'_>, i0: usize, mc: usize, p0: usize, kc: usize, out: &mut [f32]) {
    for (panel, ir) in (0..mc).step_by(MR).enumerate() {
        let dst = &mut out[panel * kc * MR..][..kc * MR];
        let mr = MR.min(mc - ir);
        for p in 0..kc {
            let row = &mut dst[p * MR..][..MR];
            for i in 0..mr {
                row[i] = a.at(i0 + ir + i, p0 + p);
            }
            row[mr..].fill(0.0);
        }
    }
}

fn pack_b<const NR: usize>(b: &MatRef<'_>, p0: usize, kc: usize, j0: usize, nc: usize, out: &mut [f32]) {
    for (panel, jr) in (0..nc).step_by(NR).enumerate() {
        let dst = &mut out[panel * kc * NR..][..kc * NR];
        let nr = NR.min(nc - jr);
        if b.col_stride == 1 {
            for p in 0..kc {
                let row = &mut dst[p * NR..][..NR];
                let start = (p0 + p) * b.row_stride + j0 + jr;
                row[..nr].copy_from_slice(&b.data[start..start + nr]);
                row[nr..].fill(0.0);
            }
        } else if b.row_stride == 1 {
            // columns of a transposed view are contiguous
            for j in 0..NR {
                if j < nr {
                    let col = &b.data[(j0 + jr + j) * b.col_stride + p0..][..kc];
                    for (p, &v) in col.iter().enumerate() {
                        dst[p * NR + j] = v;
                    }
                } else {
                    for p in 0..kc {
                        dst[p * NR + j] = 0.0;
                    }
                }
            }
        } else {
            for p in 0..kc {
                let row = &mut dst[p * NR..][..NR];
                for j in 0..nr {
                    row[j] = b.at(p0 + p, j0 + jr + j);
                }
                row[nr..].fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn naive(a: MatRef<'_>, b: MatRef<'_>, c0: Option<&[f32]>) -> Vec<f32> {
        let (m, n) = (a.rows(), b.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = c0.map_or(0.0, |c| c[i * n + j]);
                for p in 0..a.cols() {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn random(rng: &mut Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.next_f32() * 2.0 - 1.0).collect()
    }

    #[test]
    fn bit_identical_to_naive_loop() {
        let mut rng = Rng::new(42);
        for &(m, k, n) in &[
            (1, 1, 1),
            (3, 5, 7),
            (8, 16, 16),
            (17, 300, 33),
            (70, 513, 20),
            (2, 1000, 2100),
        ] {
            let a = random(&mut rng, m * k);
            let b = random(&mut rng, k * n);
            let bt: Vec<f32> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
            let c0 = random(&mut rng, m * n);
            let av = MatRef::row_major(&a, m, k);
            let expect = naive(av, MatRef::row_major(&b, k, n), None);
            let mut c = vec![f32::NAN; m * n];
            gemm(av, MatRef::row_major(&b, k, n), &mut c, n, false);
            assert_eq!(c, expect, "{m}x{k}x{n}");
            let mut c2 = vec![0.0; m * n];
            gemm(av, MatRef::row_major(&bt, n, k).t(), &mut c2, n, false);
            assert_eq!(c2, expect, "transposed b {m}x{k}x{n}");
            let mut c3 = c0.clone();
            gemm(av, MatRef::row_major(&b, k, n), &mut c3, n, true);
            assert_eq!(c3, naive(av, MatRef::row_major(&b, k, n), Some(&c0)));
        }
    }

    #[test]
    fn strided_output() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [9.0f32; 6];
        gemm(MatRef::row_major(&a, 2, 2), MatRef::row_major(&b, 2, 2), &mut c, 3, false);
        assert_eq!(c, [1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
    }

    #[cfg(target_arch = "x86_64")]
    fn check_vector_kernel<const NR: usize>(kernel: impl Fn(&[f32], &[f32], &mut [[f32; NR]; MR])) {
        let mut rng = Rng::new(17);
        let kc = 37;
        let a = random(&mut rng, kc * MR);
        let b = random(&mut rng, kc * NR);
        let mut init = [[0.0f32; NR]; MR];
        for row in init.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.next_f32();
            }
        }
        let mut p = init;
        let mut v = init;
        micro_kernel_portable(&a, &b, &mut p);
        kernel(&a, &b, &mut v);
        assert_eq!(p, v);
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn vector_kernels_match_portable() {
        if std::arch::is_x86_feature_detected!("avx") {
            check_vector_kernel::<16>(|a, b, acc| unsafe { micro_kernel_avx(a, b, acc) });
        }
        if std::arch::is_x86_feature_detected!("avx512f") {
            check_vector_kernel::<32>(|a, b, acc| unsafe { micro_kernel_avx512(a, b, acc) });
        }
    }
}
