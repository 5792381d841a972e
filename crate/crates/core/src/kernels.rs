//! Dense loops shared by the tape ops. All matrices are row-major slices.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Four independent lanes so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

impl ConvGeometry {
    /// Output columns `ox` whose input column `ox·stride + kj − pad` is in range.
    fn valid_ox(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.padding.saturating_sub(kj).div_ceil(self.stride);
        let hi = (self.w + self.padding).saturating_sub(kj).div_ceil(self.stride);
        lo.min(self.w_out)..hi.min(self.w_out)
    }

    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki).checked_sub(self.padding).filter(|&iy| iy < self.h)
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C·kh·kw, h_out·w_out]` patch
/// matrix whose rows sit `ld` apart in `col`.
pub(crate) fn im2col(g: &ConvGeometry, input: &[f64], col: &mut [f64], ld: usize) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ld..row * ld + cols];
                let xs = g.valid_ox(kj);
                for oy in 0..g.h_out {
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let Some(iy) = g.input_row(oy, ki) else {
                        line.fill(0.0);
                        continue;
                    };
                    line[..xs.start].fill(0.0);
                    line[xs.end..].fill(0.0);
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xs.clone() {
                        line[ox] = src[ox * g.stride + kj - g.padding];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
pub(crate) fn col2im(g: &ConvGeometry, col: &[f64], input_grad: &mut [f64], ld: usize) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ld..row * ld + cols];
                let xs = g.valid_ox(kj);
                for oy in 0..g.h_out {
                    let Some(iy) = g.input_row(oy, ki) else { continue };
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xs.clone() {
                        dst[ox * g.stride + kj - g.padding] += line[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut out);
        assert_eq!(out, naive);

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut out);
        for (x, y) in out.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut out);
        for (x, y) in out.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
