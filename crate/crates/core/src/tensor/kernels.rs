//! Raw f32 kernels shared by forward and backward passes.
//!
//! All products accumulate into `out` (`out += ...`), so callers zero the
//! buffer for a fresh result and reuse it for gradient accumulation.

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[m×n] += A[m×k] · B[k×n]` where element `(r, c)` of a matrix lives at
/// `r·rs + c·cs` of its slice.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f32], (rsa, csa): (usize, usize), b: &[f32], (rsb, csb): (usize, usize), out: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index reachable from the given
    // shapes and strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            1.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    gemm_strided(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    gemm_strided(m, k, n, a, (k, 1), b, (1, k), out);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    gemm_strided(m, k, n, a, (1, m), b, (n, 1), out);
}

/// Geometry of a 2-D convolution over `[batch × h × w × c_in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    /// Unfolds the input into `[batch·oh·ow × kh·kw·c_in]` patches.
    pub fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let (oh, ow, patch) = (self.out_h(), self.out_w(), self.patch());
        let mut cols = vec![0.0; self.batch * oh * ow * patch];
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let dst = row + (ky * self.kw + kx) * self.c_in;
                            cols[dst..dst + self.c_in].copy_from_slice(&x[src..src + self.c_in]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back.
    pub fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (oh, ow, patch) = (self.out_h(), self.out_w(), self.patch());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let src = row + (ky * self.kw + kx) * self.c_in;
                            for c in 0..self.c_in {
                                dx[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}
