//! Raw slice kernels. All matrices are row-major; every routine accumulates
//! into its output.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the loop vectorise
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one `(c_in, h, w)` image into a `(c_in·kh·kw) × (h_out·w_out)`
/// patch matrix, writing zeros for padded taps.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src_row[oy * g.w_out + ox];
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

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c2);
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            h_out: 3,
            w_out: 2,
        };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; g.rows() * g.cols()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        // <im2col(x), y> == <x, col2im(y)>
        assert!((dot(&cols, &y) - dot(&x, &back)).abs() < 1e-12);
    }
}
