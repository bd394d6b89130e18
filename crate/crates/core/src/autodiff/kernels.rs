//! Dense kernels shared by the forward and backward rules.

use super::tensor::{strides, Real};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `trans_a` the slice `a` holds a row-major `k x m` matrix; likewise
/// `trans_b` means `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    c: &mut [Real],
    beta: Real,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the three slices, and `c` does not alias.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Copies `data` (laid out as `shape`) into the axis order `perm`.
pub(crate) fn permute(data: &[Real], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    // Odometer over the output index; the innermost axis is copied in a tight loop.
    let inner_len = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut index = vec![0usize; rank - 1];
    let mut offset = 0usize;
    loop {
        let mut src = offset;
        for _ in 0..inner_len {
            out.push(data[src]);
            src += inner_stride;
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            index[axis] += 1;
            offset += src_strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C*kh*kw, OH*OW]`.
pub(crate) fn im2col(img: &[Real], g: &ConvGeometry, cols: &mut [Real]) {
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0
                            && (ii as usize) < g.height
                            && jj >= 0
                            && (jj as usize) < g.width
                        {
                            img[(c * g.height + ii as usize) * g.width + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im(cols: &[Real], g: &ConvGeometry, img: &mut [Real]) {
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * ol..(row + 1) * ol];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii as usize >= g.height {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + ii as usize) * g.width + jj as usize] += src[oi * g.out_w + oj];
                    }
                }
                row += 1;
            }
        }
    }
}

#[inline]
pub(crate) fn erf(x: Real) -> Real {
    #[cfg(not(feature = "f32"))]
    {
        libm::erf(x)
    }
    #[cfg(feature = "f32")]
    {
        libm::erff(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[Real], b: &[Real]) -> Vec<Real> {
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

    fn transpose(rows: usize, cols: usize, x: &[Real]) -> Vec<Real> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<Real> = (0..m * k).map(|v| (v as Real * 0.37).sin()).collect();
        let b: Vec<Real> = (0..k * n).map(|v| (v as Real * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<Real> = (0..24).map(|v| v as Real).collect();
        let perm = [2, 0, 1];
        let (s, p) = permute(&data, &shape, &perm);
        assert_eq!(s, vec![4, 2, 3]);
        // out[i][j][l] = in[j][l][i]
        assert_eq!(p[1 * 6 + 0 * 3 + 2], data[0 * 12 + 2 * 4 + 1]);
        let (s2, back) = permute(&p, &s, &inverse_permutation(&perm));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }
}
