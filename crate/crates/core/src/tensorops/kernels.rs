//! Raw numeric kernels over contiguous row-major buffers.
//!
//! GEMM is delegated to `matrixmultiply`; the convolution kernels lower to
//! GEMM via im2col (spatial) or per-tap row shifts (temporal).

use alloc::vec;
use alloc::vec::Vec;

use crate::Scalar;

/// `c = a·b (+ c when accumulate)` for row-major `a[m×k]`, `b[k×n]`.
/// `trans_a` / `trans_b` read the stored matrix transposed, so `a` is then
/// stored as `[k×m]` and `b` as `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    trans_a: bool,
    b: &[Scalar],
    trans_b: bool,
    c: &mut [Scalar],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the exact extent implied
    // by (m, k, n) and the chosen strides.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as mm;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as mm;

#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const Scalar,
    rsa: isize,
    csa: isize,
    b: *const Scalar,
    rsb: isize,
    csb: isize,
    beta: Scalar,
    c: *mut Scalar,
    rsc: isize,
    csc: isize,
) {
    mm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Geometry of a 3x3 spatial convolution with one pixel of zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl SpatialGeom {
    pub const K: usize = 3;
    pub const PAD: usize = 1;

    pub fn out_h(&self) -> usize {
        (self.h + 2 * Self::PAD - Self::K) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * Self::PAD - Self::K) / self.stride + 1
    }
    fn cols(&self) -> usize {
        Self::K * Self::K * self.c_in
    }
}

fn im2col(frame: &[Scalar], g: &SpatialGeom, col: &mut [Scalar]) {
    let (oh, ow, cols) = (g.out_h(), g.out_w(), g.cols());
    col.fill(0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.c_in;
                    let dst = (ky * 3 + kx) * g.c_in;
                    row[dst..dst + g.c_in].copy_from_slice(&frame[src..src + g.c_in]);
                }
            }
        }
    }
}

fn col2im_add(col: &[Scalar], g: &SpatialGeom, frame: &mut [Scalar]) {
    let (oh, ow, cols) = (g.out_h(), g.out_w(), g.cols());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &col[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c_in;
                    let src = (ky * 3 + kx) * g.c_in;
                    for c in 0..g.c_in {
                        frame[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Forward of a [1,3,3] convolution over `frames` independent images.
pub fn conv_spatial_forward(x: &[Scalar], k: &[Scalar], frames: usize, g: &SpatialGeom) -> Vec<Scalar> {
    let in_sz = g.h * g.w * g.c_in;
    let out_rows = g.out_h() * g.out_w();
    let mut out = vec![0.0; frames * out_rows * g.c_out];
    let mut col = vec![0.0; out_rows * g.cols()];
    for f in 0..frames {
        im2col(&x[f * in_sz..(f + 1) * in_sz], g, &mut col);
        gemm(
            out_rows,
            g.cols(),
            g.c_out,
            &col,
            false,
            k,
            false,
            &mut out[f * out_rows * g.c_out..(f + 1) * out_rows * g.c_out],
            false,
        );
    }
    out
}

/// Gradients of a spatial convolution with respect to input and kernel.
pub fn conv_spatial_backward(
    x: &[Scalar],
    k: &[Scalar],
    dy: &[Scalar],
    frames: usize,
    g: &SpatialGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<Scalar>>, Option<Vec<Scalar>>) {
    let in_sz = g.h * g.w * g.c_in;
    let out_rows = g.out_h() * g.out_w();
    let out_sz = out_rows * g.c_out;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let mut col = vec![0.0; out_rows * g.cols()];
    for f in 0..frames {
        let dyf = &dy[f * out_sz..(f + 1) * out_sz];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[f * in_sz..(f + 1) * in_sz], g, &mut col);
            gemm(g.cols(), out_rows, g.c_out, &col, true, dyf, false, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(out_rows, g.c_out, g.cols(), dyf, false, k, true, &mut col, false);
            col2im_add(&col, g, &mut dx[f * in_sz..(f + 1) * in_sz]);
        }
    }
    (dx, dk)
}

/// Geometry of a [3,1,1] temporal convolution with one frame of zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalGeom {
    pub batch: usize,
    pub t: usize,
    /// Pixels per frame (H·W).
    pub pixels: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl TemporalGeom {
    pub fn out_t(&self) -> usize {
        (self.t + 2 - 3) / self.stride + 1
    }

    /// Input frame feeding output frame `to` through tap `k`, if inside the clip.
    fn source(&self, to: usize, k: usize) -> Option<usize> {
        let ti = (to * self.stride + k) as isize - 1;
        (ti >= 0 && (ti as usize) < self.t).then_some(ti as usize)
    }
}

pub fn conv_temporal_forward(x: &[Scalar], k: &[Scalar], g: &TemporalGeom) -> Vec<Scalar> {
    let in_frame = g.pixels * g.c_in;
    let out_frame = g.pixels * g.c_out;
    let ot = g.out_t();
    let mut out = vec![0.0; g.batch * ot * out_frame];
    let tap = g.c_in * g.c_out;
    for b in 0..g.batch {
        for to in 0..ot {
            let dst = &mut out[(b * ot + to) * out_frame..(b * ot + to + 1) * out_frame];
            for kt in 0..3 {
                if let Some(ti) = g.source(to, kt) {
                    let src = &x[(b * g.t + ti) * in_frame..(b * g.t + ti + 1) * in_frame];
                    gemm(
                        g.pixels,
                        g.c_in,
                        g.c_out,
                        src,
                        false,
                        &k[kt * tap..(kt + 1) * tap],
                        false,
                        dst,
                        true,
                    );
                }
            }
        }
    }
    out
}

pub fn conv_temporal_backward(
    x: &[Scalar],
    k: &[Scalar],
    dy: &[Scalar],
    g: &TemporalGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<Scalar>>, Option<Vec<Scalar>>) {
    let in_frame = g.pixels * g.c_in;
    let out_frame = g.pixels * g.c_out;
    let ot = g.out_t();
    let tap = g.c_in * g.c_out;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for b in 0..g.batch {
        for to in 0..ot {
            let dyf = &dy[(b * ot + to) * out_frame..(b * ot + to + 1) * out_frame];
            for kt in 0..3 {
                let Some(ti) = g.source(to, kt) else { continue };
                let range = (b * g.t + ti) * in_frame..(b * g.t + ti + 1) * in_frame;
                if let Some(dk) = dk.as_mut() {
                    gemm(
                        g.c_in,
                        g.pixels,
                        g.c_out,
                        &x[range.clone()],
                        true,
                        dyf,
                        false,
                        &mut dk[kt * tap..(kt + 1) * tap],
                        true,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        g.pixels,
                        g.c_out,
                        g.c_in,
                        dyf,
                        false,
                        &k[kt * tap..(kt + 1) * tap],
                        true,
                        &mut dx[range],
                        true,
                    );
                }
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[Scalar], b: &[Scalar]) -> Vec<Scalar> {
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

    fn transpose(r: usize, c: usize, x: &[Scalar]) -> Vec<Scalar> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (4, 5, 3);
        let a: Vec<Scalar> = (0..m * k).map(|i| (i as Scalar * 0.37).sin()).collect();
        let b: Vec<Scalar> = (0..k * n).map(|i| (i as Scalar * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { transpose(m, k, &a) } else { a.clone() };
            let bb = if tb { transpose(k, n, &b) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &aa, ta, &bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let mut c = vec![1.0; 4];
        gemm(2, 1, 2, &[1.0, 2.0], false, &[3.0, 4.0], false, &mut c, true);
        assert_eq!(c, vec![4.0, 5.0, 7.0, 9.0]);
    }
}
