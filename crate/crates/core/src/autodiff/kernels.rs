//! Slice-level forward/backward kernels. Shapes are validated by the caller.

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically
/// `m × k` and `b` logically `k × n`. A transposed operand is stored in the
/// transposed row-major layout (`k × m` for `a`, `n × k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry of a cross-correlation over one image of
/// `channels × height × width`, producing `out_h × out_w` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `img` into a `rows × positions` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.rows() * g.positions());
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let src_y = g.source(oy, ki, g.height);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (src_y, g.source(ox, kj, g.width)) {
                            (Some(y), Some(x)) => img[(c * g.height + y) * g.width + x],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    debug_assert_eq!(img.len(), g.image_len());
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki, g.height) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source(ox, kj, g.width) {
                            img[(c * g.height + y) * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch. `weight` is `cout × g.rows()`.
pub(crate) fn conv_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
) -> Vec<f64> {
    let (k, p) = (g.rows(), g.positions());
    let mut out = vec![0.0; batch * cout * p];
    let mut cols = vec![0.0; k * p];
    for n in 0..batch {
        im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], g, &mut cols);
        let y = &mut out[n * cout * p..(n + 1) * cout * p];
        gemm(cout, k, p, weight, false, &cols, false, y, false);
        if let Some(b) = bias {
            for (co, row) in y.chunks_exact_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    cout: usize,
    dy: &[f64],
) -> ConvGrads {
    let (k, p) = (g.rows(), g.positions());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for n in 0..batch {
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let dyn_ = &dy[n * cout * p..(n + 1) * cout * p];
        im2col(img, g, &mut cols);
        gemm(cout, p, k, dyn_, false, &cols, true, &mut dw, true);
        gemm(k, cout, p, weight, true, dyn_, false, &mut dcols, false);
        col2im(&dcols, g, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        for (co, row) in dyn_.chunks_exact(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Transposed convolution. `g` describes the matching forward convolution
/// over the *output* image (so `g.out_h × g.out_w` is the input extent);
/// `weight` is `cin × g.rows()`.
pub(crate) fn conv_transpose_forward(
    x: &[f64],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (k, p) = (g.rows(), g.positions());
    let hw = g.height * g.width;
    let mut out = vec![0.0; batch * g.image_len()];
    let mut cols = vec![0.0; k * p];
    for n in 0..batch {
        let xn = &x[n * cin * p..(n + 1) * cin * p];
        gemm(k, cin, p, weight, true, xn, false, &mut cols, false);
        let y = &mut out[n * g.image_len()..(n + 1) * g.image_len()];
        col2im(&cols, g, y);
        if let Some(b) = bias {
            for (co, plane) in y.chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    x: &[f64],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    weight: &[f64],
    dy: &[f64],
) -> ConvGrads {
    let (k, p) = (g.rows(), g.positions());
    let hw = g.height * g.width;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.channels];
    let mut dcols = vec![0.0; k * p];
    for n in 0..batch {
        let xn = &x[n * cin * p..(n + 1) * cin * p];
        let dyn_ = &dy[n * g.image_len()..(n + 1) * g.image_len()];
        im2col(dyn_, g, &mut dcols);
        gemm(
            cin,
            k,
            p,
            weight,
            false,
            &dcols,
            false,
            &mut dx[n * cin * p..(n + 1) * cin * p],
            false,
        );
        gemm(cin, p, k, xn, false, &dcols, true, &mut dw, true);
        for (co, plane) in dyn_.chunks_exact(hw).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Per-(item, channel) mean and inverse standard deviation over `hw` values.
pub(crate) fn instance_stats(x: &[f64], hw: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks_exact(hw)
        .map(|plane| {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

pub(crate) fn instance_norm_forward(
    x: &[f64],
    channels: usize,
    hw: usize,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Vec<f64> {
    let stats = instance_stats(x, hw, eps);
    let mut out = vec![0.0; x.len()];
    for (plane_idx, ((src, dst), (mean, inv))) in
        x.chunks_exact(hw).zip(out.chunks_exact_mut(hw)).zip(stats).enumerate()
    {
        let c = plane_idx % channels;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = scale[c] * (v - mean) * inv + shift[c];
        }
    }
    out
}

pub(crate) struct NormGrads {
    pub input: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub(crate) fn instance_norm_backward(
    x: &[f64],
    channels: usize,
    hw: usize,
    scale: &[f64],
    eps: f64,
    dy: &[f64],
) -> NormGrads {
    let stats = instance_stats(x, hw, eps);
    let m = hw as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dscale = vec![0.0; channels];
    let mut dshift = vec![0.0; channels];
    for (plane_idx, (mean, inv)) in stats.into_iter().enumerate() {
        let c = plane_idx % channels;
        let range = plane_idx * hw..(plane_idx + 1) * hw;
        let (xs, dys) = (&x[range.clone()], &dy[range.clone()]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for (&v, &d) in xs.iter().zip(dys) {
            let xhat = (v - mean) * inv;
            dscale[c] += d * xhat;
            dshift[c] += d;
            sum_dxhat += d * scale[c];
            sum_dxhat_xhat += d * scale[c] * xhat;
        }
        for ((o, &v), &d) in dx[range].iter_mut().zip(xs).zip(dys) {
            let xhat = (v - mean) * inv;
            *o = inv / m * (m * d * scale[c] - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    NormGrads {
        input: dx,
        scale: dscale,
        shift: dshift,
    }
}

/// 2×2 stride-2 max pooling over `planes` planes of `h × w`. Returns the
/// pooled values and, per output, the flat input index of the maximum (first
/// occurrence in row-major window order wins ties).
pub(crate) fn max_pool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Softmax along axis 1 of a tensor viewed as `outer × classes × inner`.
pub(crate) fn softmax_axis1(x: &[f64], outer: usize, classes: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * classes * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let max = (0..classes).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..classes {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                total += e;
            }
            for c in 0..classes {
                out[at(c)] /= total;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                expect[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 3,
        };
        let img: Vec<f64> = (0..g.image_len()).map(|i| (i as f64).sin()).collect();
        let cols_y: Vec<f64> = (0..g.rows() * g.positions()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; cols_y.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_y).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_tie_takes_first() {
        let (vals, arg) = max_pool2x2(&[1.0, 1.0, 1.0, 1.0], 1, 2, 2);
        assert_eq!(vals, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
