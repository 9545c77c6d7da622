//! Slice-level kernels shared by the forward and backward passes.

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with each operand
/// optionally transposed. `a` is m×k and `b` is k×n after transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the pointers come from slices whose lengths were checked against
    // the m/k/n extents above, and the strides address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.in_h + 2 * self.pad >= self.kernel_h
            && self.in_w + 2 * self.pad >= self.kernel_w
    }
}

/// Unfolds the input into a `[C·kh·kw, Ho·Wo]` column matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_n = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, dinput: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_n = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dinput[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling over `[C, H, W]`; odd trailing rows/columns are
/// dropped. Returns the output and, per output element, the flat input index
/// of the first (row-major) maximum.
pub(crate) fn max_pool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// A rectangle of feature-map cells, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Boundaries of `bins` consecutive bins over `len` cells.
///
/// When `len >= bins` the cells are split evenly with the first `len % bins`
/// bins taking one extra cell. Shorter spans are stretched: bin `i` covers
/// the single cell `i * len / bins`.
pub(crate) fn bin_edges(len: usize, bins: usize) -> Vec<(usize, usize)> {
    if len >= bins {
        let base = len / bins;
        let extra = len % bins;
        let mut start = 0;
        (0..bins)
            .map(|i| {
                let size = base + usize::from(i < extra);
                let edge = (start, start + size);
                start += size;
                edge
            })
            .collect()
    } else {
        (0..bins)
            .map(|i| {
                let cell = i * len / bins;
                (cell, cell + 1)
            })
            .collect()
    }
}

/// Max pools each box of a `[C, H, W]` map onto a `grid × grid` lattice.
///
/// Output row `r` holds `C · grid · grid` values ordered channel-major, then
/// bin row, then bin column. The second vector records the flat map index
/// that produced each output value.
pub(crate) fn roi_max_pool(
    map: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    boxes: &[CellBox],
    grid: usize,
) -> (Vec<f64>, Vec<usize>) {
    let width = channels * grid * grid;
    let mut out = Vec::with_capacity(boxes.len() * width);
    let mut arg = Vec::with_capacity(boxes.len() * width);
    for b in boxes {
        debug_assert!(b.y0 < b.y1 && b.y1 <= h && b.x0 < b.x1 && b.x1 <= w);
        let ybins = bin_edges(b.y1 - b.y0, grid);
        let xbins = bin_edges(b.x1 - b.x0, grid);
        for ch in 0..channels {
            let plane = ch * h * w;
            for &(ys, ye) in &ybins {
                for &(xs, xe) in &xbins {
                    let mut best = plane + (b.y0 + ys) * w + b.x0 + xs;
                    for y in b.y0 + ys..b.y0 + ye {
                        let row = plane + y * w;
                        for x in b.x0 + xs..b.x0 + xe {
                            if map[row + x] > map[best] {
                                best = row + x;
                            }
                        }
                    }
                    out.push(map[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// Numerically stable softmax along one axis.
pub(crate) fn softmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + k;
            let max = (0..len).map(|i| data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (data[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
    out
}

/// Stable `log Σ exp` along one axis; the axis is removed from the result.
pub(crate) fn log_sum_exp(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + k;
            let max = (0..len).map(|i| data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|i| (data[at(i)] - max).exp()).sum();
            out[o * inner + k] = max + total.ln();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_edges_split_evenly_with_extra_cells_first() {
        assert_eq!(bin_edges(7, 3), vec![(0, 3), (3, 5), (5, 7)]);
        assert_eq!(bin_edges(6, 3), vec![(0, 2), (2, 4), (4, 6)]);
        assert_eq!(bin_edges(4, 1), vec![(0, 4)]);
    }

    #[test]
    fn bin_edges_stretch_short_spans() {
        assert_eq!(bin_edges(1, 3), vec![(0, 1), (0, 1), (0, 1)]);
        assert_eq!(bin_edges(2, 3), vec![(0, 1), (0, 1), (1, 2)]);
    }

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn max_pool_prefers_first_maximum() {
        let input = [1.0, 1.0, 1.0, 1.0];
        let (out, arg) = max_pool2(&input, 1, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry {
            in_channels: 2,
            in_h: 5,
            in_w: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
