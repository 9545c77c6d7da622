//! Geometric transforms of `H × W × C` images.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape("image", format!("{s:?} is not H x W x C"))),
    }
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (d, s) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Bilinear resampling with pixel centres at half-integer coordinates.
/// Resizing to the same size returns the input unchanged.
pub fn resize_bilinear(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (h, w, c) = dims(image)?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::usage("resize to an empty image"));
    }
    if (new_h, new_w) == (h, w) {
        let mut t = image.clone();
        t.clear_grad();
        return Ok(t);
    }
    let src = image.data();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = taps(new_h, h);
    let xs = taps(new_w, w);
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![new_h, new_w, c], out)
}

/// Output size that scales the longer side to `longest` while keeping the
/// aspect ratio.
pub fn fit_longest_side(h: usize, w: usize, longest: usize) -> (usize, usize) {
    let scale = longest as f64 / h.max(w) as f64;
    let side = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (side(h), side(w))
}
