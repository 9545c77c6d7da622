//! Deterministic sliding-window region proposals with an edge-density
//! objectness score.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluation::iou;
use crate::network::Region;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Window side as a fraction of the shorter image side.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub ratios: Vec<f64>,
    /// Step between windows as a fraction of the window extent.
    pub stride_fraction: f64,
    pub max_proposals: usize,
    pub dedupe_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            scales: vec![0.22, 0.28, 0.35, 0.44],
            ratios: vec![1.0],
            stride_fraction: 0.25,
            max_proposals: 1000,
            dedupe_iou: 0.95,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("proposals: {m}")));
        if self.scales.is_empty() || self.ratios.is_empty() {
            return bad("scales and ratios must be non-empty");
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("scales and ratios must be positive");
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return bad("stride_fraction must lie in (0, 1]");
        }
        if self.max_proposals == 0 {
            return bad("max_proposals must be at least 1");
        }
        if !(self.dedupe_iou > 0.0 && self.dedupe_iou <= 1.0) {
            return bad("dedupe_iou must lie in (0, 1]");
        }
        Ok(())
    }
}

/// All windows of every (scale, ratio) slid across the image, in
/// scale-major then row-major order, deduplicated and capped.
pub fn grid_proposals(width: usize, height: usize, cfg: &ProposalConfig) -> Result<Vec<Region>> {
    cfg.validate()?;
    let side = width.min(height) as f64;
    let mut out = Vec::new();
    let mut smallest = (usize::MAX, usize::MAX);
    for &scale in &cfg.scales {
        for &ratio in &cfg.ratios {
            let ww = ((scale * side * ratio.sqrt()).round() as usize).max(1);
            let wh = ((scale * side / ratio.sqrt()).round() as usize).max(1);
            smallest = smallest.min((ww, wh));
            if ww > width || wh > height {
                continue;
            }
            let sx = ((cfg.stride_fraction * ww as f64).round() as usize).max(1);
            let sy = ((cfg.stride_fraction * wh as f64).round() as usize).max(1);
            for iy in 0..=(height - wh) / sy {
                for ix in 0..=(width - ww) / sx {
                    let (x, y) = ((ix * sx) as f64, (iy * sy) as f64);
                    out.push(Region::new(x, y, x + ww as f64, y + wh as f64));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::usage(format!(
            "image {width}x{height} is smaller than every proposal window (smallest {}x{})",
            smallest.0, smallest.1
        )));
    }
    let mut out = dedupe_proposals(&out, cfg.dedupe_iou);
    out.truncate(cfg.max_proposals);
    Ok(out)
}

/// Greedy pass in input order dropping any region that overlaps an
/// already kept one by more than `iou_threshold`.
pub fn dedupe_proposals(regions: &[Region], iou_threshold: f64) -> Vec<Region> {
    let mut kept: Vec<Region> = Vec::with_capacity(regions.len());
    for r in regions {
        if kept.iter().all(|k| iou(k, r) <= iou_threshold) {
            kept.push(*r);
        }
    }
    kept
}

/// Summed-area table of the central-difference gradient magnitude.
struct EdgeIntegral {
    w: usize,
    h: usize,
    table: Vec<f64>,
}

impl EdgeIntegral {
    fn new(image: &Tensor) -> Result<Self> {
        let (h, w, c) = match image.shape() {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::shape("objectness", format!("{s:?} is not H x W x C"))),
        };
        let px = image.data();
        let intensity = |y: usize, x: usize| -> f64 {
            px[(y * w + x) * c..(y * w + x + 1) * c].iter().sum::<f64>() / c as f64
        };
        let mut table = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                let gx = (intensity(y, (x + 1).min(w - 1)) - intensity(y, x.saturating_sub(1))) / 2.0;
                let gy = (intensity((y + 1).min(h - 1), x) - intensity(y.saturating_sub(1), x)) / 2.0;
                row += (gx * gx + gy * gy).sqrt();
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Ok(EdgeIntegral { w, h, table })
    }

    fn mean(&self, r: &Region) -> f64 {
        let clampx = |v: f64| (v.max(0.0) as usize).min(self.w);
        let clampy = |v: f64| (v.max(0.0) as usize).min(self.h);
        let (x0, x1) = (clampx(r.x0.floor()), clampx(r.x1.ceil()));
        let (y0, y1) = (clampy(r.y0.floor()), clampy(r.y1.ceil()));
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let at = |y: usize, x: usize| self.table[y * (self.w + 1) + x];
        let total = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
        (total / ((x1 - x0) * (y1 - y0)) as f64).max(0.0)
    }
}

/// Mean gradient magnitude of the pixels a region covers.
pub fn edge_density(image: &Tensor, region: &Region) -> Result<f64> {
    Ok(EdgeIntegral::new(image)?.mean(region))
}

/// Edge density of each region divided by the largest one, so the
/// densest region scores 1. A flat image scores 0 everywhere.
pub fn edge_density_objectness(image: &Tensor, regions: &[Region]) -> Result<Vec<f64>> {
    let integral = EdgeIntegral::new(image)?;
    let raw: Vec<f64> = regions.iter().map(|r| integral.mean(r)).collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    Ok(raw
        .into_iter()
        .map(|v| if max > 0.0 { v / max } else { 0.0 })
        .collect())
}

/// Attaches edge-density objectness to every region.
pub fn score_proposals(image: &Tensor, regions: &[Region]) -> Result<Vec<Region>> {
    let scores = edge_density_objectness(image, regions)?;
    Ok(regions
        .iter()
        .zip(scores)
        .map(|(r, s)| r.with_objectness(s))
        .collect())
}

/// One line per region: `x0 y0 x1 y1 objectness` (objectness omitted when
/// the region has none).
pub fn format_proposals(regions: &[Region]) -> String {
    let mut s = String::new();
    for r in regions {
        let _ = match r.objectness {
            Some(o) => writeln!(s, "{} {} {} {} {}", r.x0, r.y0, r.x1, r.y1, o),
            None => writeln!(s, "{} {} {} {}", r.x0, r.y0, r.x1, r.y1),
        };
    }
    s
}

pub fn parse_proposals(text: &str, file: &Path) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |m: &str| Error::Parse {
            file: file.to_path_buf(),
            offset: here,
            message: format!("{m}: {line:?}"),
        };
        let nums = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| fail("bad number"))?;
        let r = match *nums.as_slice() {
            [x0, y0, x1, y1] => Region::new(x0, y0, x1, y1),
            [x0, y0, x1, y1, o] => Region::new(x0, y0, x1, y1).with_objectness(o),
            _ => return Err(fail("expected 4 or 5 fields")),
        };
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scales: Vec<f64>, stride: f64) -> ProposalConfig {
        ProposalConfig {
            scales,
            ratios: vec![1.0],
            stride_fraction: stride,
            ..ProposalConfig::default()
        }
    }

    #[test]
    fn full_image_scale_gives_one_region() {
        let r = grid_proposals(64, 64, &cfg(vec![1.0], 0.5)).unwrap();
        assert_eq!(r, vec![Region::new(0.0, 0.0, 64.0, 64.0)]);
    }

    #[test]
    fn half_scale_quarter_stride_gives_25_windows() {
        // floor((64 - 32) / 8) + 1 = 5 positions per axis.
        let r = grid_proposals(64, 64, &cfg(vec![0.5], 0.25)).unwrap();
        assert_eq!(r.len(), 25);
        assert_eq!(r[1], Region::new(8.0, 0.0, 40.0, 32.0));
        assert_eq!(r[5], Region::new(0.0, 8.0, 32.0, 40.0));
    }

    #[test]
    fn default_grid_is_valid_and_deterministic() {
        let a = grid_proposals(64, 64, &ProposalConfig::default()).unwrap();
        let b = grid_proposals(64, 64, &ProposalConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.validate(64.0, 64.0).is_ok()));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let err = grid_proposals(8, 8, &cfg(vec![0.5], 0.25)).err();
        assert!(err.is_none(), "scales are relative, so any image fits");
        let c = ProposalConfig {
            scales: vec![1.0],
            ratios: vec![4.0],
            ..ProposalConfig::default()
        };
        assert!(matches!(grid_proposals(16, 16, &c), Err(Error::Usage(_))));
    }

    #[test]
    fn dedupe_fixtures() {
        let a = Region::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(dedupe_proposals(&[a, a], 0.9), vec![a]);
        let far = Region::new(5.0, 5.0, 7.0, 7.0);
        assert_eq!(dedupe_proposals(&[a, far], 0.9), vec![a, far]);
        let b = Region::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(dedupe_proposals(&[a, b], 0.1), vec![a]);
    }

    fn step_image() -> Tensor {
        // Left half 0, right half 1: a vertical edge at x = 8.
        let data = (0..16 * 16).map(|i| if i % 16 >= 8 { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![16, 16, 1], data).unwrap()
    }

    #[test]
    fn edge_region_beats_flat_region() {
        let img = step_image();
        let edge = Region::new(4.0, 4.0, 12.0, 12.0);
        let flat = Region::new(0.0, 4.0, 4.0, 12.0);
        let s = edge_density_objectness(&img, &[edge, flat]).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        // Direct value: two edge columns of magnitude 0.5 out of eight.
        assert!((edge_density(&img, &edge).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn constant_image_has_zero_objectness() {
        let img = Tensor::full(&[16, 16, 1], 0.4);
        let regions = grid_proposals(16, 16, &cfg(vec![0.5], 0.5)).unwrap();
        assert!(edge_density_objectness(&img, &regions).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objectness_ignores_intensity_offset() {
        let img = step_image();
        let shifted = img.map(|v| v + 0.25);
        let regions = grid_proposals(16, 16, &cfg(vec![0.5], 0.25)).unwrap();
        assert_eq!(
            edge_density_objectness(&img, &regions).unwrap(),
            edge_density_objectness(&shifted, &regions).unwrap()
        );
    }

    #[test]
    fn proposal_lines_round_trip() {
        let regions = vec![
            Region::new(0.0, 1.0, 10.0, 12.0).with_objectness(0.1 + 0.2),
            Region::new(3.0, 3.0, 4.0, 5.0),
        ];
        let text = format_proposals(&regions);
        assert_eq!(parse_proposals(&text, Path::new("p.txt")).unwrap(), regions);
    }
}
