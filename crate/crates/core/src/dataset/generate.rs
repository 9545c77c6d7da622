use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::Region;
use crate::proposals::{grid_proposals, score_proposals, ProposalConfig};
use crate::training::LabelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Whether the pixel with top-left corner `(px, py)`, relative to a
    /// `size`-pixel bounding square, is painted.
    fn covers(self, px: usize, py: usize, size: usize) -> bool {
        let s = size as f64;
        let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
        match self {
            Shape::Square => true,
            Shape::Disk => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => (u - s / 2.0).abs() <= v / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    /// Fill intensity is drawn uniformly from this band.
    pub intensity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    /// Inclusive range of object instances per image.
    pub instances: [usize; 2],
    /// Inclusive range of object bounding-square sides, in pixels.
    pub object_size: [usize; 2],
    /// Every pixel gets additive uniform noise in `[0, noise)`.
    pub noise: f64,
    /// Minimum distance in pixels between a box and the image border.
    pub margin: usize,
    /// Required gap between mean intensity inside boxes and the background.
    pub contrast: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let class = |name: &str, shape, lo, hi| ClassSpec {
            name: name.into(),
            shape,
            intensity: [lo, hi],
        };
        DatasetConfig {
            width: 64,
            height: 64,
            classes: vec![
                class("disk", Shape::Disk, 0.45, 0.6),
                class("square", Shape::Square, 0.6, 0.75),
                class("triangle", Shape::Triangle, 0.75, 0.9),
            ],
            instances: [1, 3],
            object_size: [14, 26],
            noise: 0.1,
            margin: 1,
            contrast: 0.1,
            train_count: 500,
            test_count: 100,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.classes.len() < 2 {
            return bad(format!("needs at least 2 classes, got {}", self.classes.len()));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return bad("train and test counts must be at least 1".into());
        }
        let [imin, imax] = self.instances;
        if imin == 0 || imin > imax {
            return bad(format!("instance range {imin}..={imax} is empty or starts at 0"));
        }
        let [smin, smax] = self.object_size;
        if smin < 2 || smin > smax {
            return bad(format!("object size range {smin}..={smax} is invalid"));
        }
        if self.margin == 0 || smax + 2 * self.margin > self.width.min(self.height) {
            return bad(format!(
                "objects up to {smax}px with margin {} do not fit a {}x{} image",
                self.margin, self.width, self.height
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) || self.contrast.is_nan() || self.contrast < 0.0 {
            return bad("noise must lie in [0, 1] and contrast must be >= 0".into());
        }
        for c in &self.classes {
            let [lo, hi] = c.intensity;
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("class {} has intensity band {lo}..{hi}", c.name));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sample `index` of a split; depends only on the inputs.
pub fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    let tag = split
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    mix(mix(seed ^ tag) ^ index as u64)
}

struct Placed {
    class: usize,
    x: usize,
    y: usize,
    size: usize,
    intensity: f64,
}

fn overlaps(a: &Placed, x: usize, y: usize, size: usize, gap: usize) -> bool {
    x < a.x + a.size + gap && a.x < x + size + gap && y < a.y + a.size + gap && a.y < y + size + gap
}

fn place(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> Vec<Placed> {
    let n = rng.random_range(cfg.instances[0]..=cfg.instances[1]);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..cfg.classes.len());
        let [lo, hi] = cfg.classes[class].intensity;
        let intensity = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mut size = rng.random_range(cfg.object_size[0]..=cfg.object_size[1]);
        let mut spot = None;
        // Bounded retries at each size, then shrink.
        'search: while size >= 2 {
            for _ in 0..50 {
                let x = rng.random_range(cfg.margin..=cfg.width - cfg.margin - size);
                let y = rng.random_range(cfg.margin..=cfg.height - cfg.margin - size);
                if placed.iter().all(|p| !overlaps(p, x, y, size, 2)) {
                    spot = Some((x, y));
                    break 'search;
                }
            }
            size = size * 4 / 5;
        }
        if let Some((x, y)) = spot {
            placed.push(Placed {
                class,
                x,
                y,
                size,
                intensity,
            });
        }
    }
    placed
}

/// Renders one synthetic image with its labels, ground truth, and scored
/// grid proposals.
pub fn generate_sample(
    rng: &mut ChaCha8Rng,
    id: &str,
    cfg: &DatasetConfig,
    proposal_cfg: &ProposalConfig,
) -> Result<ImageSample> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    for _ in 0..100 {
        let placed = place(rng, cfg);
        let mut base = vec![0.0; w * h];
        let mut gt = Vec::with_capacity(placed.len());
        let mut inside = vec![false; w * h];
        for p in &placed {
            let shape = cfg.classes[p.class].shape;
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for dy in 0..p.size {
                for dx in 0..p.size {
                    if shape.covers(dx, dy, p.size) {
                        let (x, y) = (p.x + dx, p.y + dy);
                        base[y * w + x] = p.intensity;
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    inside[y * w + x] = true;
                }
            }
            gt.push((p.class, Region::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)));
        }
        let pixels: Vec<f64> = base
            .iter()
            .map(|&b| (b + cfg.noise * rng.random::<f64>()).clamp(0.0, 1.0))
            .collect();
        if !contrast_holds(&pixels, &inside, &gt, w, cfg.contrast) {
            continue;
        }
        let image = Tensor::new(vec![h, w, 1], pixels)?;
        let labels = LabelVector::from_positives(cfg.num_classes(), gt.iter().map(|(c, _)| *c));
        let proposals = score_proposals(&image, &grid_proposals(w, h, proposal_cfg)?)?;
        return Ok(ImageSample {
            id: id.to_string(),
            image,
            labels,
            proposals,
            gt,
        });
    }
    Err(Error::Config(format!(
        "dataset: could not render {id} with contrast {} in 100 attempts",
        cfg.contrast
    )))
}

fn contrast_holds(pixels: &[f64], inside: &[bool], gt: &[(usize, Region)], w: usize, contrast: f64) -> bool {
    let background: Vec<f64> = pixels
        .iter()
        .zip(inside)
        .filter(|(_, &i)| !i)
        .map(|(&p, _)| p)
        .collect();
    if background.is_empty() {
        return false;
    }
    let bg = background.iter().sum::<f64>() / background.len() as f64;
    gt.iter().all(|(_, r)| box_mean(pixels, r, w) - bg >= contrast)
}

pub(crate) fn box_mean(pixels: &[f64], r: &Region, w: usize) -> f64 {
    let (x0, y0, x1, y1) = (r.x0 as usize, r.y0 as usize, r.x1 as usize, r.y1 as usize);
    let mut total = 0.0;
    for y in y0..y1 {
        total += pixels[y * w + x0..y * w + x1].iter().sum::<f64>();
    }
    total / ((x1 - x0) * (y1 - y0)) as f64
}

/// Generates `count` samples named `<split>_<index>`, each from its own
/// derived seed.
pub fn generate_split(
    cfg: &DatasetConfig,
    proposal_cfg: &ProposalConfig,
    split: &str,
    count: usize,
) -> Result<Vec<ImageSample>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, i));
            generate_sample(&mut rng, &format!("{split}_{i:05}"), cfg, proposal_cfg)
        })
        .collect()
}
