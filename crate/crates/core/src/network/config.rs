use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One backbone stage: 2-D convolution, ReLU, then optional 2×2 max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    #[serde(default = "default_one")]
    pub pad: usize,
    #[serde(default = "default_true")]
    pub pool: bool,
}

fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl ConvStage {
    pub fn new(out_channels: usize) -> Self {
        ConvStage {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            pool: true,
        }
    }

    /// Output side length for an input side, or `None` if the stage does
    /// not fit.
    pub fn output_side(&self, side: usize) -> Option<usize> {
        if side + 2 * self.pad < self.kernel {
            return None;
        }
        let conv = (side + 2 * self.pad - self.kernel) / self.stride + 1;
        if self.pool {
            (conv >= 2).then_some(conv / 2)
        } else {
            Some(conv)
        }
    }
}

/// Which scoring head sits on top of the shared region features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two streams (class softmax ⊙ region softmax) summed over regions.
    #[default]
    Wsddn,
    /// Single class head aggregated with log-sum-exp over regions.
    Baseline,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsddn" => Ok(Variant::Wsddn),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected wsddn or baseline)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Wsddn => "wsddn",
            Variant::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub backbone: Vec<ConvStage>,
    /// Side of the single-level pooling grid applied to every region.
    pub spp_grid: usize,
    pub fc6: usize,
    pub fc7: usize,
    pub num_classes: usize,
    pub box_score_scaling: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            backbone: vec![ConvStage::new(16), ConvStage::new(32)],
            spp_grid: 3,
            fc6: 64,
            fc7: 64,
            num_classes: 3,
            box_score_scaling: false,
            variant: Variant::Wsddn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.spp_grid == 0 || self.fc6 == 0 || self.fc7 == 0 {
            return bad("model extents must all be positive".into());
        }
        if self.num_classes == 0 {
            return bad("model needs at least one class".into());
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        for (i, s) in self.backbone.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return bad(format!("backbone stage {i} has a zero extent"));
            }
        }
        Ok(())
    }

    /// Cumulative pixel stride of the backbone feature map.
    pub fn feature_stride(&self) -> usize {
        self.backbone
            .iter()
            .map(|s| s.stride * if s.pool { 2 } else { 1 })
            .product()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(self.in_channels, |s| s.out_channels)
    }

    /// Feature-map side for an input side, or `None` if it is too small.
    pub fn feature_side(&self, side: usize) -> Option<usize> {
        self.backbone
            .iter()
            .try_fold(side, |n, stage| stage.output_side(n))
            .filter(|&n| n >= 1)
    }

    /// Smallest input side the backbone accepts.
    pub fn min_input_side(&self) -> usize {
        (1..=1 << 16)
            .find(|&n| self.feature_side(n).is_some())
            .expect("a valid backbone accepts some input size")
    }

    pub fn region_feature_width(&self) -> usize {
        self.feature_channels() * self.spp_grid * self.spp_grid
    }
}
