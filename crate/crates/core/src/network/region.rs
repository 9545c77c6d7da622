use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixel coordinates, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    /// Class-agnostic objectness, when the proposal source supplies one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectness: Option<f64>,
}

impl Region {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Region {
            x0,
            y0,
            x1,
            y1,
            objectness: None,
        }
    }

    pub fn with_objectness(mut self, score: f64) -> Self {
        self.objectness = Some(score);
        self
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Checks the box lies inside a `width × height` image and covers at
    /// least one pixel of area.
    pub fn validate(&self, width: f64, height: f64) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        let inside = 0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= width
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= height;
        if !finite || !inside || self.area() < 1.0 {
            return Err(Error::usage(format!(
                "region ({}, {}, {}, {}) is not a valid box in a {width}x{height} image",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if let Some(s) = self.objectness {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::usage(format!("objectness {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> Region {
        Region {
            x0: width - self.x1,
            x1: width - self.x0,
            ..*self
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Region {
        Region {
            x0: self.x0 * sx,
            y0: self.y0 * sy,
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            objectness: self.objectness,
        }
    }

    pub fn same_box(&self, other: &Region) -> bool {
        self.x0 == other.x0 && self.y0 == other.y0 && self.x1 == other.x1 && self.y1 == other.y1
    }
}
