use serde::{Deserialize, Serialize};

/// Axis-aligned box given by its center and extents, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }
}

/// One detected object.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Class word as emitted by the detector.
    pub label: String,
    pub prob: f64,
    pub feature: Vec<f64>,
}

/// Everything the captioner sees for one image, plus its reference captions
/// (lower-case words separated by single spaces, without START/END).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub proposals: Vec<Proposal>,
    pub background: Vec<f64>,
    pub references: Vec<String>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    pub fn d_feat(&self) -> usize {
        self.background.len()
    }
}

pub fn tokenize(caption: &str) -> Vec<&str> {
    caption.split(' ').filter(|w| !w.is_empty()).collect()
}
