//! Seeded synthetic scenes standing in for a detector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grammar::{render_captions, Grammar};
use super::scene::{BBox, Proposal, Scene};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Class words available to the generator, indexed by class id.
pub const CLASS_WORDS: &[&str] = &[
    "cat", "dog", "car", "bus", "horse", "bird", "boat", "chair", "cow", "sheep", "train", "truck", "kite",
    "bench", "clock", "vase",
];

/// Noise standard deviation added to class prototypes.
pub const FEATURE_NOISE: f64 = 0.05;
/// Weight of the normalized box written into the last four feature slots.
pub const BOX_SLOT_WEIGHT: f64 = 0.2;

const PROTOTYPE_SEED: u64 = 0x5EED_C1A5_5000;
const BACKGROUND_CLASS: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    pub classes: usize,
    pub image_w: u32,
    pub image_h: u32,
    pub d_feat: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            objects_min: 1,
            objects_max: 3,
            classes: 12,
            image_w: 640,
            image_h: 480,
            d_feat: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "object range {}..={} is empty or starts at zero",
                self.objects_min, self.objects_max
            )));
        }
        if self.classes == 0 || self.classes > CLASS_WORDS.len() {
            return Err(Error::Config(format!(
                "class count {} outside 1..={}",
                self.classes,
                CLASS_WORDS.len()
            )));
        }
        if self.image_w < 16 || self.image_h < 16 {
            return Err(Error::Config("image must be at least 16x16 pixels".into()));
        }
        if self.d_feat < 8 {
            return Err(Error::Config(format!("d_feat {} is below 8", self.d_feat)));
        }
        Ok(())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn prototype(class_id: usize, d_feat: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED.wrapping_add(class_id as u64));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    unit((0..d_feat).map(|_| normal.sample(&mut rng)).collect())
}

/// Unit-norm feature: class prototype, seeded noise, and the box scaled to
/// image size in the last four slots.
pub fn pseudo_features(class_id: usize, bbox: &BBox, image_w: u32, image_h: u32, seed: u64, d_feat: usize) -> Vec<f64> {
    let mut v = prototype(class_id, d_feat);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("positive sigma");
    for x in &mut v {
        *x += noise.sample(&mut rng);
    }
    let (w, h) = (f64::from(image_w), f64::from(image_h));
    let slots = [bbox.x / w, bbox.y / h, bbox.w / w, bbox.h / h];
    for (x, s) in v[d_feat - 4..].iter_mut().zip(slots) {
        *x += BOX_SLOT_WEIGHT * s;
    }
    unit(v)
}

pub fn background_feature(seed: u64, d_feat: usize) -> Vec<f64> {
    let mut v = prototype(BACKGROUND_CLASS, d_feat);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("positive sigma");
    for x in &mut v {
        *x += noise.sample(&mut rng);
    }
    unit(v)
}

fn draw_box(rng: &mut ChaCha8Rng, image_w: u32, image_h: u32) -> BBox {
    let (iw, ih) = (f64::from(image_w), f64::from(image_h));
    let w = iw * rng.random_range(0.06..0.45);
    let h = ih * rng.random_range(0.06..0.45);
    let x = rng.random_range(w / 2.0..iw - w / 2.0);
    let y = rng.random_range(h / 2.0..ih - h / 2.0);
    BBox::new(x, y, w, h)
}

/// A scene that is a pure function of `seed` and `cfg`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let streams = SeedStream::new(seed);
    let mut rng = streams.rng("scene");
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut proposals = Vec::with_capacity(n);
    for i in 0..n {
        let class_id = rng.random_range(0..cfg.classes);
        let bbox = draw_box(&mut rng, cfg.image_w, cfg.image_h);
        // (0.7, 1.0]: the detection filter never empties a synthetic scene
        let prob = 1.0 - 0.3 * rng.random::<f64>();
        let feature = pseudo_features(
            class_id,
            &bbox,
            cfg.image_w,
            cfg.image_h,
            streams.derive_indexed("feature", i as u64),
            cfg.d_feat,
        );
        proposals.push(Proposal {
            bbox,
            label: CLASS_WORDS[class_id].to_string(),
            prob,
            feature,
        });
    }
    let mut scene = Scene {
        id: format!("scene-{seed:05}"),
        image_w: cfg.image_w,
        image_h: cfg.image_h,
        proposals,
        background: background_feature(streams.derive("background"), cfg.d_feat),
        references: Vec::new(),
    };
    scene.references = render_captions(&scene, &Grammar::default());
    Ok(scene)
}

/// Scenes for seeds `first_seed..first_seed + n`.
pub fn generate_corpus(n: usize, first_seed: u64, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    (0..n as u64).map(|i| generate_scene(first_seed + i, cfg)).collect()
}
