//! Pairwise box-relation features and the attention weights derived from
//! them.

use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Smallest magnitude a coordinate may take before a ratio is formed.
pub const RATIO_FLOOR: f64 = 1e-6;
/// Relation components are clipped to `[-CLIP, CLIP]`.
pub const CLIP: f64 = 20.0;
pub const WAVELENGTH: f64 = 1000.0;
pub const EMBED_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    /// Log ratios of centers and extents.
    #[default]
    Ratio,
    /// Center offsets normalized by the first box's extent, plus log
    /// extent ratios.
    L1,
}

/// `[N x N]` grid of 4-component relation vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    n: usize,
    xi: Vec<[f64; 4]>,
}

impl PairFeatures {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> [f64; 4] {
        self.xi[a * self.n + b]
    }

    pub fn as_slice(&self) -> &[[f64; 4]] {
        &self.xi
    }
}

fn log_ratio(a: f64, b: f64) -> f64 {
    (a.max(RATIO_FLOOR).ln() - b.max(RATIO_FLOOR).ln()).clamp(-CLIP, CLIP)
}

fn relation(a: &BBox, b: &BBox, kind: GeometryKind) -> [f64; 4] {
    match kind {
        GeometryKind::Ratio => [
            log_ratio(a.x, b.x),
            log_ratio(a.y, b.y),
            log_ratio(a.w, b.w),
            log_ratio(a.h, b.h),
        ],
        GeometryKind::L1 => [
            ((a.x - b.x) / a.w.max(RATIO_FLOOR)).clamp(-CLIP, CLIP),
            ((a.y - b.y) / a.h.max(RATIO_FLOOR)).clamp(-CLIP, CLIP),
            log_ratio(a.w, b.w),
            log_ratio(a.h, b.h),
        ],
    }
}

/// Log-ratio relation `xi(a, b)` for every ordered pair of boxes.
pub fn pairwise_geometry(boxes: &[BBox]) -> PairFeatures {
    pairwise_features(boxes, GeometryKind::Ratio)
}

pub fn pairwise_features(boxes: &[BBox], kind: GeometryKind) -> PairFeatures {
    let n = boxes.len();
    let mut xi = Vec::with_capacity(n * n);
    for a in boxes {
        for b in boxes {
            xi.push(relation(a, b, kind));
        }
    }
    PairFeatures { n, xi }
}

/// Box covering the whole image, used for the background token.
pub fn background_box(image_w: u32, image_h: u32) -> BBox {
    let (w, h) = (f64::from(image_w), f64::from(image_h));
    BBox::new(w / 2.0, h / 2.0, w, h)
}

/// Sinusoidal embedding of every relation vector: `[N*N x d_model]`, sines
/// of all components and frequencies first, then cosines.
pub fn relation_embedding(xi: &PairFeatures, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(8) {
        return Err(Error::Config(format!("d_model {d_model} is not a positive multiple of 8")));
    }
    let f = d_model / 8;
    let inv_dim: Vec<f64> = (0..f).map(|k| WAVELENGTH.powf(-(k as f64) / f as f64)).collect();
    let half = d_model / 2;
    let mut out = vec![0.0; xi.xi.len() * d_model];
    for (p, comps) in xi.xi.iter().enumerate() {
        let row = &mut out[p * d_model..(p + 1) * d_model];
        for (c, &v) in comps.iter().enumerate() {
            for (k, &s) in inv_dim.iter().enumerate() {
                let arg = EMBED_SCALE * v * s;
                row[c * f + k] = arg.sin();
                row[half + c * f + k] = arg.cos();
            }
        }
    }
    Tensor::new(&[xi.xi.len().max(1), d_model], out)
}

/// `ReLU(Emb(xi) w_G)` as graph nodes: one `[N x N]` matrix per column of
/// `w_g`.
pub fn geometry_weights_graph(g: &mut Graph, emb: Var, w_g: Var, n: usize) -> Result<Vec<Var>> {
    let proj = g.matmul(emb, w_g)?;
    let eta = g.relu(proj);
    let heads = g.shape(w_g)[1];
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let col = if heads == 1 { eta } else { g.slice_cols(eta, h, 1)? };
        out.push(g.reshape(col, &[n, n])?);
    }
    Ok(out)
}

/// Plain evaluation of the geometric attention weights, one `[N x N]`
/// tensor per head.
pub fn geometry_weights(xi: &PairFeatures, w_g: &Tensor) -> Result<Vec<Tensor>> {
    let d_model = w_g.shape()[0];
    let emb = relation_embedding(xi, d_model)?;
    let mut g = Graph::new();
    let e = g.constant(emb);
    let w = g.constant(w_g.clone());
    let heads = geometry_weights_graph(&mut g, e, w, xi.len())?;
    Ok(heads.into_iter().map(|v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_relation() {
        let a = BBox::new(4.0, 4.0, 8.0, 2.0);
        let b = BBox::new(2.0, 2.0, 2.0, 2.0);
        let xi = pairwise_geometry(&[a, b]);
        let v = xi.get(0, 1);
        let expect = [2f64.ln(), 2f64.ln(), 4f64.ln(), 0.0];
        for (x, e) in v.iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
        assert_eq!(xi.get(0, 0), [0.0; 4]);
    }

    #[test]
    fn background_box_covers_the_image() {
        let bg = background_box(100, 50);
        assert_eq!(bg, BBox::new(50.0, 25.0, 100.0, 50.0));
        assert_eq!(pairwise_geometry(&[bg, bg]).get(0, 1), [0.0; 4]);
    }

    #[test]
    fn zero_projection_gives_zero_weights() {
        let boxes = [BBox::new(1.0, 2.0, 3.0, 4.0), BBox::new(5.0, 1.0, 2.0, 2.0)];
        let heads = geometry_weights(&pairwise_geometry(&boxes), &Tensor::zeros(&[16, 2])).unwrap();
        assert_eq!(heads.len(), 2);
        assert!(heads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn embedding_needs_multiple_of_eight() {
        let xi = pairwise_geometry(&[BBox::new(1.0, 1.0, 1.0, 1.0)]);
        assert!(matches!(relation_embedding(&xi, 12), Err(Error::Config(_))));
        let e = relation_embedding(&xi, 16).unwrap();
        assert_eq!(e.shape(), &[1, 16]);
        // zero relation: sines vanish, cosines are one
        assert!(e.data()[..8].iter().all(|&v| v == 0.0));
        assert!(e.data()[8..].iter().all(|&v| v == 1.0));
    }
}
