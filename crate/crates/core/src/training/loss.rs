use crate::data::PAD;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Mean cross-entropy against the label-smoothed target distribution
/// (`1 - eps` on the target, `eps / (V - 1)` elsewhere). Positions whose
/// target is PAD are skipped.
pub fn xe_loss(g: &mut Graph, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::dim("xe_loss", &shape, &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let (t, v) = (shape[0], shape[1]);
    let live = targets.iter().filter(|&&y| y != PAD).count();
    if live == 0 {
        return Err(Error::EmptyBatch);
    }
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let norm = 1.0 / live as f64;
    let mut coef = vec![0.0; t * v];
    for (r, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        if y >= v {
            return Err(Error::Index { id: y, len: v });
        }
        let row = &mut coef[r * v..(r + 1) * v];
        if off != 0.0 {
            row.fill(-off * norm);
        }
        row[y] = -(1.0 - smoothing) * norm;
    }
    let lp = g.log_softmax_rows(logits, None)?;
    let weighted = g.mul_const(lp, &Tensor::new(&[t, v], coef)?)?;
    Ok(g.sum(weighted))
}

/// Fraction of positions whose argmax equals the target, PAD skipped.
pub fn token_hits(logits: &Tensor, targets: &[usize]) -> (usize, usize) {
    let v = logits.cols();
    let mut hits = 0;
    let mut total = 0;
    for (r, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        total += 1;
        hits += usize::from(best == y);
    }
    (hits, total)
}
