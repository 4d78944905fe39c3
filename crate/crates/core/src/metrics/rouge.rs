/// F-measure weight on recall.
pub const BETA: f64 = 1.2;

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best LCS F-measure against any reference.
pub fn rouge_l_sentence(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs(hyp, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / hyp.len() as f64;
        let rc = l / r.len() as f64;
        let b2 = BETA * BETA;
        best = best.max((1.0 + b2) * p * rc / (rc + b2 * p));
    }
    best
}

/// Per-image scores and their mean.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> (f64, Vec<f64>) {
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(h, r)| rouge_l_sentence(h, r))
        .collect();
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (mean, per)
}
