use std::collections::HashMap;

use super::ngrams::{ngrams, Counts};

pub const SIGMA: f64 = 6.0;
pub const MAX_N: usize = 4;

/// Document frequencies of reference n-grams, frozen for one corpus.
#[derive(Clone, Debug, Default)]
pub struct CiderStats {
    df: HashMap<Vec<String>, f64>,
    log_images: f64,
}

struct Vector {
    weights: [HashMap<Vec<String>, f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

impl CiderStats {
    /// `df(g)` counts the images in which any reference contains `g`.
    pub fn from_references(references: &[Vec<Vec<String>>]) -> Self {
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in references {
            let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngrams(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        Self {
            df,
            log_images: (references.len().max(1) as f64).ln(),
        }
    }

    fn idf(&self, g: &[String]) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(0.0).max(1.0);
        self.log_images - df.ln()
    }

    fn vector(&self, tokens: &[String]) -> Vector {
        let mut weights: [HashMap<Vec<String>, f64>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let counts: Counts<'_> = ngrams(tokens, n);
            for (g, c) in counts {
                let w = f64::from(c) * self.idf(g);
                norms[n - 1] += w * w;
                weights[n - 1].insert(g.to_vec(), w);
            }
            norms[n - 1] = norms[n - 1].sqrt();
        }
        Vector {
            weights,
            norms,
            len: tokens.len(),
        }
    }

    /// Score of one candidate against its references, in `[0, 10]`.
    pub fn score(&self, hyp: &[String], refs: &[Vec<String>]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let h = self.vector(hyp);
        let mut total = 0.0;
        for r in refs {
            let rv = self.vector(r);
            let delta = h.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let mut sum_n = 0.0;
            for n in 0..MAX_N {
                if h.norms[n] == 0.0 || rv.norms[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, &wh) in &h.weights[n] {
                    if let Some(&wr) = rv.weights[n].get(g) {
                        dot += wh.min(wr) * wr;
                    }
                }
                sum_n += dot / (h.norms[n] * rv.norms[n]) * penalty;
            }
            total += sum_n / MAX_N as f64;
        }
        total / refs.len() as f64 * 10.0
    }
}

/// CIDEr-D with document frequencies taken from the references of the same
/// corpus. Returns the corpus mean and per-image scores.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> (f64, Vec<f64>) {
    let stats = CiderStats::from_references(references);
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(h, r)| stats.score(h, r))
        .collect();
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (mean, per)
}
