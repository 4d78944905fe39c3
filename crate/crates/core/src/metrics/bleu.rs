use super::ngrams::ngrams;

/// Corpus BLEU-1..=`max_n` (index `n-1`) and per-image sentence BLEU-`max_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuScores {
    pub corpus: Vec<f64>,
    pub per_image: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
struct Tally {
    matched: Vec<f64>,
    total: Vec<f64>,
    hyp_len: f64,
    ref_len: f64,
}

impl Tally {
    fn new(max_n: usize) -> Self {
        Self {
            matched: vec![0.0; max_n],
            total: vec![0.0; max_n],
            ..Self::default()
        }
    }

    fn add(&mut self, other: &Tally) {
        for n in 0..self.matched.len() {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of precisions up to each order, times the brevity
    /// penalty.
    fn scores(&self) -> Vec<f64> {
        let bp = if self.hyp_len <= 0.0 {
            0.0
        } else {
            (1.0 - self.ref_len / self.hyp_len).min(0.0).exp()
        };
        let mut log_sum = 0.0;
        let mut out = Vec::with_capacity(self.matched.len());
        for n in 0..self.matched.len() {
            if self.matched[n] <= 0.0 || self.total[n] <= 0.0 {
                // zero precision at this order (and all higher ones)
                out.extend(std::iter::repeat_n(0.0, self.matched.len() - n));
                break;
            }
            log_sum += (self.matched[n] / self.total[n]).ln();
            out.push(bp * (log_sum / (n + 1) as f64).exp());
        }
        out
    }
}

fn tally(hyp: &[String], refs: &[Vec<String>], max_n: usize) -> Tally {
    let mut t = Tally::new(max_n);
    t.hyp_len = hyp.len() as f64;
    // closest reference length, shorter wins a tie
    t.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0) as f64;
    for n in 1..=max_n {
        let h = ngrams(hyp, n);
        let ref_counts: Vec<_> = refs.iter().map(|r| ngrams(r, n)).collect();
        for (g, &c) in &h {
            let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            t.matched[n - 1] += f64::from(c.min(max_ref));
        }
        t.total[n - 1] = hyp.len().saturating_sub(n - 1) as f64;
    }
    t
}

/// BLEU with clipped n-gram counts pooled over the corpus and the closest
/// reference length in the brevity penalty.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> BleuScores {
    let mut total = Tally::new(max_n);
    let mut per_image = Vec::with_capacity(candidates.len());
    for (hyp, refs) in candidates.iter().zip(references) {
        let t = tally(hyp, refs, max_n);
        per_image.push(if hyp.is_empty() { vec![0.0; max_n] } else { t.scores() });
        total.add(&t);
    }
    BleuScores {
        corpus: total.scores(),
        per_image,
    }
}
