//! Greedy and beam-search caption generation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{END, PAD, START, UNK};
use crate::error::{Error, Result};
use crate::model::{Encoded, Model, PreparedScene};
use crate::numeric::Graph;

/// Anything that scores the next token for a batch of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Unnormalized next-token scores, one row of length `vocab_size` per
    /// prefix. Every prefix starts with START.
    fn next_logits(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// A caption under construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Token ids beginning with START; ends with END when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: vec![START],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated words: everything between START and END.
    pub fn words(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// Longest hypothesis, START and END included.
    pub max_len: usize,
    /// Wu et al. length-penalty exponent; `None` ranks by raw log-probability.
    pub length_alpha: Option<f64>,
}

impl BeamConfig {
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self {
            beam,
            max_len,
            length_alpha: None,
        }
    }
}

/// Log-probabilities with PAD, START and UNK removed and the rest
/// renormalized.
pub fn decode_log_probs(logits: &[f64]) -> Vec<f64> {
    let allowed = |j: usize| !matches!(j, PAD | START | UNK);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let lz = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(j, &v)| if allowed(j) { v - lz } else { f64::NEG_INFINITY })
        .collect()
}

/// Highest log-probability first, then lexicographically smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: Option<f64>) -> Ordering {
    let score = |h: &Hypothesis| match alpha {
        None => h.log_prob,
        Some(al) => {
            let len = (h.tokens.len() - 1) as f64;
            h.log_prob / ((5.0 + len) / 6.0).powf(al)
        }
    };
    score(b).total_cmp(&score(a)).then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_len(max_len: usize) -> Result<()> {
    if max_len < 2 {
        return Err(Error::Contract(format!("caption length cap {max_len} is below 2")));
    }
    Ok(())
}

/// Argmax decoding; ties go to the smallest id.
pub fn greedy(scorer: &mut impl StepScorer, max_len: usize) -> Result<Hypothesis> {
    check_len(max_len)?;
    let mut h = Hypothesis::root();
    while h.tokens.len() < max_len {
        let logits = scorer.next_logits(&[&h.tokens])?;
        let lp = decode_log_probs(&logits[0]);
        let mut best = END;
        for (j, &v) in lp.iter().enumerate() {
            if v > lp[best] || (v == lp[best] && j < best) {
                best = j;
            }
        }
        h.tokens.push(best);
        h.log_prob += lp[best];
        if best == END {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search keeping finished hypotheses in competition. Returns up to
/// `beam` hypotheses, best first.
pub fn beam_search(scorer: &mut impl StepScorer, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    check_len(cfg.max_len)?;
    if cfg.beam == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let mut beam = vec![Hypothesis::root()];
    loop {
        let live: Vec<&Hypothesis> = beam
            .iter()
            .filter(|h| !h.finished && h.tokens.len() < cfg.max_len)
            .collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let logits = scorer.next_logits(&prefixes)?;
        let mut pool: Vec<Hypothesis> = beam
            .iter()
            .filter(|h| h.finished || h.tokens.len() >= cfg.max_len)
            .cloned()
            .collect();
        for (h, row) in live.iter().zip(&logits) {
            for (j, &lp) in decode_log_probs(row).iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(j);
                pool.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished: j == END,
                });
            }
        }
        pool.sort_by(|a, b| rank(a, b, cfg.length_alpha));
        pool.truncate(cfg.beam);
        beam = pool;
    }
    beam.sort_by(|a, b| rank(a, b, cfg.length_alpha));
    Ok(beam)
}

/// Drives a [`Model`] on one encoded scene, reusing the encoder nodes of a
/// single graph across steps.
pub struct ModelScorer<'a> {
    model: &'a Model,
    graph: Graph,
    enc: Encoded,
    mark: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, scene: &PreparedScene) -> Result<Self> {
        let mut graph = Graph::new();
        let enc = model.encode(&mut graph, scene)?;
        let mark = graph.len();
        Ok(Self {
            model,
            graph,
            enc,
            mark,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn next_logits(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let logits = self.model.decode(&mut self.graph, &self.enc, prefixes)?;
        let v = self.vocab_size();
        let data = self.graph.data(logits);
        let mut out = Vec::with_capacity(prefixes.len());
        let mut row = 0;
        for p in prefixes {
            row += p.len();
            out.push(data[(row - 1) * v..row * v].to_vec());
        }
        self.graph.truncate(self.mark);
        Ok(out)
    }
}

pub fn greedy_caption(model: &Model, scene: &PreparedScene) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::new(model, scene)?;
    greedy(&mut scorer, model.cfg.max_len)
}

pub fn beam_caption(model: &Model, scene: &PreparedScene, beam: usize) -> Result<Vec<Hypothesis>> {
    let mut scorer = ModelScorer::new(model, scene)?;
    beam_search(&mut scorer, &BeamConfig::new(beam, model.cfg.max_len))
}

/// Best caption for every scene: greedy when `beam` is 1, beam search
/// otherwise. Scenes are split across up to `threads` threads sharing the
/// frozen model.
pub fn caption_all(model: &Model, scenes: &[PreparedScene], beam: usize, threads: usize) -> Result<Vec<Hypothesis>> {
    let one = |scene: &PreparedScene| -> Result<Hypothesis> {
        if beam <= 1 {
            greedy_caption(model, scene)
        } else {
            Ok(beam_caption(model, scene, beam)?.swap_remove(0))
        }
    };
    let threads = threads.clamp(1, scenes.len().max(1));
    if threads == 1 {
        return scenes.iter().map(one).collect();
    }
    let chunk = scenes.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(scenes.len());
        for h in handles {
            out.extend(h.join().expect("decoding thread panicked")?);
        }
        Ok(out)
    })
}
