//! Self-critical policy-gradient step with the mean reward of the rollouts
//! as baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, PAD, START, UNK};
use crate::decode::{beam_search, decode_log_probs, BeamConfig, Hypothesis, ModelScorer, StepScorer};
use crate::error::{Error, Result};
use crate::metrics::{split, CiderStats};
use crate::model::{Model, PreparedScene};
use crate::numeric::{Graph, Mask, Tensor, Var};

/// How the `k` scored captions are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Rollout {
    #[default]
    Beam,
    /// Independent samples at the given softmax temperature.
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScstOutcome {
    pub hypotheses: Vec<Hypothesis>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    /// Value of the surrogate loss whose gradient was accumulated.
    pub surrogate: f64,
}

/// Baseline and per-rollout loss coefficients `-(r_j - b) / k`.
pub fn scst_coefficients(rewards: &[f64]) -> (f64, Vec<f64>) {
    let k = rewards.len() as f64;
    let baseline = rewards.iter().sum::<f64>() / k;
    (baseline, rewards.iter().map(|r| -(r - baseline) / k).collect())
}

fn sample(model: &Model, scene: &PreparedScene, k: usize, temperature: f64, rng: &mut impl Rng) -> Result<Vec<Hypothesis>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("sampling temperature {temperature} must be positive")));
    }
    let mut scorer = ModelScorer::new(model, scene)?;
    let mut hyps: Vec<Hypothesis> = (0..k)
        .map(|_| Hypothesis {
            tokens: vec![START],
            log_prob: 0.0,
            finished: false,
        })
        .collect();
    let max_len = model.cfg.max_len;
    loop {
        let live: Vec<usize> = (0..k)
            .filter(|&i| !hyps[i].finished && hyps[i].tokens.len() < max_len)
            .collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = live.iter().map(|&i| hyps[i].tokens.as_slice()).collect();
        let logits = scorer.next_logits(&prefixes)?;
        for (&i, row) in live.iter().zip(&logits) {
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            let lp = decode_log_probs(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = crate::data::END;
            for (j, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                acc += l.exp();
                pick = j;
                if u < acc {
                    break;
                }
            }
            let h = &mut hyps[i];
            h.tokens.push(pick);
            h.log_prob += decode_log_probs(row)[pick];
            h.finished = pick == crate::data::END;
        }
    }
    Ok(hyps)
}

/// `k` captions for one scene, without gradients.
pub fn rollouts(model: &Model, scene: &PreparedScene, k: usize, how: Rollout, rng: &mut impl Rng) -> Result<Vec<Hypothesis>> {
    match how {
        Rollout::Beam => {
            let mut scorer = ModelScorer::new(model, scene)?;
            beam_search(&mut scorer, &BeamConfig::new(k, model.cfg.max_len))
        }
        Rollout::Sample { temperature } => sample(model, scene, k, temperature, rng),
    }
}

/// `sum_j coef_j * sum_t log p(token_t^j)` under teacher forcing, with the
/// same token restrictions as decoding.
pub fn surrogate_loss(g: &mut Graph, model: &Model, scene: &PreparedScene, hyps: &[Vec<usize>], coefs: &[f64]) -> Result<Var> {
    if hyps.len() != coefs.len() || hyps.is_empty() {
        return Err(Error::Contract(format!("{} captions for {} coefficients", hyps.len(), coefs.len())));
    }
    let enc = model.encode(g, scene)?;
    let inputs: Vec<&[usize]> = hyps.iter().map(|h| &h[..h.len() - 1]).collect();
    if inputs.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("caption has no generated token".into()));
    }
    let logits = model.decode(g, &enc, &inputs)?;
    let v = model.cfg.vocab_size;
    let rows = g.shape(logits)[0];
    let mask = Mask::from_fn(rows, v, |_, j| !matches!(j, PAD | START | UNK));
    let lp = g.log_softmax_rows(logits, Some(&mask))?;
    let mut c = vec![0.0; rows * v];
    let mut r = 0;
    for (h, &coef) in hyps.iter().zip(coefs) {
        for &tok in &h[1..] {
            c[r * v + tok] = coef;
            r += 1;
        }
    }
    let weighted = g.mul_const(lp, &Tensor::new(&[rows, v], c)?)?;
    Ok(g.sum(weighted))
}

/// Reward statistics and rollout settings shared by every SCST step.
pub struct Scst<'a> {
    pub vocab: &'a Vocabulary,
    pub stats: &'a CiderStats,
    pub k: usize,
    pub rollout: Rollout,
}

impl Scst<'_> {
    /// Decodes, scores and back-propagates one scene, adding `scale` times
    /// the surrogate gradient to the model's parameter gradients.
    pub fn backward(
        &self,
        model: &mut Model,
        scene: &PreparedScene,
        references: &[Vec<String>],
        rng: &mut impl Rng,
        scale: f64,
    ) -> Result<ScstOutcome> {
        let hyps = rollouts(model, scene, self.k, self.rollout, rng)?;
        let rewards: Vec<f64> = hyps
            .iter()
            .map(|h| self.stats.score(&split(&self.vocab.decode(&h.tokens)), references))
            .collect();
        let (baseline, coefs) = scst_coefficients(&rewards);
        let tokens: Vec<Vec<usize>> = hyps.iter().map(|h| h.tokens.clone()).collect();
        let mut g = Graph::training(rng.random());
        let loss = surrogate_loss(&mut g, model, scene, &tokens, &coefs)?;
        let surrogate = g.data(loss)[0];
        g.backward(loss)?;
        model.params.accumulate(&g, scale);
        Ok(ScstOutcome {
            hypotheses: hyps,
            rewards,
            baseline,
            surrogate,
        })
    }
}
