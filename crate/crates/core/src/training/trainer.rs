//! Epoch loop for cross-entropy training and self-critical fine-tuning.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::checkpoint::{prefixed, save_checkpoint, Checkpoint, Progress};
use super::loss::{token_hits, xe_loss};
use super::scst::{Rollout, Scst};
use crate::data::{Scene, Vocabulary};
use crate::decode::caption_all;
use crate::error::{Error, Result};
use crate::metrics::{split, CiderStats};
use crate::model::{Model, PreparedScene};
use crate::numeric::{noam_lr, Adam, Graph, OptimizerState, ParamStore, Tensor, Var};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub smoothing: f64,
    pub warmup: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub rl_lr: f64,
    pub beam: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub rl_epochs: usize,
    pub seed: u64,
    /// References drawn per scene and step; 0 uses all of them.
    pub refs_per_scene: usize,
    pub validate_every: usize,
    pub max_grad_norm: Option<f64>,
    pub rollout: Rollout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.1,
            warmup: 200,
            lr_scale: 1.0,
            rl_lr: 1e-4,
            beam: 5,
            patience: 5,
            batch_size: 4,
            max_epochs: 50,
            rl_epochs: 20,
            seed: 0,
            refs_per_scene: 0,
            validate_every: 1,
            max_grad_norm: None,
            rollout: Rollout::Beam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&self.smoothing) {
            return fail("smoothing must lie in [0, 1)");
        }
        if self.beam == 0 {
            return fail("beam must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return fail("batch_size and validate_every must be positive");
        }
        if !(self.lr_scale > 0.0) || !(self.rl_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Xe,
    Rl,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Xe => "xe",
            Phase::Rl => "rl",
        }
    }
}

/// A scene with its model inputs and encoded references.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub scene: PreparedScene,
    /// START ... END token ids, one per reference.
    pub refs: Vec<Vec<usize>>,
    pub ref_words: Vec<Vec<String>>,
}

pub fn prepare_examples(model: &Model, vocab: &Vocabulary, scenes: &[Scene]) -> Result<Vec<Example>> {
    scenes
        .iter()
        .map(|s| {
            if s.references.is_empty() {
                return Err(Error::Config(format!("scene `{}` has no reference caption", s.id)));
            }
            let mut refs = Vec::with_capacity(s.references.len());
            for r in &s.references {
                let mut ids = vocab.encode_caption(r);
                // references longer than the cap are cut, keeping END
                if ids.len() > model.cfg.max_len {
                    ids.truncate(model.cfg.max_len - 1);
                    ids.push(crate::data::END);
                }
                refs.push(ids);
            }
            Ok(Example {
                id: s.id.clone(),
                scene: model.prepare(s, vocab)?,
                refs,
                ref_words: s.references.iter().map(|r| split(r)).collect(),
            })
        })
        .collect()
}

/// Label-smoothed cross-entropy of a scene's references decoded side by side.
pub fn example_loss(g: &mut Graph, model: &Model, ex: &Example, which: &[usize], smoothing: f64) -> Result<Var> {
    let enc = model.encode(g, &ex.scene)?;
    let segs: Vec<&[usize]> = which.iter().map(|&i| &ex.refs[i][..ex.refs[i].len() - 1]).collect();
    let targets: Vec<usize> = which.iter().flat_map(|&i| ex.refs[i][1..].iter().copied()).collect();
    let logits = model.decode(g, &enc, &segs)?;
    xe_loss(g, logits, &targets, smoothing)
}

/// Share of reference tokens predicted exactly under teacher forcing.
pub fn teacher_forced_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    for ex in examples {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &ex.scene)?;
        let segs: Vec<&[usize]> = ex.refs.iter().map(|r| &r[..r.len() - 1]).collect();
        let targets: Vec<usize> = ex.refs.iter().flat_map(|r| r[1..].iter().copied()).collect();
        let logits = model.decode(&mut g, &enc, &segs)?;
        let (h, t) = token_hits(g.value(logits), &targets);
        hits += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Greedy captions for every example, decoded on up to `threads` threads.
pub fn greedy_captions(model: &Model, vocab: &Vocabulary, examples: &[Example], threads: usize) -> Result<Vec<String>> {
    let scenes: Vec<PreparedScene> = examples.iter().map(|e| e.scene.clone()).collect();
    let hyps = caption_all(model, &scenes, 1, threads)?;
    Ok(hyps.iter().map(|h| vocab.decode(&h.tokens)).collect())
}

/// Corpus CIDEr-D of greedy captions, with document frequencies from the
/// examples' own references.
pub fn greedy_cider(model: &Model, vocab: &Vocabulary, examples: &[Example], threads: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let caps = greedy_captions(model, vocab, examples, threads)?;
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.ref_words.clone()).collect();
    let stats = CiderStats::from_references(&refs);
    let total: f64 = caps.iter().zip(&refs).map(|(c, r)| stats.score(&split(c), r)).sum();
    Ok(total / examples.len() as f64)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Validation CIDEr-D, when this epoch was validated.
    pub cider_d: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,cider_d,lr,seconds";

impl LogRow {
    pub fn csv(&self) -> String {
        let cider = self.cider_d.map(|c| format!("{c:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{},{:.6e},{:.3}",
            self.epoch,
            self.phase.name(),
            self.loss,
            cider,
            self.lr,
            self.seconds
        )
    }
}

/// Drives one run. Every random draw is derived from the seed, the phase,
/// the epoch and the step, so a resumed run repeats an uninterrupted one.
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocabulary,
    pub cfg: TrainConfig,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    reward_stats: CiderStats,
    phase: Phase,
    epoch: usize,
    step: u64,
    best_score: f64,
    best_epoch: usize,
    stale: usize,
    adam: Adam,
    best: ParamStore,
    out_dir: Option<PathBuf>,
    threads: usize,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocabulary, train: &[Scene], val: &[Scene], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let train = prepare_examples(&model, &vocab, train)?;
        let val = prepare_examples(&model, &vocab, val)?;
        let refs: Vec<Vec<Vec<String>>> = train.iter().map(|e| e.ref_words.clone()).collect();
        Ok(Self {
            reward_stats: CiderStats::from_references(&refs),
            best: model.params.clone(),
            model,
            vocab,
            cfg,
            train,
            val,
            phase: Phase::Xe,
            epoch: 0,
            step: 0,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
            adam: Adam::default(),
            out_dir: None,
            threads: 1,
            log: Vec::new(),
        })
    }

    /// Continues the run stored in `ck`.
    pub fn resume(ck: &Checkpoint, train: &[Scene], val: &[Scene], cfg: TrainConfig) -> Result<Self> {
        let model = ck.model()?;
        let mut t = Self::new(model, ck.vocab.clone(), train, val, cfg)?;
        let p = ck
            .progress
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no training progress recorded".into()))?;
        t.phase = match p.phase.as_str() {
            "xe" => Phase::Xe,
            "rl" => Phase::Rl,
            other => return Err(Error::Checkpoint(format!("unknown phase `{other}`"))),
        };
        t.epoch = p.epoch;
        t.step = p.step;
        t.best_score = p.best_score;
        t.best_epoch = p.best_epoch;
        t.stale = p.stale;
        let best = ck.model_from("best/")?;
        t.best = best.params;
        let mut state = p.optimizer.clone();
        let m = ck.group("adam_m/");
        let v = ck.group("adam_v/");
        if !m.is_empty() {
            let lookup = |group: &[(String, Tensor)]| -> Result<Vec<Vec<f64>>> {
                t.model
                    .params
                    .iter()
                    .map(|(name, _)| {
                        group
                            .iter()
                            .find(|(n, _)| n == name)
                            .map(|(_, x)| x.data().to_vec())
                            .ok_or_else(|| Error::Checkpoint(format!("optimizer moment for `{name}` missing")))
                    })
                    .collect()
            };
            state.m = lookup(&m)?;
            state.v = lookup(&v)?;
        }
        t.adam = Adam::from_state(state);
        Ok(t)
    }

    /// Writes `log.csv`, `last.ckpt` and `best.ckpt` under `dir`.
    pub fn with_output(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let log = dir.join("log.csv");
        if !log.exists() {
            std::fs::write(&log, format!("{LOG_HEADER}\n"))?;
        }
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_score(&self) -> f64 {
        self.best_score
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.params = self.best.clone();
        m
    }

    fn streams(&self) -> SeedStream {
        SeedStream::new(self.cfg.seed)
    }

    fn stream_name(&self, what: &str) -> String {
        format!("{}.{what}", self.phase.name())
    }

    pub fn current_lr(&self) -> f64 {
        match self.phase {
            Phase::Xe => self.cfg.lr_scale * noam_lr(self.step + 1, self.model.cfg.d_model, self.cfg.warmup),
            Phase::Rl => self.cfg.rl_lr,
        }
    }

    fn apply_update(&mut self) -> Result<f64> {
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = self.model.params.grad_norm();
            if norm > max {
                self.model.params.scale_grads(max / norm);
            }
        }
        let lr = self.current_lr();
        self.adam.step(&mut self.model.params, lr)?;
        self.step += 1;
        Ok(lr)
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = self.streams().rng_indexed(&self.stream_name("shuffle"), self.epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// One pass of cross-entropy training; returns the mean loss.
    pub fn xe_epoch(&mut self) -> Result<f64> {
        let order = self.epoch_order();
        let bs = self.cfg.batch_size;
        let streams = self.streams();
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(bs) {
            self.model.params.zero_grad();
            for (i, &ix) in batch.iter().enumerate() {
                let draw = self.step * bs as u64 + i as u64;
                let ex = &self.train[ix];
                let n_refs = ex.refs.len();
                let which: Vec<usize> = if self.cfg.refs_per_scene == 0 || self.cfg.refs_per_scene >= n_refs {
                    (0..n_refs).collect()
                } else {
                    let mut rng = streams.rng_indexed("xe.refs", draw);
                    let mut w = index::sample(&mut rng, n_refs, self.cfg.refs_per_scene).into_vec();
                    w.sort_unstable();
                    w
                };
                let mut g = Graph::training(streams.derive_indexed("xe.dropout", draw));
                let loss = example_loss(&mut g, &self.model, ex, &which, self.cfg.smoothing)?;
                let value = g.data(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: self.epoch + 1 });
                }
                g.backward(loss)?;
                self.model.params.accumulate(&g, 1.0 / batch.len() as f64);
                total += value;
                count += 1;
            }
            self.apply_update()?;
        }
        Ok(total / count.max(1) as f64)
    }

    /// One pass of self-critical training; returns the mean surrogate loss.
    pub fn rl_epoch(&mut self) -> Result<f64> {
        let order = self.epoch_order();
        let bs = self.cfg.batch_size;
        let streams = self.streams();
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(bs) {
            self.model.params.zero_grad();
            for (i, &ix) in batch.iter().enumerate() {
                let draw = self.step * bs as u64 + i as u64;
                let mut rng = streams.rng_indexed("rl.rollout", draw);
                let scst = Scst {
                    vocab: &self.vocab,
                    stats: &self.reward_stats,
                    k: self.cfg.beam,
                    rollout: self.cfg.rollout,
                };
                let ex = &self.train[ix];
                let out = scst.backward(&mut self.model, &ex.scene, &ex.ref_words, &mut rng, 1.0 / batch.len() as f64)?;
                if !out.surrogate.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: self.epoch + 1 });
                }
                total += out.surrogate;
                count += 1;
            }
            self.apply_update()?;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Greedy CIDEr-D on the validation set (the training set when there is
    /// no validation set).
    pub fn validate(&self) -> Result<f64> {
        let set = if self.val.is_empty() { &self.train } else { &self.val };
        greedy_cider(&self.model, &self.vocab, set, self.threads)
    }

    /// Switches to self-critical training from the best parameters so far,
    /// with a fresh optimizer.
    pub fn start_rl(&mut self) -> Result<()> {
        self.model.params = self.best.clone();
        self.phase = Phase::Rl;
        self.epoch = 0;
        self.step = 0;
        self.stale = 0;
        self.adam = Adam::default();
        self.best_score = self.validate()?;
        self.best_epoch = 0;
        Ok(())
    }

    /// Runs one epoch of the current phase, validates when due, updates the
    /// early-stopping state, logs and saves. Returns `true` once patience
    /// is exhausted.
    pub fn run_epoch(&mut self) -> Result<bool> {
        let t0 = Instant::now();
        let lr = self.current_lr();
        let loss = match self.phase {
            Phase::Xe => self.xe_epoch()?,
            Phase::Rl => self.rl_epoch()?,
        };
        self.epoch += 1;
        let due = self.epoch.is_multiple_of(self.cfg.validate_every) || self.epoch >= self.epoch_limit();
        let mut cider = None;
        let mut stop = false;
        if due {
            let score = self.validate()?;
            cider = Some(score);
            if score > self.best_score {
                self.best_score = score;
                self.best_epoch = self.epoch;
                self.best = self.model.params.clone();
                self.stale = 0;
            } else {
                self.stale += 1;
                stop = self.stale >= self.cfg.patience;
            }
        }
        let row = LogRow {
            epoch: self.epoch,
            phase: self.phase,
            loss,
            cider_d: cider,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        self.persist(&row, cider.is_some() && self.best_epoch == self.epoch)?;
        self.log.push(row);
        Ok(stop)
    }

    /// Epoch count at which the current phase ends.
    pub fn epoch_limit(&self) -> usize {
        match self.phase {
            Phase::Xe => self.cfg.max_epochs,
            Phase::Rl => self.cfg.rl_epochs,
        }
    }

    /// Trains the current phase until early stopping or its epoch limit.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.epoch_limit() {
            if self.run_epoch()? {
                break;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.vocab);
        ck.train = serde_json::to_value(&self.cfg).ok();
        let mut best = self.model.clone();
        best.params = self.best.clone();
        ck.tensors.extend(prefixed("best/", &best));
        let st = &self.adam.state;
        if !st.m.is_empty() {
            for (k, (name, t)) in self.model.params.iter().enumerate() {
                let shape = t.shape();
                ck.tensors.push((format!("adam_m/{name}"), Tensor::new(shape, st.m[k].clone()).expect("shape")));
                ck.tensors.push((format!("adam_v/{name}"), Tensor::new(shape, st.v[k].clone()).expect("shape")));
            }
        }
        ck.progress = Some(Progress {
            phase: self.phase.name().into(),
            epoch: self.epoch,
            step: self.step,
            seed: self.cfg.seed,
            best_score: self.best_score,
            best_epoch: self.best_epoch,
            stale: self.stale,
            // moments travel as tensors
            optimizer: OptimizerState {
                m: Vec::new(),
                v: Vec::new(),
                ..st.clone()
            },
        });
        ck
    }

    /// The best parameters alone, as a model checkpoint.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.best_model(), &self.vocab);
        ck.train = serde_json::to_value(&self.cfg).ok();
        ck
    }

    fn persist(&self, row: &LogRow, improved: bool) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let mut f = std::fs::OpenOptions::new().append(true).create(true).open(dir.join("log.csv"))?;
        writeln!(f, "{}", row.csv())?;
        save_checkpoint(dir.join("last.ckpt"), &self.checkpoint())?;
        if improved || !dir.join("best.ckpt").exists() {
            save_checkpoint(dir.join("best.ckpt"), &self.best_checkpoint())?;
        }
        Ok(())
    }
}
