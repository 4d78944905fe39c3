//! The captioning transformer.

mod config;
pub mod layers;

use crate::data::{Scene, Vocabulary, START};
use crate::error::{Error, Result};
use crate::geometry::{background_box, geometry_weights_graph, pairwise_features, relation_embedding};
use crate::label_attention::{gate_encoder_outputs, label_gate, label_ids, lam_attention, labels_embed, rank_labels};
use crate::numeric::{Graph, Mask, ParamId, ParamStore, Tensor, Var};
use crate::rng::SeedStream;

pub use config::{Connectivity, ModelConfig, Plan, CONNECTIVITY_GRID};
use layers::{AttendOpts, FeedForward, KeyWeights, Linear, MultiHead, Norm, TraceTag};

/// Added to geometric weights on real keys so a query whose weights are all
/// zero still has a positive normalizer.
pub const GEOMETRY_FLOOR: f64 = 1e-8;

/// `PE[pos][2i] = sin(pos / 10000^(2i/d))`, `PE[pos][2i+1] = cos(..)`, for
/// positions `1..=len`.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut out = vec![0.0; len * d_model];
    for p in 0..len {
        let pos = (p + 1) as f64;
        for i in 0..d_model / 2 {
            let angle = pos / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out[p * d_model + 2 * i] = angle.sin();
            out[p * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_parts(vec![len, d_model], out)
}

/// Model inputs derived from a scene once and reused across passes.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    /// `[tokens x d_feat]`, proposals first and the background last.
    pub features: Tensor,
    /// `[tokens^2 x d_model]` relation embedding, when geometry is enabled.
    pub relation_emb: Option<Tensor>,
    pub label_ids: Vec<usize>,
    pub probs: Vec<f64>,
    pub tokens: usize,
}

impl PreparedScene {
    pub fn objects(&self) -> usize {
        self.label_ids.len()
    }
}

/// Switches used to check that disabled features reduce to constants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    /// Use a geometric weight of exactly one on every key.
    pub unit_geometry: bool,
    /// Replace the label gate with exactly one.
    pub unit_gate: bool,
}

/// Encoder results on a graph.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub layer_outputs: Vec<Var>,
    /// Gated encoder outputs the decoder reads.
    pub memories: Vec<Var>,
    pub gate: Option<Var>,
    pub geometry: Vec<Var>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    att: MultiHead,
    ln1: Norm,
    ff: FeedForward,
    ln2: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_att: MultiHead,
    ln1: Norm,
    cross: MultiHead,
    /// One gate per encoder layer this layer reads, aligned with the plan.
    gates: Vec<Linear>,
    ln2: Norm,
    ff: FeedForward,
    ln3: Norm,
}

#[derive(Clone, Debug)]
struct Parts {
    visual: ParamId,
    word_emb: ParamId,
    geometry: Option<ParamId>,
    lam: Option<MultiHead>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    plan: Plan,
    parts: Parts,
    pe: Tensor,
}

impl Model {
    /// Fresh model with parameters drawn from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan()?;
        let mut rng = SeedStream::new(seed).rng("init");
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let (d, m) = (cfg.d_model, cfg.memory_slots);
        let d_ff = d * cfg.ff_mult;

        let visual = s.add_uniform("visual.w", &[cfg.d_feat, d], rng)?;
        let word_emb = s.add_uniform("word_emb", &[cfg.vocab_size, d], rng)?;
        let geometry = if cfg.use_geometry {
            Some(s.add_uniform("geo.w_g", &[d, cfg.geometry_heads], rng)?)
        } else {
            None
        };
        let lam = if cfg.use_lam {
            Some(MultiHead::new(&mut s, "lam.att", d, cfg.heads, 0, rng)?)
        } else {
            None
        };
        let mut encoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                att: MultiHead::new(&mut s, &format!("{p}.att"), d, cfg.heads, m, rng)?,
                ln1: Norm::new(&mut s, &format!("{p}.ln1"), d)?,
                ff: FeedForward::new(&mut s, &format!("{p}.ff"), d, d_ff, rng)?,
                ln2: Norm::new(&mut s, &format!("{p}.ln2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.layers);
        for (l, sources) in plan.sources.iter().enumerate() {
            let p = format!("dec.{l}");
            let self_att = MultiHead::new(&mut s, &format!("{p}.self"), d, cfg.heads, 0, rng)?;
            let ln1 = Norm::new(&mut s, &format!("{p}.ln1"), d)?;
            let cross = MultiHead::new(&mut s, &format!("{p}.cross"), d, cfg.heads, 0, rng)?;
            let gates = sources
                .iter()
                .map(|i| Linear::new(&mut s, &format!("{p}.gate.{i}"), 2 * d, d, true, rng))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLayer {
                self_att,
                ln1,
                cross,
                gates,
                ln2: Norm::new(&mut s, &format!("{p}.ln2"), d)?,
                ff: FeedForward::new(&mut s, &format!("{p}.ff"), d, d_ff, rng)?,
                ln3: Norm::new(&mut s, &format!("{p}.ln3"), d)?,
            });
        }
        let out = Linear::new(&mut s, "out", d, cfg.vocab_size, true, rng)?;
        let pe = positional_encoding(cfg.max_len, d);
        Ok(Self {
            plan,
            parts: Parts {
                visual,
                word_emb,
                geometry,
                lam,
                encoder,
                decoder,
                out,
            },
            params: s,
            pe,
            cfg,
        })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Number of gated cross-attention branches in each decoder layer.
    pub fn cross_branches(&self) -> Vec<usize> {
        self.parts.decoder.iter().map(|l| l.gates.len()).collect()
    }

    pub fn prepare(&self, scene: &Scene, vocab: &Vocabulary) -> Result<PreparedScene> {
        if scene.proposals.is_empty() {
            return Err(Error::EmptyScene(scene.id.clone()));
        }
        let d_feat = self.cfg.d_feat;
        let mut rows: Vec<&[f64]> = scene.proposals.iter().map(|p| p.feature.as_slice()).collect();
        let mut boxes = scene.boxes();
        if self.cfg.use_background {
            rows.push(&scene.background);
            boxes.push(background_box(scene.image_w, scene.image_h));
        }
        let mut data = Vec::with_capacity(rows.len() * d_feat);
        for r in &rows {
            if r.len() != d_feat {
                return Err(Error::Config(format!(
                    "scene `{}` has {}-dimensional features, model expects {d_feat}",
                    scene.id,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        let tokens = rows.len();
        let relation_emb = if self.cfg.use_geometry {
            let xi = pairwise_features(&boxes, self.cfg.geometry_kind);
            Some(relation_embedding(&xi, self.cfg.d_model)?)
        } else {
            None
        };
        Ok(PreparedScene {
            id: scene.id.clone(),
            features: Tensor::new(&[tokens, d_feat], data)?,
            relation_emb,
            label_ids: label_ids(scene.proposals.iter().map(|p| p.label.as_str()), vocab),
            probs: scene.proposals.iter().map(|p| p.prob).collect(),
            tokens,
        })
    }

    /// Projects proposal and background features to `d_model`.
    pub fn embed_visual(&self, g: &mut Graph, scene: &PreparedScene) -> Result<Var> {
        let x = g.constant(scene.features.clone());
        let w = g.param(&self.params, self.parts.visual);
        g.matmul(x, w)
    }

    pub fn encode(&self, g: &mut Graph, scene: &PreparedScene) -> Result<Encoded> {
        self.encode_with(g, scene, Overrides::default())
    }

    pub fn encode_with(&self, g: &mut Graph, scene: &PreparedScene, ov: Overrides) -> Result<Encoded> {
        let cfg = &self.cfg;
        let store = &self.params;
        let n = scene.tokens;
        let x0 = self.embed_visual(g, scene)?;
        let mut x = g.dropout(x0, cfg.dropout)?;

        let mut geometry = Vec::new();
        if ov.unit_geometry {
            geometry.push(g.constant(Tensor::ones(&[n, n])));
        } else if let (Some(w_g), Some(emb)) = (self.parts.geometry, &scene.relation_emb) {
            let emb = g.constant(emb.clone());
            let w = g.param(store, w_g);
            for eta in geometry_weights_graph(g, emb, w, n)? {
                geometry.push(g.add_const(eta, GEOMETRY_FLOOR));
            }
        }

        let mut layer_outputs = Vec::with_capacity(cfg.layers);
        for (l, layer) in self.parts.encoder.iter().enumerate() {
            let weights = match geometry.len() {
                0 => KeyWeights::None,
                1 => KeyWeights::Shared(geometry[0]),
                _ => KeyWeights::PerHead(&geometry),
            };
            let opts = AttendOpts {
                weights,
                mask: None,
                tag: Some(TraceTag { module: "encoder", layer: l }),
            };
            let a = layer.att.attend(g, store, x, x, x, opts)?;
            let a = g.dropout(a, cfg.dropout)?;
            let h = g.add(x, a)?;
            let h = layer.ln1.apply(g, store, h, cfg.ln_eps)?;
            let f = layer.ff.apply(g, store, h, cfg.dropout)?;
            let f = g.dropout(f, cfg.dropout)?;
            let y = g.add(h, f)?;
            let mut y = layer.ln2.apply(g, store, y, cfg.ln_eps)?;
            if self.plan.residual_encoder && l > 0 {
                y = g.add(y, x)?;
            }
            layer_outputs.push(y);
            x = y;
        }

        let gate = if ov.unit_gate {
            Some(g.constant(Tensor::ones(&[n, cfg.d_model])))
        } else if let Some(att) = &self.parts.lam {
            let table = g.param(store, self.parts.word_emb);
            let l_o = labels_embed(g, table, &scene.label_ids)?;
            let r_o = rank_labels(g, l_o, &scene.probs)?;
            let objects = lam_attention(g, store, att, l_o, r_o)?;
            Some(label_gate(g, objects, cfg.use_background)?)
        } else {
            None
        };
        let memories = match gate {
            Some(gv) => gate_encoder_outputs(g, &layer_outputs, gv, cfg.layers)?,
            None => layer_outputs.clone(),
        };
        Ok(Encoded {
            layer_outputs,
            memories,
            gate,
            geometry,
        })
    }

    /// Logits `[sum(len) x V]` for several prefixes decoded side by side,
    /// each attending only to itself.
    pub fn decode(&self, g: &mut Graph, enc: &Encoded, segments: &[&[usize]]) -> Result<Var> {
        let cfg = &self.cfg;
        let store = &self.params;
        if segments.is_empty() {
            return Err(Error::Contract("decode needs at least one prefix".into()));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut lengths = Vec::with_capacity(segments.len());
        for seg in segments {
            if seg.is_empty() || seg.len() > cfg.max_len {
                return Err(Error::Contract(format!(
                    "prefix length {} outside 1..={}",
                    seg.len(),
                    cfg.max_len
                )));
            }
            if seg[0] != START {
                return Err(Error::Contract("prefix must begin with START".into()));
            }
            ids.extend_from_slice(seg);
            pos.extend(0..seg.len());
            lengths.push(seg.len());
        }
        let d = cfg.d_model;
        let mut pe = Vec::with_capacity(pos.len() * d);
        for &p in &pos {
            pe.extend_from_slice(self.pe.row(p));
        }
        let pe = g.constant(Tensor::from_parts(vec![pos.len(), d], pe));
        let table = g.param(store, self.parts.word_emb);
        let words = g.embed(table, &ids)?;
        let y0 = g.add(words, pe)?;
        let mut y = g.dropout(y0, cfg.dropout)?;
        let mask = Mask::block_causal(&lengths);

        for (l, layer) in self.parts.decoder.iter().enumerate() {
            let opts = AttendOpts {
                mask: Some(&mask),
                tag: Some(TraceTag {
                    module: "decoder_self",
                    layer: l,
                }),
                ..AttendOpts::default()
            };
            let a = layer.self_att.attend(g, store, y, y, y, opts)?;
            let a = g.dropout(a, cfg.dropout)?;
            let h = g.add(y, a)?;
            let h1 = layer.ln1.apply(g, store, h, cfg.ln_eps)?;

            let q = layer.cross.q.apply(g, store, h1)?;
            let sources = &self.plan.sources[l];
            let mut meshed: Option<Var> = None;
            for (gate, &src) in layer.gates.iter().zip(sources) {
                let mem = enc.memories[src];
                let module = format!("decoder_cross.{src}");
                let opts = AttendOpts {
                    tag: Some(TraceTag { module: &module, layer: l }),
                    ..AttendOpts::default()
                };
                let c = layer.cross.attend_projected(g, store, q, mem, mem, opts)?;
                let joined = g.concat_cols(&[h1, c])?;
                let alpha = gate.apply(g, store, joined)?;
                let alpha = g.sigmoid(alpha);
                let term = g.mul(alpha, c)?;
                meshed = Some(match meshed {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            let mut meshed = meshed.expect("validated plan has a source per layer");
            if cfg.meshed_scale && sources.len() > 1 {
                meshed = g.scale(meshed, 1.0 / (sources.len() as f64).sqrt());
            }
            let meshed = g.dropout(meshed, cfg.dropout)?;
            let h = g.add(h1, meshed)?;
            let h2 = layer.ln2.apply(g, store, h, cfg.ln_eps)?;
            let f = layer.ff.apply(g, store, h2, cfg.dropout)?;
            let f = g.dropout(f, cfg.dropout)?;
            let h = g.add(h2, f)?;
            let mut out = layer.ln3.apply(g, store, h, cfg.ln_eps)?;
            if self.plan.residual_decoder && l > 0 {
                out = g.add(out, y)?;
            }
            y = out;
        }
        self.parts.out.apply(g, store, y)
    }

    /// Logits `[t x V]` for one prefix.
    pub fn forward(&self, g: &mut Graph, scene: &PreparedScene, prefix: &[usize]) -> Result<Var> {
        let enc = self.encode(g, scene)?;
        self.decode(g, &enc, &[prefix])
    }

    /// Overwrites parameters by name. The set of names and every shape must
    /// match the model exactly.
    pub fn load_params(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        use crate::error::ShapeMismatch;
        let mut problems = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, t) in tensors {
            seen.insert(name.as_str());
            match self.params.by_name(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => problems.push(ShapeMismatch {
                    name: name.clone(),
                    expected: Some(p.shape().to_vec()),
                    found: Some(t.shape().to_vec()),
                }),
                None => problems.push(ShapeMismatch {
                    name: name.clone(),
                    expected: None,
                    found: Some(t.shape().to_vec()),
                }),
            }
        }
        for (name, t) in self.params.iter() {
            if !seen.contains(name) {
                problems.push(ShapeMismatch {
                    name: name.to_string(),
                    expected: Some(t.shape().to_vec()),
                    found: None,
                });
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointShape(problems));
        }
        for (name, t) in tensors {
            let p = self.params.by_name_mut(name).expect("checked above");
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
