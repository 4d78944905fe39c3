//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! `LATGEO_ACCEPT=1,2,5` runs a subset (criterion 10 needs 9).

// `ensure!` negates its condition so that a NaN measurement fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use latgeo_core::data::{generate_corpus, BBox, Scene, SynthConfig, Vocabulary, END, PAD, START, UNK};
use latgeo_core::decode::{beam_caption, beam_search, greedy, greedy_caption, BeamConfig, StepScorer};
use latgeo_core::geometry::{geometry_weights_graph, pairwise_features, pairwise_geometry, relation_embedding, GeometryKind};
use latgeo_core::gradsuite;
use latgeo_core::metrics::{bleu, cider_d, evaluate, split, CiderStats};
use latgeo_core::model::layers::{AttendOpts, KeyWeights, MultiHead};
use latgeo_core::model::{Connectivity, Model, ModelConfig, Overrides, CONNECTIVITY_GRID, GEOMETRY_FLOOR};
use latgeo_core::numeric::gradcheck::TOLERANCE;
use latgeo_core::numeric::{Graph, ParamStore, Tensor};
use latgeo_core::rng::SeedStream;
use latgeo_core::training::{scst_coefficients, surrogate_loss, teacher_forced_accuracy, Rollout, Scst, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn corpus(n: usize, first_seed: u64, objects: usize) -> Vec<Scene> {
    let cfg = SynthConfig {
        objects_min: objects,
        objects_max: objects,
        ..SynthConfig::default()
    };
    generate_corpus(n, first_seed, &cfg).unwrap()
}

fn vocab_of(scenes: &[Scene], min_count: u64) -> Vocabulary {
    Vocabulary::build(scenes.iter().flat_map(|s| s.references.iter().map(String::as_str)), min_count)
}

fn small_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        heads: 4,
        layers: 2,
        memory_slots: 2,
        geometry_heads: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random_box(rng: &mut impl Rng) -> BBox {
    BBox::new(
        rng.random_range(1.0..600.0),
        rng.random_range(1.0..450.0),
        rng.random_range(4.0..300.0),
        rng.random_range(4.0..300.0),
    )
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. gradient suite

fn gradient_suite() -> Check {
    let t0 = Instant::now();
    let entries = ok(gradsuite::run(100, 0))?;
    let secs = t0.elapsed().as_secs_f64();
    let mut worst = ("", 0.0);
    let mut checked = 0;
    for e in &entries {
        ensure!(
            e.report.passes(TOLERANCE),
            "{}: max rel err {:.3e} over {} coordinates",
            e.name,
            e.report.max_rel_err,
            e.report.checked
        );
        checked += e.report.checked;
        if e.report.max_rel_err > worst.1 {
            worst = (e.name, e.report.max_rel_err);
        }
    }
    ensure!(entries.iter().any(|e| e.name == "micro_model"), "micro model check missing");
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "{} groups, {checked} coordinates, worst {} {:.2e}",
        entries.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2. attention oracle

/// Scalar log-ratio relation embedding and geometric weight for one pair.
fn oracle_eta(a: &BBox, b: &BBox, w_g: &Tensor, head: usize, d: usize) -> f64 {
    let xi = [(a.x / b.x).ln(), (a.y / b.y).ln(), (a.w / b.w).ln(), (a.h / b.h).ln()];
    let f = d / 8;
    let mut acc = 0.0;
    for (c, &v) in xi.iter().enumerate() {
        for k in 0..f {
            let arg = 100.0 * v / 1000f64.powf(k as f64 / f as f64);
            acc += arg.sin() * w_g.at(c * f + k, head);
            acc += arg.cos() * w_g.at(d / 2 + c * f + k, head);
        }
    }
    acc.max(0.0) + GEOMETRY_FLOOR
}

struct AttnParams {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    mem: Option<(Tensor, Tensor)>,
}

fn attn_params(store: &ParamStore, mh: &MultiHead) -> AttnParams {
    let get = |id| store.get(id).clone();
    AttnParams {
        wq: get(mh.q.w),
        bq: get(mh.q.b.unwrap()),
        wk: get(mh.k.w),
        bk: get(mh.k.b.unwrap()),
        wv: get(mh.v.w),
        bv: get(mh.v.b.unwrap()),
        wo: get(mh.o.w),
        bo: get(mh.o.b.unwrap()),
        mem: mh.memory.map(|(k, v)| (get(k), get(v))),
    }
}

fn affine(x: &Tensor, i: usize, w: &Tensor, b: &Tensor, col: usize) -> f64 {
    let mut acc = b.data()[col];
    for m in 0..x.cols() {
        acc += x.at(i, m) * w.at(m, col);
    }
    acc
}

/// Multi-head self-attention over the rows of `x`, one scalar at a time.
/// `eta(head, i, j)` weighs real keys; memory keys have weight one.
fn oracle_attention(x: &Tensor, p: &AttnParams, heads: usize, eta: &dyn Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let n = x.rows();
    let d = x.cols();
    let dk = d / heads;
    let slots = p.mem.as_ref().map_or(0, |(k, _)| k.rows());
    let key = |j: usize, col: usize| match &p.mem {
        Some((mk, _)) if j >= n => mk.at(j - n, col),
        _ => affine(x, j, &p.wk, &p.bk, col),
    };
    let value = |j: usize, col: usize| match &p.mem {
        Some((_, mv)) if j >= n => mv.at(j - n, col),
        _ => affine(x, j, &p.wv, &p.bv, col),
    };
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let q: Vec<f64> = (0..dk).map(|c| affine(x, i, &p.wq, &p.bq, h * dk + c)).collect();
            let scores: Vec<f64> = (0..n + slots)
                .map(|j| (0..dk).map(|c| q[c] * key(j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..n + slots)
                .map(|j| {
                    let w = if j < n { eta(h, i, j) } else { 1.0 };
                    w * (scores[j] - max).exp()
                })
                .collect();
            let z: f64 = weights.iter().sum();
            for c in 0..dk {
                concat[i * d + h * dk + c] = (0..n + slots).map(|j| weights[j] / z * value(j, h * dk + c)).sum();
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for col in 0..d {
            let mut acc = p.bo.data()[col];
            for m in 0..d {
                acc += concat[i * d + m] * p.wo.at(m, col);
            }
            out[i * d + col] = acc;
        }
    }
    out
}

fn randomize_biases(store: &mut ParamStore, mh: &MultiHead, rng: &mut impl Rng) {
    for lin in [&mh.q, &mh.k, &mh.v, &mh.o] {
        for v in store.get_mut(lin.b.unwrap()).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn attention_oracle() -> Check {
    let mut rng = SeedStream::new(2).rng("attention");
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(1..=6);
        let slots = rng.random_range(0..=4);
        let heads = rng.random_range(1..=4);
        let d = if heads == 3 { 24 } else { 16 };
        let geo_heads = if rng.random_bool(0.5) { 1 } else { heads };
        let mut store = ParamStore::new();
        let mh = ok(MultiHead::new(&mut store, "att", d, heads, slots, &mut rng))?;
        randomize_biases(&mut store, &mh, &mut rng);
        let x = random_tensor(&mut rng, &[n, d]);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let w_g = random_tensor(&mut rng, &[d, geo_heads]);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let emb = g.constant(ok(relation_embedding(&pairwise_geometry(&boxes), d))?);
        let wv = g.constant(w_g.clone());
        let etas: Vec<_> = ok(geometry_weights_graph(&mut g, emb, wv, n))?
            .into_iter()
            .map(|e| g.add_const(e, GEOMETRY_FLOOR))
            .collect();
        let weights = if geo_heads == 1 {
            KeyWeights::Shared(etas[0])
        } else {
            KeyWeights::PerHead(&etas)
        };
        let opts = AttendOpts {
            weights,
            ..AttendOpts::default()
        };
        let out = ok(mh.attend(&mut g, &store, xv, xv, xv, opts))?;

        let p = attn_params(&store, &mh);
        let eta = |h: usize, i: usize, j: usize| oracle_eta(&boxes[i], &boxes[j], &w_g, h.min(geo_heads - 1), d);
        let want = oracle_attention(&x, &p, heads, &eta);
        let err = max_abs_diff(g.data(out), &want);
        ensure!(err < 1e-6, "case {case} (N={n}, M={slots}, h={heads}): max abs diff {err:.3e}");
        worst = worst.max(err);
    }
    Ok(format!("50 instances, max abs diff {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. reduction identities

/// Copies every parameter of `src` that `dst` also has; errors if `dst` has
/// one `src` lacks.
fn copy_shared(src: &Model, dst: &mut Model) -> Result<(), String> {
    let names: Vec<String> = dst.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let from = src.params.by_name(&name).ok_or(format!("source lacks `{name}`"))?;
        dst.params.by_name_mut(&name).unwrap().data_mut().copy_from_slice(from.data());
    }
    Ok(())
}

fn logits_with(model: &Model, scene: &Scene, vocab: &Vocabulary, prefix: &[usize], ov: Overrides) -> Result<(Vec<f64>, Vec<f64>), String> {
    let prepared = ok(model.prepare(scene, vocab))?;
    let mut g = Graph::new();
    let enc = ok(model.encode_with(&mut g, &prepared, ov))?;
    let logits = ok(model.decode(&mut g, &enc, &[prefix]))?;
    let mut memories = Vec::new();
    for &m in &enc.memories {
        memories.extend_from_slice(g.data(m));
    }
    Ok((memories, g.data(logits).to_vec()))
}

fn random_prefix(rng: &mut impl Rng, vocab: &Vocabulary, len: usize) -> Vec<usize> {
    let mut p = vec![START];
    p.extend((1..len).map(|_| rng.random_range(UNK + 1..vocab.len())));
    p
}

fn reduction_identities() -> Check {
    let scenes = corpus(10, 300, 3);
    let vocab = vocab_of(&scenes, 0);
    let mut rng = SeedStream::new(3).rng("reductions");
    for (i, scene) in scenes.iter().enumerate() {
        let conn = Connectivity::ALL[i % Connectivity::ALL.len()];
        let base = ModelConfig {
            connectivity: conn,
            ..small_config(&vocab)
        };
        let len = rng.random_range(1..8);
        let prefix = random_prefix(&mut rng, &vocab, len);
        let full = ok(Model::new(base.clone(), i as u64))?;

        let mut no_geo = ok(Model::new(
            ModelConfig {
                use_geometry: false,
                ..base.clone()
            },
            99,
        ))?;
        copy_shared(&full, &mut no_geo)?;
        let unit = Overrides {
            unit_geometry: true,
            ..Overrides::default()
        };
        let a = logits_with(&full, scene, &vocab, &prefix, unit)?;
        let b = logits_with(&no_geo, scene, &vocab, &prefix, Overrides::default())?;
        ensure!(
            same_bits(&a.0, &b.0) && same_bits(&a.1, &b.1),
            "forward {i}: geometry off differs from unit geometric weights"
        );

        let mut no_lam = ok(Model::new(
            ModelConfig {
                use_lam: false,
                ..base.clone()
            },
            99,
        ))?;
        copy_shared(&full, &mut no_lam)?;
        let unit = Overrides {
            unit_gate: true,
            ..Overrides::default()
        };
        let a = logits_with(&full, scene, &vocab, &prefix, unit)?;
        let b = logits_with(&no_lam, scene, &vocab, &prefix, Overrides::default())?;
        ensure!(
            same_bits(&a.0, &b.0) && same_bits(&a.1, &b.1),
            "forward {i}: label attention off differs from a unit gate"
        );
    }

    // No memory slots: the module reduces to plain multi-head attention,
    // composed here from primitive graph ops.
    for case in 0..10 {
        let n = rng.random_range(1..=6);
        let heads = [1, 2, 4][case % 3];
        let d = 16;
        let dk = d / heads;
        let mut store = ParamStore::new();
        let mh = ok(MultiHead::new(&mut store, "att", d, heads, 0, &mut rng))?;
        ensure!(mh.memory.is_none(), "M=0 built memory slots");
        randomize_biases(&mut store, &mh, &mut rng);
        let x = random_tensor(&mut rng, &[n, d]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let got = ok(mh.attend(&mut g, &store, xv, xv, xv, AttendOpts::default()))?;
        let q = ok(mh.q.apply(&mut g, &store, xv))?;
        let k = ok(mh.k.apply(&mut g, &store, xv))?;
        let v = ok(mh.v.apply(&mut g, &store, xv))?;
        let mut outs = Vec::new();
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    ok(g.slice_cols(q, h * dk, dk))?,
                    ok(g.slice_cols(k, h * dk, dk))?,
                    ok(g.slice_cols(v, h * dk, dk))?,
                )
            };
            let s = ok(g.matmul_t(qh, kh))?;
            let s = g.scale(s, 1.0 / (dk as f64).sqrt());
            let a = ok(g.softmax_rows(s, None))?;
            outs.push(ok(g.matmul(a, vh))?);
        }
        let cat = if heads == 1 { outs[0] } else { ok(g.concat_cols(&outs))? };
        let want = ok(mh.o.apply(&mut g, &store, cat))?;
        ensure!(same_bits(g.data(got), g.data(want)), "case {case}: M=0 differs from plain attention");
        let scalar = oracle_attention(&x, &attn_params(&store, &mh), heads, &|_, _, _| 1.0);
        let err = max_abs_diff(g.data(got), &scalar);
        ensure!(err < 1e-12, "case {case}: M=0 differs from the scalar loop by {err:.3e}");
    }
    Ok("10 forwards each: geometry off, label attention off, no memory slots; all bit-exact".into())
}

// ---------------------------------------------------------------------------
// 4. geometry invariances

fn geometry_invariances() -> Check {
    let mut rng = SeedStream::new(4).rng("geometry");
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        for kind in [GeometryKind::Ratio, GeometryKind::L1] {
            let xi = pairwise_features(&boxes, kind);
            for s in [0.5, 2.0, 10.0] {
                let scaled: Vec<BBox> = boxes.iter().map(|b| b.scaled(s)).collect();
                let ys = pairwise_features(&scaled, kind);
                for (a, b) in xi.as_slice().iter().zip(ys.as_slice()) {
                    let err = max_abs_diff(a, b);
                    ensure!(err <= 1e-12, "case {case} {kind:?} scale {s}: diff {err:.3e}");
                    worst = worst.max(err);
                }
            }
        }
        let xi = pairwise_geometry(&boxes);
        for a in 0..n {
            ensure!(xi.get(a, a) == [0.0; 4], "case {case}: non-zero diagonal at {a}");
            for b in 0..n {
                let (p, q) = (xi.get(a, b), xi.get(b, a));
                ensure!(
                    p.iter().zip(&q).all(|(u, v)| *u == -*v),
                    "case {case}: xi({a},{b}) = {p:?} but xi({b},{a}) = {q:?}"
                );
            }
        }
    }
    Ok(format!("100 box sets, worst scale drift {worst:.2e}, antisymmetry and diagonal exact"))
}

// ---------------------------------------------------------------------------
// 5. causality

fn causality() -> Check {
    let scenes = corpus(2, 500, 3);
    let vocab = vocab_of(&scenes, 0);
    let model = ok(Model::new(small_config(&vocab), 5))?;
    let scene = ok(model.prepare(&scenes[0], &vocab))?;
    let mut rng = SeedStream::new(5).rng("causality");
    let t = 8;
    let base = random_prefix(&mut rng, &vocab, t);
    let v = vocab.len();
    let run = |segments: &[&[usize]]| -> Result<Vec<f64>, String> {
        let mut g = Graph::new();
        let enc = ok(model.encode(&mut g, &scene))?;
        let l = ok(model.decode(&mut g, &enc, segments))?;
        Ok(g.data(l).to_vec())
    };
    let reference = run(&[&base])?;
    let mut forwards = 0;
    for j in 1..t {
        for tok in (0..v).filter(|&tok| tok != base[j]) {
            let mut p = base.clone();
            p[j] = tok;
            let got = run(&[&p])?;
            forwards += 1;
            ensure!(
                same_bits(&got[..j * v], &reference[..j * v]),
                "changing position {j} to {tok} moved earlier logits"
            );
            ensure!(got[j * v..] != reference[j * v..], "changing position {j} to {tok} had no effect at all");
        }
    }
    // Prefixes decoded side by side do not see each other.
    let other = random_prefix(&mut rng, &vocab, 5);
    let mut other2 = other.clone();
    other2[3] = (other2[3] + 1 - 4) % (v - 4) + 4;
    let a = run(&[&base, &other])?;
    let b = run(&[&base, &other2])?;
    ensure!(same_bits(&a[..t * v], &reference), "batching changed a prefix's logits");
    ensure!(same_bits(&a[..t * v], &b[..t * v]), "one prefix leaked into another");
    Ok(format!("{forwards} perturbed forwards at t={t}, all earlier logits bit-identical"))
}

// ---------------------------------------------------------------------------
// 6. RL zero update

fn rl_zero_update() -> Check {
    let scenes = corpus(3, 600, 2);
    let vocab = vocab_of(&scenes, 0);
    let mut model = ok(Model::new(small_config(&vocab), 6))?;
    let mut rng = SeedStream::new(6).rng("rl");
    let mut zeroed = 0;
    for scene in &scenes {
        let prepared = ok(model.prepare(scene, &vocab))?;

        // Real step: references that share no word with any caption give
        // every rollout reward zero.
        let refs = vec![split("zzz qqq xxx")];
        let stats = CiderStats::from_references(std::slice::from_ref(&refs));
        let scst = Scst {
            vocab: &vocab,
            stats: &stats,
            k: 5,
            rollout: Rollout::Beam,
        };
        model.params.zero_grad();
        let out = ok(scst.backward(&mut model, &prepared, &refs, &mut rng, 1.0))?;
        ensure!(out.rewards.iter().all(|&r| r == out.rewards[0]), "rewards differ: {:?}", out.rewards);
        for (name, t) in model.params.iter() {
            if let Some(grad) = &t.grad {
                ensure!(grad.iter().all(|&x| x == 0.0), "non-zero gradient on `{name}`");
                zeroed += 1;
            }
        }

        // Equal non-zero rewards on the same rollouts.
        let tokens: Vec<Vec<usize>> = out.hypotheses.iter().map(|h| h.tokens.clone()).collect();
        let (_, coefs) = scst_coefficients(&vec![3.7; tokens.len()]);
        let mut g = Graph::new();
        let loss = ok(surrogate_loss(&mut g, &model, &prepared, &tokens, &coefs))?;
        ok(g.backward(loss))?;
        model.params.zero_grad();
        model.params.accumulate(&g, 1.0);
        ensure!(model.params.grad_norm() == 0.0, "equal rewards left gradient norm {}", model.params.grad_norm());

        // Control: unequal rewards do move the parameters.
        let rewards: Vec<f64> = (0..tokens.len()).map(|i| i as f64).collect();
        let (_, coefs) = scst_coefficients(&rewards);
        let mut g = Graph::new();
        let loss = ok(surrogate_loss(&mut g, &model, &prepared, &tokens, &coefs))?;
        ok(g.backward(loss))?;
        model.params.zero_grad();
        model.params.accumulate(&g, 1.0);
        let distinct = tokens.windows(2).any(|w| w[0] != w[1]);
        ensure!(!distinct || model.params.grad_norm() > 0.0, "unequal rewards gave a zero gradient");
    }
    ensure!(zeroed > 0, "no parameter received a gradient");
    Ok(format!("3 scenes, k=5, {zeroed} parameter gradients exactly zero"))
}

// ---------------------------------------------------------------------------
// 7. beam oracle

/// Fixed pseudo-random logits for every prefix.
struct ToyScorer {
    seed: u64,
    v: usize,
}

impl ToyScorer {
    fn logits(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..self.v).map(|_| rng.random_range(-3.0..3.0)).collect()
    }
}

impl StepScorer for ToyScorer {
    fn vocab_size(&self) -> usize {
        self.v
    }

    fn next_logits(&mut self, prefixes: &[&[usize]]) -> latgeo_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.logits(p)).collect())
    }
}

/// Best complete or length-capped sequence by exhaustive enumeration.
fn enumerate_best(s: &ToyScorer, cap: usize) -> (Vec<usize>, f64) {
    fn walk(s: &ToyScorer, cap: usize, prefix: &mut Vec<usize>, lp: f64, best: &mut (Vec<usize>, f64)) {
        let done = prefix.last() == Some(&END) || prefix.len() == cap;
        if done {
            if lp > best.1 {
                *best = (prefix.clone(), lp);
            }
            return;
        }
        let logits = s.logits(prefix);
        let allowed: Vec<usize> = (0..s.v).filter(|j| ![PAD, START, UNK].contains(j)).collect();
        let z = allowed.iter().map(|&j| logits[j].exp()).sum::<f64>().ln();
        for j in allowed {
            prefix.push(j);
            walk(s, cap, prefix, lp + logits[j] - z, best);
            prefix.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    walk(s, cap, &mut vec![START], 0.0, &mut best);
    best
}

fn beam_oracle() -> Check {
    let (v, cap) = (6, 5);
    for seed in 0..20 {
        let mut toy = ToyScorer { seed, v };
        let (tokens, lp) = enumerate_best(&toy, cap);
        let beam = ok(beam_search(&mut toy, &BeamConfig::new(36, cap)))?;
        ensure!(
            beam[0].tokens == tokens && (beam[0].log_prob - lp).abs() < 1e-12,
            "toy {seed}: beam {:?} ({}) vs exhaustive {tokens:?} ({lp})",
            beam[0].tokens,
            beam[0].log_prob
        );
        let one = ok(beam_search(&mut toy, &BeamConfig::new(1, cap)))?;
        let g = ok(greedy(&mut toy, cap))?;
        ensure!(one[0].tokens == g.tokens, "toy {seed}: k=1 {:?} vs greedy {:?}", one[0].tokens, g.tokens);
    }
    let scenes = corpus(20, 700, 2);
    let vocab = vocab_of(&scenes, 0);
    let model = ok(Model::new(small_config(&vocab), 7))?;
    for scene in &scenes {
        let p = ok(model.prepare(scene, &vocab))?;
        let b = ok(beam_caption(&model, &p, 1))?;
        let g = ok(greedy_caption(&model, &p))?;
        ensure!(b[0].tokens == g.tokens, "scene {}: k=1 differs from greedy", scene.id);
    }
    Ok("20 toy models match exhaustive search at k=36; k=1 equals greedy on 20 toy models and 20 scenes".into())
}

// ---------------------------------------------------------------------------
// 8. metric fixtures

fn metric_fixtures() -> Check {
    let sentences = ["a cat sits on a mat", "there is a big dog left of a small car", "x"];
    let ids: Vec<String> = (0..sentences.len()).map(|i| format!("s{i}")).collect();
    let cands: Vec<String> = sentences.iter().map(|s| s.to_string()).collect();
    let refs: Vec<Vec<String>> = sentences.iter().map(|s| vec![s.to_string()]).collect();
    let same = evaluate(&ids, &cands, &refs);
    ensure!(same.bleu1 == 1.0 && same.rouge_l == 1.0, "identical pairs: bleu1 {} rougeL {}", same.bleu1, same.rouge_l);
    for (id, s) in &same.per_image {
        ensure!(s.bleu1 == 1.0 && s.rouge_l == 1.0, "identical pair {id}: {s:?}");
    }

    let short = bleu(&[split("a b c")], &[vec![split("a b c d")]], 4);
    ensure!((short.corpus[0] - 0.7165).abs() <= 1e-4, "brevity case bleu1 {}", short.corpus[0]);

    let hyps = vec![split("a b c d"), split("e f g h")];
    let (cd, per) = cider_d(&hyps, &[vec![split("a b c d")], vec![split("e f g h")]]);
    ensure!((cd - 10.0).abs() <= 1e-9, "perfect disjoint corpus CIDEr-D {cd}");
    ensure!(per.iter().all(|c| (c - 10.0).abs() <= 1e-9), "per-image CIDEr-D {per:?}");
    Ok(format!("BLEU-1 {:.6} on the brevity case, CIDEr-D {cd:.12}", short.corpus[0]))
}

// ---------------------------------------------------------------------------
// 9-10. memorization and RL direction

fn memorization(slot: &mut Option<Trainer>) -> Check {
    let t0 = Instant::now();
    let scenes = corpus(32, 0, 3);
    let vocab = vocab_of(&scenes, 0);
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        heads: 4,
        layers: 3,
        memory_slots: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = ok(Model::new(cfg, 1))?;
    let tc = TrainConfig {
        lr_scale: 1.0,
        warmup: 200,
        batch_size: 4,
        max_epochs: 300,
        validate_every: 10,
        patience: 1000,
        ..TrainConfig::default()
    };
    let mut t = ok(Trainer::new(model, vocab, &scenes, &[], tc))?;
    let (mut acc, mut cider) = (0.0, 0.0);
    while t.epoch() < 300 {
        ok(t.run_epoch())?;
        if let Some(c) = t.log.last().and_then(|r| r.cider_d) {
            acc = ok(teacher_forced_accuracy(&t.model, &t.train))?;
            cider = c;
            if acc >= 0.95 && cider >= 8.0 {
                break;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let epoch = t.epoch();
    *slot = Some(t);
    ensure!(acc >= 0.95 && cider >= 8.0, "after {epoch} epochs: accuracy {acc:.4}, CIDEr-D {cider:.3}");
    ensure!(secs < 600.0, "took {secs:.0} s");
    Ok(format!("epoch {epoch}: accuracy {acc:.4}, CIDEr-D {cider:.3}, {secs:.0} s"))
}

fn rl_direction(slot: &mut Option<Trainer>) -> Check {
    let t = slot.as_mut().ok_or("needs the memorization run")?;
    t.cfg.rl_lr = 1e-4;
    t.cfg.beam = 5;
    ok(t.start_rl())?;
    let xe = t.best_score();
    let mut best = f64::NEG_INFINITY;
    let mut last = xe;
    for _ in 0..50 {
        ok(t.rl_epoch())?;
        last = ok(t.validate())?;
        best = best.max(last);
    }
    ensure!(last >= xe - 0.1, "CIDEr-D fell from {xe:.4} to {last:.4}");
    ensure!(best >= xe, "best RL epoch {best:.4} below the XE value {xe:.4}");
    Ok(format!("CIDEr-D {xe:.4} -> {last:.4} after 50 epochs (best {best:.4})"))
}

// ---------------------------------------------------------------------------
// 11. geometry utility

fn geometry_utility() -> Check {
    let scenes = generate_corpus(500, 1000, &SynthConfig::default()).unwrap();
    let (train, val) = scenes.split_at(400);
    let vocab = vocab_of(train, 5);
    let mut on = Vec::new();
    let mut off = Vec::new();
    for seed in 0..3u64 {
        for geo in [true, false] {
            let cfg = ModelConfig {
                vocab_size: vocab.len(),
                d_model: 32,
                layers: 2,
                heads: 4,
                memory_slots: 4,
                dropout: 0.0,
                use_geometry: geo,
                ..ModelConfig::default()
            };
            let model = ok(Model::new(cfg, seed))?;
            let tc = TrainConfig {
                seed,
                batch_size: 16,
                refs_per_scene: 1,
                max_epochs: 100,
                validate_every: 25,
                patience: 1000,
                ..TrainConfig::default()
            };
            let mut t = ok(Trainer::new(model, vocab.clone(), train, val, tc))?;
            while t.epoch() < 100 {
                ok(t.run_epoch())?;
            }
            let score = t.log.last().and_then(|r| r.cider_d).ok_or("final epoch was not validated")?;
            if geo { on.push(score) } else { off.push(score) }
        }
    }
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (m_on, m_off) = (median(&on), median(&off));
    let fmt = |v: &[f64]| v.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join("/");
    ensure!(m_on > m_off, "median on {m_on:.3} <= off {m_off:.3} (on {}, off {})", fmt(&on), fmt(&off));
    Ok(format!("median val CIDEr-D on {m_on:.3} > off {m_off:.3} (on {}, off {})", fmt(&on), fmt(&off)))
}

// ---------------------------------------------------------------------------
// 12. connectivity grid

fn connectivity_grid() -> Check {
    let scenes = corpus(8, 800, 2);
    let vocab = vocab_of(&scenes, 0);
    let mut params = Vec::new();
    let rows = CONNECTIVITY_GRID
        .iter()
        .copied()
        .chain(std::iter::once((Connectivity::FullyConnected, 3)));
    for (conn, layers) in rows {
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 32,
            heads: 4,
            layers,
            memory_slots: 4,
            dropout: 0.0,
            connectivity: conn,
            ..ModelConfig::default()
        };
        let model = ok(Model::new(cfg, 12))?;
        let count = model.num_parameters();
        let tc = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let mut t = ok(Trainer::new(model, vocab.clone(), &scenes, &[], tc))?;
        let loss = ok(t.xe_epoch())?;
        ensure!(loss.is_finite(), "{}-{layers}: loss {loss}", conn.name());
        ensure!(
            t.model.params.iter().all(|(_, p)| p.is_finite()),
            "{}-{layers}: non-finite parameters",
            conn.name()
        );
        params.push(((conn, layers), count));
    }
    let count = |c, l| params.iter().find(|(k, _)| *k == (c, l)).map(|(_, n)| *n).unwrap();
    let (fc, single) = (count(Connectivity::FullyConnected, 3), count(Connectivity::Single, 3));
    ensure!(fc > single, "fully connected {fc} <= single {single} parameters at 3 layers");
    Ok(format!(
        "{} grid rows trained 1 epoch; parameters at 3 layers: fully connected {fc} > single {single}",
        CONNECTIVITY_GRID.len()
    ))
}

// ---------------------------------------------------------------------------

fn report(line: &str) {
    // Written past the test harness's capture so it always shows.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance_criteria() {
    let wanted: Option<Vec<usize>> = std::env::var("LATGEO_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let run = |n: usize| wanted.as_ref().is_none_or(|w| w.contains(&n));

    let slot = std::cell::RefCell::new(None);
    let mut failed = Vec::new();
    report("");
    type Criterion<'a> = (usize, &'static str, Box<dyn FnMut() -> Check + 'a>);
    let mut criteria: Vec<Criterion> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "attention oracle", Box::new(attention_oracle)),
        (3, "reduction identities", Box::new(reduction_identities)),
        (4, "geometry invariances", Box::new(geometry_invariances)),
        (5, "decoder causality", Box::new(causality)),
        (6, "RL zero update", Box::new(rl_zero_update)),
        (7, "beam oracle", Box::new(beam_oracle)),
        (8, "metric fixtures", Box::new(metric_fixtures)),
        (9, "memorization", Box::new(|| memorization(&mut slot.borrow_mut()))),
        (10, "RL direction", Box::new(|| rl_direction(&mut slot.borrow_mut()))),
        (11, "geometry utility", Box::new(geometry_utility)),
        (12, "connectivity grid", Box::new(connectivity_grid)),
    ];

    for (n, name, f) in &mut criteria {
        if !run(*n) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => report(&format!("[{n:>2}] PASS {name}: {detail} ({secs:.1} s)")),
            Err(why) => {
                report(&format!("[{n:>2}] FAIL {name}: {why} ({secs:.1} s)"));
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
