//! Seeded finite-difference checks over every differentiable graph
//! operation and over a complete micro captioner.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, Proposal, Scene, Vocabulary};
use crate::error::Result;
use crate::model::{Connectivity, Model, ModelConfig};
use crate::numeric::gradcheck::{check_inputs, check_params, random_projection, GradReport, DEFAULT_STEP};
use crate::numeric::{Graph, Mask, ParamId, Tensor, Var};
use crate::rng::SeedStream;
use crate::training::xe_loss;

/// One named group of checks.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

type Build = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, OpFn);
type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// A mask leaving at least one column open in every row.
fn rand_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mask {
    let keep: Vec<bool> = (0..rows * cols).map(|_| rng.random::<f64>() < 0.7).collect();
    let anchor: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    Mask::from_fn(rows, cols, |r, c| keep[r * cols + c] || anchor[r] == c)
}

fn ops() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |r| (vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1])))),
        ("matmul_t", |r| (vec![rand_t(r, &[3, 4]), rand_t(r, &[2, 4])], Box::new(|g, v| g.matmul_t(v[0], v[1])))),
        ("transpose", |r| (vec![rand_t(r, &[3, 4])], Box::new(|g, v| g.transpose(v[0])))),
        ("add", |r| (vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1])))),
        ("add_scalar", |r| (vec![rand_t(r, &[3, 4]), rand_t(r, &[1])], Box::new(|g, v| g.add(v[0], v[1])))),
        ("mul", |r| (vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1])))),
        ("mul_scalar", |r| (vec![rand_t(r, &[1]), rand_t(r, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1])))),
        ("add_row", |r| (vec![rand_t(r, &[3, 4]), rand_t(r, &[4])], Box::new(|g, v| g.add_row(v[0], v[1])))),
        ("scale", |r| (vec![rand_t(r, &[3, 4])], Box::new(|g, v| Ok(g.scale(v[0], -1.7))))),
        ("add_const", |r| (vec![rand_t(r, &[3, 4])], Box::new(|g, v| Ok(g.add_const(v[0], 0.3))))),
        ("mul_const", |r| {
            let c = rand_t(r, &[3, 4]);
            (vec![rand_t(r, &[3, 4])], Box::new(move |g, v| g.mul_const(v[0], &c)))
        }),
        ("scale_rows", |r| {
            let f: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            (vec![rand_t(r, &[3, 4])], Box::new(move |g, v| g.scale_rows(v[0], &f)))
        }),
        ("relu", |r| (vec![rand_t(r, &[3, 4])], Box::new(|g, v| Ok(g.relu(v[0]))))),
        ("sigmoid", |r| (vec![uniform(r, &[3, 4], -3.0, 3.0)], Box::new(|g, v| Ok(g.sigmoid(v[0]))))),
        ("softmax_rows", |r| (vec![uniform(r, &[3, 5], -2.0, 2.0)], Box::new(|g, v| g.softmax_rows(v[0], None)))),
        ("softmax_rows_masked", |r| {
            let m = rand_mask(r, 3, 5);
            (vec![uniform(r, &[3, 5], -2.0, 2.0)], Box::new(move |g, v| g.softmax_rows(v[0], Some(&m))))
        }),
        ("weighted_softmax_rows", |r| {
            let m = rand_mask(r, 3, 5);
            (
                vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], 0.1, 2.0)],
                Box::new(move |g, v| g.weighted_softmax_rows(v[0], v[1], Some(&m))),
            )
        }),
        ("log_softmax_rows", |r| {
            let m = rand_mask(r, 3, 5);
            (vec![uniform(r, &[3, 5], -2.0, 2.0)], Box::new(move |g, v| g.log_softmax_rows(v[0], Some(&m))))
        }),
        ("layer_norm", |r| {
            (
                vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[5], 0.5, 1.5), rand_t(r, &[5])],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
            )
        }),
        ("embed", |r| {
            let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
            (vec![rand_t(r, &[6, 3])], Box::new(move |g, v| g.embed(v[0], &ids)))
        }),
        ("concat_cols", |r| {
            (vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 4])], Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]])))
        }),
        ("concat_rows", |r| {
            (vec![rand_t(r, &[2, 3]), rand_t(r, &[1, 3])], Box::new(|g, v| g.concat_rows(&[v[0], v[1]])))
        }),
        ("slice_cols", |r| (vec![rand_t(r, &[3, 5])], Box::new(|g, v| g.slice_cols(v[0], 1, 3)))),
        ("slice_rows", |r| (vec![rand_t(r, &[4, 3])], Box::new(|g, v| g.slice_rows(v[0], 1, 2)))),
        ("reshape", |r| (vec![rand_t(r, &[3, 4])], Box::new(|g, v| g.reshape(v[0], &[2, 6])))),
        ("sum", |r| (vec![rand_t(r, &[3, 4])], Box::new(|g, v| Ok(g.sum(v[0]))))),
    ]
}

/// Checks every graph operation on `cases` random instances each.
pub fn op_checks(cases: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let streams = SeedStream::new(seed);
    let mut out = Vec::new();
    for (name, build) in ops() {
        let mut report = GradReport::default();
        for case in 0..cases {
            let mut rng = streams.rng_indexed(name, case as u64);
            let (inputs, f) = build(&mut rng);
            let proj = streams.derive_indexed("projection", case as u64);
            let r = check_inputs(
                &inputs,
                Graph::new,
                |g, v| {
                    let y = f(g, v)?;
                    random_projection(g, y, proj)
                },
                DEFAULT_STEP,
            )?;
            report.merge(&r);
        }
        out.push(SuiteEntry { name, report });
    }

    // dropout needs a seeded training graph so every evaluation draws the same mask
    let mut report = GradReport::default();
    for case in 0..cases {
        let mut rng = streams.rng_indexed("dropout", case as u64);
        let x = rand_t(&mut rng, &[4, 5]);
        let mask_seed = streams.derive_indexed("dropout.mask", case as u64);
        let proj = streams.derive_indexed("projection", case as u64);
        let r = check_inputs(
            &[x],
            || Graph::training(mask_seed),
            |g, v| {
                let y = g.dropout(v[0], 0.3)?;
                random_projection(g, y, proj)
            },
            DEFAULT_STEP,
        )?;
        report.merge(&r);
    }
    out.push(SuiteEntry { name: "dropout", report });
    Ok(out)
}

const MICRO_WORDS: [&str; 8] = ["a", "cat", "dog", "car", "big", "small", "left", "right"];

fn micro_vocab() -> Vocabulary {
    let line = MICRO_WORDS.join(" ");
    Vocabulary::build(std::iter::once(line.as_str()), 0)
}

/// A three-object scene, a micro model and two references, all drawn from
/// `rng`. The connectivity cycles with `case` so every wiring is covered.
fn micro_case(case: usize, rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> Result<(Model, Scene, Vec<Vec<usize>>)> {
    let d_feat = 8;
    let proposals = (0..3)
        .map(|_| Proposal {
            bbox: BBox::new(
                rng.random_range(40.0..600.0),
                rng.random_range(40.0..440.0),
                rng.random_range(10.0..200.0),
                rng.random_range(10.0..200.0),
            ),
            label: MICRO_WORDS[1..4].choose(rng).expect("non-empty").to_string(),
            prob: rng.random_range(0.71..1.0),
            feature: (0..d_feat).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let scene = Scene {
        id: format!("micro-{case}"),
        image_w: 640,
        image_h: 480,
        proposals,
        background: (0..d_feat).map(|_| rng.random_range(-1.0..1.0)).collect(),
        references: Vec::new(),
    };
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 2,
        memory_slots: 2,
        d_feat,
        vocab_size: vocab.len(),
        max_len: 8,
        geometry_heads: 2,
        dropout: 0.0,
        connectivity: Connectivity::ALL[case % Connectivity::ALL.len()],
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, rng.random())?;
    let refs = (0..2)
        .map(|_| {
            let len = rng.random_range(2..6);
            let mut r = vec![crate::data::START];
            r.extend((0..len).map(|_| rng.random_range(4..vocab.len())));
            r.push(crate::data::END);
            r
        })
        .collect();
    Ok((model, scene, refs))
}

/// Parameter gradients of the label-smoothed loss of a micro captioner
/// (3 objects, width 16, 2 layers, 2 heads, 2 memory slots, 12 words),
/// one random element of every parameter tensor per case.
pub fn model_check(cases: usize, seed: u64) -> Result<GradReport> {
    let streams = SeedStream::new(seed);
    let vocab = micro_vocab();
    let mut report = GradReport::default();
    for case in 0..cases {
        let mut rng = streams.rng_indexed("model", case as u64);
        let (model, scene, refs) = micro_case(case, &mut rng, &vocab)?;
        let prepared = model.prepare(&scene, &vocab)?;
        let segs: Vec<&[usize]> = refs.iter().map(|r| &r[..r.len() - 1]).collect();
        let targets: Vec<usize> = refs.iter().flat_map(|r| r[1..].iter().copied()).collect();
        let coords: Vec<(ParamId, usize)> = model
            .params
            .ids()
            .map(|id| (id, rng.random_range(0..model.params.get(id).numel())))
            .collect();
        let work = std::cell::RefCell::new(model.clone());
        let r = check_params(
            &model.params,
            |g, store| {
                let mut work = work.borrow_mut();
                work.params.clone_from(store);
                let enc = work.encode(g, &prepared)?;
                let logits = work.decode(g, &enc, &segs)?;
                xe_loss(g, logits, &targets, 0.1)
            },
            &coords,
            DEFAULT_STEP,
        )?;
        report.merge(&r);
    }
    Ok(report)
}

/// Every operation check followed by the micro captioner.
pub fn run(cases: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = op_checks(cases, seed)?;
    out.push(SuiteEntry { name: "micro_model", report: model_check(cases, seed)? });
    Ok(out)
}
