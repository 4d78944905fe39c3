//! Shared fixtures for the benchmarks.

use latgeo_core::data::{generate_corpus, Scene, SynthConfig, Vocabulary};
use latgeo_core::model::{Model, ModelConfig, PreparedScene};

pub struct Fixture {
    pub scenes: Vec<Scene>,
    pub vocab: Vocabulary,
    pub model: Model,
    pub prepared: Vec<PreparedScene>,
    /// START ... END ids of every reference of the first scene.
    pub refs: Vec<Vec<usize>>,
}

/// Desk-scale model (width 64, 3 layers, 8 memory slots) over `n` synthetic
/// scenes with `objects` objects each.
pub fn fixture(n: usize, objects: usize) -> Fixture {
    let synth = SynthConfig { objects_min: objects, objects_max: objects, ..SynthConfig::default() };
    let scenes = generate_corpus(n, 0, &synth).expect("valid synth config");
    let vocab = Vocabulary::build(scenes.iter().flat_map(|s| s.references.iter().map(String::as_str)), 0);
    let cfg = ModelConfig { vocab_size: vocab.len(), dropout: 0.0, ..ModelConfig::default() };
    let model = Model::new(cfg, 1).expect("valid model config");
    let prepared = scenes.iter().map(|s| model.prepare(s, &vocab).expect("scene fits model")).collect();
    let refs = scenes[0].references.iter().map(|r| vocab.encode_caption(r)).collect();
    Fixture { scenes, vocab, model, prepared, refs }
}
