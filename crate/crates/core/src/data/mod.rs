//! Scenes, synthetic generation, caption grammar, vocabulary and file I/O.

pub mod grammar;
pub mod jsonl;
mod scene;
pub mod synth;
pub mod vocab;

pub use grammar::{render_captions, Grammar};
pub use jsonl::{load_proposals, read_scenes, write_scenes};
pub use scene::{tokenize, BBox, Proposal, Scene};
pub use synth::{generate_corpus, generate_scene, pseudo_features, SynthConfig};
pub use vocab::{Vocabulary, END, PAD, START, UNK};
