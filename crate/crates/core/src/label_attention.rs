//! Label attention: class-word embeddings, scaled by detection probability,
//! attend to each other and produce a sigmoid gate over encoder outputs.

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::layers::{AttendOpts, MultiHead, TraceTag};
use crate::numeric::{Graph, ParamStore, Tensor, Var};

/// Dictionary ids of the class words; unknown words map to UNK.
pub fn label_ids<'a>(classes: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary) -> Vec<usize> {
    classes.into_iter().map(|c| vocab.id_or_unk(c)).collect()
}

/// `L_O`: embedding-table rows of the class words.
pub fn labels_embed(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    g.embed(table, ids)
}

/// `R_O`: row `i` of `L_O` scaled by the class probability of object `i`.
pub fn rank_labels(g: &mut Graph, l_o: Var, probs: &[f64]) -> Result<Var> {
    g.scale_rows(l_o, probs)
}

/// `sigmoid(MultiHead(L_O, R_O, L_O))` over object rows.
pub fn lam_attention(g: &mut Graph, store: &ParamStore, att: &MultiHead, l_o: Var, r_o: Var) -> Result<Var> {
    let opts = AttendOpts {
        tag: Some(TraceTag { module: "lam", layer: 0 }),
        ..AttendOpts::default()
    };
    let a = att.attend(g, store, l_o, r_o, l_o, opts)?;
    Ok(g.sigmoid(a))
}

/// Appends the all-ones background row to the object gate.
pub fn label_gate(g: &mut Graph, object_gate: Var, background: bool) -> Result<Var> {
    if !background {
        return Ok(object_gate);
    }
    let d = g.shape(object_gate)[1];
    let ones = g.constant(Tensor::ones(&[1, d]));
    g.concat_rows(&[object_gate, ones])
}

/// Elementwise product of every encoder output with the gate.
pub fn gate_encoder_outputs(g: &mut Graph, outputs: &[Var], gate: Var, expected_layers: usize) -> Result<Vec<Var>> {
    if outputs.len() != expected_layers {
        return Err(Error::Config(format!(
            "{} encoder outputs for a {expected_layers}-layer model",
            outputs.len()
        )));
    }
    outputs.iter().map(|&o| g.mul(o, gate)).collect()
}
