//! Caption metrics: BLEU, ROUGE-L and CIDEr-D.

mod bleu;
mod cider;
mod ngrams;
mod rouge;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, BleuScores};
pub use cider::{cider_d, CiderStats, SIGMA};
pub use ngrams::split;
pub use rouge::{rouge_l, rouge_l_sentence, BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "ciderD")]
    pub cider_d: f64,
}

/// Corpus scores plus per-image scores keyed by image id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "ciderD")]
    pub cider_d: f64,
    pub per_image: BTreeMap<String, ImageScores>,
}

/// Scores whitespace-tokenized candidates against their reference sets.
pub fn evaluate(ids: &[String], candidates: &[String], references: &[Vec<String>]) -> Scores {
    let hyps: Vec<Vec<String>> = candidates.iter().map(|c| split(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| split(r)).collect())
        .collect();
    let b = bleu(&hyps, &refs, 4);
    let (rl, rl_per) = rouge_l(&hyps, &refs);
    let (cd, cd_per) = cider_d(&hyps, &refs);
    let per_image = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.clone(),
                ImageScores {
                    bleu1: b.per_image[i][0],
                    bleu4: b.per_image[i][3],
                    rouge_l: rl_per[i],
                    cider_d: cd_per[i],
                },
            )
        })
        .collect();
    Scores {
        bleu1: b.corpus[0],
        bleu4: b.corpus[3],
        rouge_l: rl,
        cider_d: cd,
        per_image,
    }
}
