//! Template grammar producing reference captions whose wording depends on
//! relative object size and horizontal order.

use std::cmp::Ordering;

use super::scene::{Proposal, Scene};

/// Area ratio beyond which one object is called "big" and the other "small".
pub const SIZE_RATIO: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    /// One opener per reference caption; each starts with a distinct word.
    pub openers: Vec<&'static str>,
    /// Objects mentioned at most, in canonical order.
    pub max_mentions: usize,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            openers: vec![
                "there is",
                "we can see",
                "this image shows",
                "in this picture",
                "here we have",
            ],
            max_mentions: 3,
        }
    }
}

impl Grammar {
    /// Longest caption the grammar can emit, in words.
    pub fn max_words(&self) -> usize {
        let opener = self.openers.iter().map(|o| o.split(' ').count()).max().unwrap_or(0);
        // "a big X left of a small Y" then "and a big Z left of the Y" per extra object
        let content = match self.max_mentions {
            0 | 1 => 5,
            n => 8 + 8 * (n - 2),
        };
        opener + content
    }
}

fn size_word(subject: &Proposal, other: &Proposal) -> Option<&'static str> {
    let ratio = subject.bbox.area() / other.bbox.area();
    if ratio > SIZE_RATIO {
        Some("big")
    } else if ratio < 1.0 / SIZE_RATIO {
        Some("small")
    } else {
        None
    }
}

fn relation(subject: &Proposal, other: &Proposal) -> &'static str {
    match subject.bbox.x.partial_cmp(&other.bbox.x) {
        Some(Ordering::Less) => "left of",
        Some(Ordering::Greater) => "right of",
        _ => "next to",
    }
}

fn noun_phrase(out: &mut Vec<String>, subject: &Proposal, other: Option<&Proposal>) {
    out.push("a".into());
    if let Some(adj) = other.and_then(|o| size_word(subject, o)) {
        out.push(adj.into());
    }
    out.push(subject.label.clone());
}

/// Objects in the order captions mention them: by label, then left to right.
pub fn canonical_order(scene: &Scene) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scene.proposals.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&scene.proposals[a], &scene.proposals[b]);
        pa.label
            .cmp(&pb.label)
            .then(pa.bbox.x.total_cmp(&pb.bbox.x))
            .then(pa.bbox.y.total_cmp(&pb.bbox.y))
            .then(a.cmp(&b))
    });
    idx
}

/// The shared body of every reference caption.
pub fn describe(scene: &Scene, grammar: &Grammar) -> Vec<String> {
    let order = canonical_order(scene);
    let objs: Vec<&Proposal> = order
        .iter()
        .take(grammar.max_mentions.max(1))
        .map(|&i| &scene.proposals[i])
        .collect();
    let mut words = Vec::new();
    match objs.as_slice() {
        [] => {}
        [only] => {
            noun_phrase(&mut words, only, None);
            let rel = only.bbox.x / f64::from(scene.image_w);
            let place = if rel < 1.0 / 3.0 {
                "on the left"
            } else if rel > 2.0 / 3.0 {
                "on the right"
            } else {
                "in the middle"
            };
            words.extend(place.split(' ').map(String::from));
        }
        [first, second, rest @ ..] => {
            noun_phrase(&mut words, first, Some(second));
            words.extend(relation(first, second).split(' ').map(String::from));
            noun_phrase(&mut words, second, Some(first));
            let mut anchor = *second;
            for extra in rest {
                words.push("and".into());
                noun_phrase(&mut words, extra, Some(anchor));
                words.extend(relation(extra, anchor).split(' ').map(String::from));
                words.push("the".into());
                words.push(anchor.label.clone());
                anchor = extra;
            }
        }
    }
    words
}

/// One reference caption per opener.
pub fn render_captions(scene: &Scene, grammar: &Grammar) -> Vec<String> {
    let body = describe(scene, grammar).join(" ");
    grammar
        .openers
        .iter()
        .map(|opener| format!("{opener} {body}"))
        .collect()
}
