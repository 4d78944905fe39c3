use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::scene::tokenize;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Word/id map with reserved ids for padding, sentence bounds and unknown
/// words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    counts: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    counts: BTreeMap<String, u64>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            words: r.words,
            index,
            counts: r.counts,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            words: v.words,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    /// Words seen more than `min_count` times get ids, in order of first
    /// appearance, after the reserved ids.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_count: u64) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut order = Vec::new();
        for cap in captions {
            for w in tokenize(cap) {
                let c = counts.entry(w.to_string()).or_insert(0);
                if *c == 0 {
                    order.push(w.to_string());
                }
                *c += 1;
            }
        }
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(order.into_iter().filter(|w| counts[w] > min_count && !RESERVED.contains(&w.as_str())));
        VocabRepr { words, counts }.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).into_iter().map(|w| self.id_or_unk(w)).collect()
    }

    /// `START`, the caption's ids, `END`.
    pub fn encode_caption(&self, caption: &str) -> Vec<usize> {
        let mut ids = vec![START];
        ids.extend(self.encode(caption));
        ids.push(END);
        ids
    }

    /// Words up to the first `END`; `PAD` and `START` are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            match id {
                END => break,
                PAD | START => {}
                _ => out.push(self.word(id).unwrap_or(RESERVED[UNK])),
            }
        }
        out.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_is_a_strict_bound() {
        let mut caps = vec!["often"; 6];
        caps.extend(vec!["rare"; 5]);
        let v = Vocabulary::build(caps, 5);
        assert!(v.id("often").is_some());
        assert_eq!(v.id("rare"), None);
        assert_eq!(v.encode("often rare"), vec![v.id("often").unwrap(), UNK]);
    }

    #[test]
    fn ids_follow_first_appearance() {
        let v = Vocabulary::build(["b a", "a b c"], 0);
        assert_eq!(&v.words()[4..], &["b", "a", "c"]);
        assert_eq!(v.word(START), Some("<start>"));
    }

    #[test]
    fn round_trip_and_serde() {
        let v = Vocabulary::build(["a big cat left of a small dog"], 0);
        let ids = v.encode_caption("a small dog left of a big cat");
        assert_eq!(ids[0], START);
        assert_eq!(*ids.last().unwrap(), END);
        assert_eq!(v.decode(&ids), "a small dog left of a big cat");
        assert_eq!(v.encode(&v.decode(&ids)), ids[1..ids.len() - 1]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("cat"), v.id("cat"));
    }
}
