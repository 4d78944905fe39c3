use std::collections::HashMap;

pub type Counts<'a> = HashMap<&'a [String], u32>;

/// Counts of all n-grams of order `n`.
pub fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

pub fn split(caption: &str) -> Vec<String> {
    crate::data::tokenize(caption).into_iter().map(String::from).collect()
}
