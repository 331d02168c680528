use std::collections::HashMap;
use std::ops::Deref;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
/// Placeholder for target positions aligned to no source word.
pub const MASK: usize = 3;
/// Marks a source word that no target word points at.
pub const DEL: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<eos>", "[Mask]", "[Del]"];

/// An encoded sentence. Never contains PAD.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(v: Vec<usize>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { token_to_id, id_to_token }
    }

    /// Builds a vocabulary from an explicit token list (reserved tokens are
    /// prepended and must not appear in `tokens`).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::reserved_only();
        for t in tokens {
            let t = t.as_ref();
            if v.token_to_id.contains_key(t) {
                return Err(Error::Precondition(format!("duplicate or reserved token {t:?}")));
            }
            v.push(t.to_string());
        }
        Ok(v)
    }

    fn push(&mut self, t: String) -> usize {
        let id = self.id_to_token.len();
        self.token_to_id.insert(t.clone(), id);
        self.id_to_token.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Unknown tokens map to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        TokenSeq(tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect())
    }

    pub fn encode_line(&self, line: &str) -> TokenSeq {
        let toks: Vec<&str> = line.split_whitespace().collect();
        self.encode(&toks)
    }

    pub fn decode(&self, seq: &[usize]) -> Vec<&str> {
        seq.iter().map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK])).collect()
    }

    pub fn decode_line(&self, seq: &[usize]) -> String {
        self.decode(seq).join(" ")
    }

    /// Ids that may appear as ordinary words (everything past the reserved block).
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        NUM_RESERVED..self.len()
    }
}

/// Counts tokens and keeps those seen at least `min_freq` times, ordered by
/// frequency (descending) then lexicographically.
pub fn build_vocabulary<S: AsRef<str>>(sentences: &[Vec<S>], min_freq: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Precondition("min_freq must be at least 1".into()));
    }
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED_TOKENS.contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
    }

    #[test]
    fn reserved_block_then_corpus_tokens() {
        let v = build_vocabulary(&corpus(&["a a b"]), 1).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 2);
        assert_eq!(v.id("a"), Some(NUM_RESERVED));
        assert_eq!(v.id("b"), Some(NUM_RESERVED + 1));
        assert_eq!(v.token(MASK), Some("[Mask]"));
    }

    #[test]
    fn min_freq_threshold() {
        let v = build_vocabulary(&corpus(&["a a b"]), 2).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 1);
        assert!(v.id("b").is_none());
    }

    #[test]
    fn ties_are_lexicographic() {
        let v1 = build_vocabulary(&corpus(&["z y x", "x y z"]), 1).unwrap();
        let v2 = build_vocabulary(&corpus(&["x y z", "z y x"]), 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.id("x"), Some(NUM_RESERVED));
        assert_eq!(v1.id("z"), Some(NUM_RESERVED + 2));
    }

    #[test]
    fn empty_corpus_and_zero_min_freq_fail() {
        assert!(matches!(build_vocabulary::<String>(&[], 1), Err(Error::EmptyCorpus)));
        assert!(build_vocabulary(&corpus(&["a"]), 0).is_err());
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = build_vocabulary(&corpus(&["a b"]), 1).unwrap();
        assert_eq!(v.encode_line("a q b").ids(), &[NUM_RESERVED, UNK, NUM_RESERVED + 1]);
    }

    #[test]
    fn bijection() {
        let v = build_vocabulary(&corpus(&["the cat sat on the mat"]), 1).unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }
}
