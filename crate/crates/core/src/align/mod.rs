//! Monotone word alignments between a source sentence and a target sentence.
//!
//! Target position `i` holds `0` (filled with the `[Mask]` placeholder) or a
//! 1-based pointer into the source. Nonzero pointers must strictly increase.

mod dp;
mod pairs;

use std::fmt;

pub use dp::{
    alignment_objective, all_alignments, brute_force_pseudo_alignment, cosine, pseudo_alignment_dp,
    similarity_matrix, SimilarityMatrix, BRUTE_FORCE_LIMIT,
};
pub use pairs::{count_aligned_pairs, render_pair_report, PairCount, PairTable};

use crate::corpus::{TokenSeq, Vocabulary, MASK};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Alignment(pub Vec<usize>);

impl Alignment {
    /// Builds an alignment, rejecting out-of-range or non-monotone pointers.
    pub fn new(targets: Vec<usize>, source_len: usize) -> Result<Self> {
        if !validate_alignment(&targets, source_len) {
            return Err(Error::InvalidAlignment { targets, source_len });
        }
        Ok(Alignment(targets))
    }

    pub fn targets(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_masks(&self) -> usize {
        self.0.iter().filter(|&&t| t == 0).count()
    }

    /// Space-separated pointers, `0` for a masked slot.
    pub fn to_line(&self) -> String {
        self.0.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_line(line: &str, source_len: usize) -> Result<Self> {
        let targets = line
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Config(format!("bad alignment entry {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Alignment::new(targets, source_len)
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// True iff every pointer is at most `source_len` and the nonzero pointers
/// strictly increase.
pub fn validate_alignment(targets: &[usize], source_len: usize) -> bool {
    let mut last = 0;
    for &t in targets {
        if t == 0 {
            continue;
        }
        if t > source_len || t <= last {
            return false;
        }
        last = t;
    }
    true
}

/// The identity alignment `[1, ..., n]`.
pub fn simple_alignment(n: usize) -> Alignment {
    Alignment((1..=n).collect())
}

/// Decoder input: `x[t_i]` for aligned slots, `MASK` for the rest.
pub fn apply_alignment(x: &[usize], t: &Alignment) -> Result<TokenSeq> {
    if !validate_alignment(&t.0, x.len()) {
        return Err(Error::InvalidAlignment { targets: t.0.clone(), source_len: x.len() });
    }
    Ok(TokenSeq(t.0.iter().map(|&p| if p == 0 { MASK } else { x[p - 1] }).collect()))
}

/// Renders `src→tgt` for every target position, using `[Mask]` as the source
/// of unaligned slots.
pub fn render_alignment_pairs(x: &[usize], t: &Alignment, y: &[usize], vocab: &Vocabulary) -> Result<String> {
    if t.len() != y.len() {
        return Err(Error::LengthMismatch(format!("alignment has {} entries, output has {} tokens", t.len(), y.len())));
    }
    let src = apply_alignment(x, t)?;
    let parts: Vec<String> = src
        .iter()
        .zip(y)
        .map(|(&s, &o)| format!("{}→{}", vocab.decode(&[s])[0], vocab.decode(&[o])[0]))
        .collect();
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validation_examples() {
        assert!(validate_alignment(&[1, 0, 3], 3));
        assert!(!validate_alignment(&[2, 1], 2));
        assert!(!validate_alignment(&[1, 4], 3));
        assert!(!validate_alignment(&[1, 1], 3));
        assert!(validate_alignment(&[], 0));
        assert!(validate_alignment(&[0, 0], 0));
    }

    #[test]
    fn simple_alignment_examples() {
        assert_eq!(simple_alignment(3).0, vec![1, 2, 3]);
        assert!(simple_alignment(0).is_empty());
        assert_eq!(simple_alignment(1).0, vec![1]);
    }

    #[test]
    fn apply_examples() {
        let vocab = Vocabulary::from_tokens(["not", "terrible"]).unwrap();
        let x = vocab.encode_line("not terrible");
        let out = apply_alignment(&x, &Alignment(vec![1, 2])).unwrap();
        assert_eq!(vocab.decode_line(&out), "not terrible");
        let out = apply_alignment(&x, &Alignment(vec![1, 0, 2])).unwrap();
        assert_eq!(vocab.decode_line(&out), "not [Mask] terrible");
        assert!(apply_alignment(&x, &Alignment(vec![])).unwrap().is_empty());
        assert!(matches!(apply_alignment(&x, &Alignment(vec![3])), Err(Error::InvalidAlignment { .. })));
    }

    #[test]
    fn line_formats() {
        let vocab = Vocabulary::from_tokens(["not", "terrible", "very", "good"]).unwrap();
        let x = vocab.encode_line("not terrible");
        let y = vocab.encode_line("not very good");
        let t = Alignment::parse_line("1 0 2", 2).unwrap();
        assert_eq!(t.to_line(), "1 0 2");
        assert_eq!(render_alignment_pairs(&x, &t, &y, &vocab).unwrap(), "not→not [Mask]→very terrible→good");
        assert!(Alignment::parse_line("2 1", 2).is_err());
        assert!(Alignment::parse_line("a", 2).is_err());
    }

    proptest! {
        #[test]
        fn applied_length_and_content(x in prop::collection::vec(5usize..20, 0..8), mask in prop::collection::vec(any::<bool>(), 0..8)) {
            // build a valid alignment by walking the source
            let mut t = Vec::new();
            let mut j = 0;
            for m in mask {
                if m || j >= x.len() { t.push(0) } else { j += 1; t.push(j) }
            }
            let a = Alignment::new(t.clone(), x.len()).unwrap();
            let out = apply_alignment(&x, &a).unwrap();
            prop_assert_eq!(out.len(), t.len());
            for (o, p) in out.iter().zip(&t) {
                if *p == 0 { prop_assert_eq!(*o, MASK) } else { prop_assert_eq!(*o, x[p - 1]) }
            }
        }
    }
}
