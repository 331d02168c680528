use std::collections::HashMap;

use crate::corpus::{TokenSeq, NUM_RESERVED, UNK};
use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Length of the reference closest to `hyp_len`; ties go to the shorter one.
fn closest_ref_len(hyp_len: usize, refs: &[TokenSeq]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - hyp_len as i64).abs(), l))
        .unwrap_or(0)
}

/// Corpus-level BLEU-4 in `[0, 100]`: uniform weights over 1- to 4-gram
/// precisions with clipped counts pooled over the corpus, brevity penalty
/// against the closest reference length, no smoothing (any zero precision
/// gives 0).
pub fn corpus_bleu4(hypotheses: &[TokenSeq], references: &[Vec<TokenSeq>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(format!("{} hypotheses, {} reference lists", hypotheses.len(), references.len())));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Precondition(format!("hypothesis {i} has no reference")));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += closest_ref_len(hyp.len(), refs);
        for n in 1..=MAX_ORDER {
            let counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.contains(&0) || hyp_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_ORDER).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / MAX_ORDER as f64;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Removes reserved ids other than UNK, which is an ordinary word to BLEU.
pub fn strip_special(seq: &TokenSeq) -> TokenSeq {
    TokenSeq(seq.iter().copied().filter(|&t| t >= NUM_RESERVED || t == UNK).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn s(ids: &[usize]) -> TokenSeq {
        TokenSeq(ids.to_vec())
    }

    #[test]
    fn identical_corpus_is_100() {
        let h = vec![s(&[5, 6, 7, 8, 9]), s(&[10, 11, 12, 13])];
        let r: Vec<Vec<TokenSeq>> = h.iter().map(|x| vec![x.clone()]).collect();
        assert_eq!(corpus_bleu4(&h, &r).unwrap(), 100.0);
    }

    #[test]
    fn no_four_gram_overlap_is_zero() {
        let h = vec![s(&[5, 6, 7, 8])];
        let r = vec![vec![s(&[5, 6, 7, 9])]];
        assert_eq!(corpus_bleu4(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        assert!(corpus_bleu4(&[s(&[5])], &[]).is_err());
        assert!(corpus_bleu4(&[s(&[5])], &[vec![]]).is_err());
    }

    #[test]
    fn closest_length_prefers_shorter_on_ties() {
        assert_eq!(closest_ref_len(5, &[s(&[1; 4]), s(&[1; 6])]), 4);
        assert_eq!(closest_ref_len(5, &[s(&[1; 7]), s(&[1; 6])]), 6);
    }

    proptest! {
        #[test]
        fn order_of_sentences_does_not_matter(
            sents in prop::collection::vec((prop::collection::vec(5usize..9, 1..8), prop::collection::vec(5usize..9, 1..8)), 1..6),
            seed in any::<u64>()
        ) {
            let mut pairs = sents.clone();
            let a = corpus_bleu4(
                &pairs.iter().map(|(h, _)| TokenSeq(h.clone())).collect::<Vec<_>>(),
                &pairs.iter().map(|(_, r)| vec![TokenSeq(r.clone())]).collect::<Vec<_>>(),
            ).unwrap();
            pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = corpus_bleu4(
                &pairs.iter().map(|(h, _)| TokenSeq(h.clone())).collect::<Vec<_>>(),
                &pairs.iter().map(|(_, r)| vec![TokenSeq(r.clone())]).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
