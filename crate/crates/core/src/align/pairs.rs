use std::collections::BTreeMap;

use super::{validate_alignment, Alignment};
use crate::corpus::{TokenSeq, Vocabulary, DEL, MASK};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PairCount {
    pub target: usize,
    pub count: usize,
    /// Share of this source token's pairs, in `[0, 1]`.
    pub proportion: f64,
}

/// Source token → the words it turned into, most frequent first.
pub type PairTable = BTreeMap<usize, Vec<PairCount>>;

/// Counts aligned word pairs over transfer results `(source, alignment, output)`.
///
/// An aligned slot records `x[t_i] → y_i`, a masked slot records
/// `MASK → y_i`, and a source word no slot points at records `x_j → DEL`.
pub fn count_aligned_pairs(results: &[(TokenSeq, Alignment, TokenSeq)]) -> Result<PairTable> {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (x, t, y) in results {
        if t.len() != y.len() || !validate_alignment(&t.0, x.len()) {
            return Err(Error::InvalidAlignment { targets: t.0.clone(), source_len: x.len() });
        }
        let mut used = vec![false; x.len()];
        for (&p, &out) in t.0.iter().zip(y.iter()) {
            let src = if p == 0 {
                MASK
            } else {
                used[p - 1] = true;
                x[p - 1]
            };
            *counts.entry(src).or_default().entry(out).or_default() += 1;
        }
        for (j, &u) in used.iter().enumerate() {
            if !u {
                *counts.entry(x[j]).or_default().entry(DEL).or_default() += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(src, targets)| {
            let total: usize = targets.values().sum();
            let mut row: Vec<PairCount> = targets
                .into_iter()
                .map(|(target, count)| PairCount { target, count, proportion: count as f64 / total as f64 })
                .collect();
            row.sort_by(|a, b| b.count.cmp(&a.count).then(a.target.cmp(&b.target)));
            (src, row)
        })
        .collect())
}

/// One line per pair: `source<TAB>target<TAB>count<TAB>percent`.
pub fn render_pair_report(table: &PairTable, vocab: &Vocabulary) -> String {
    let mut out = String::from("source\ttarget\tcount\tpercent\n");
    for (&src, row) in table {
        for p in row {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\n",
                vocab.decode(&[src])[0],
                vocab.decode(&[p.target])[0],
                p.count,
                100.0 * p.proportion
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        let v = Vocabulary::from_tokens(["good", "bad"]).unwrap();
        let r = vec![(v.encode_line("good"), Alignment(vec![1]), v.encode_line("bad"))];
        let t = count_aligned_pairs(&r).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[&v.id("good").unwrap()], vec![PairCount { target: v.id("bad").unwrap(), count: 1, proportion: 1.0 }]);
        assert_eq!(render_pair_report(&t, &v), "source\ttarget\tcount\tpercent\ngood\tbad\t1\t100.00\n");
    }

    #[test]
    fn unaligned_source_goes_to_del() {
        let v = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let r = vec![(v.encode_line("a b"), Alignment(vec![1]), v.encode_line("c"))];
        let t = count_aligned_pairs(&r).unwrap();
        assert_eq!(t[&v.id("a").unwrap()][0].target, v.id("c").unwrap());
        assert_eq!(t[&v.id("b").unwrap()][0].target, DEL);
    }

    #[test]
    fn proportions_sum_to_one() {
        let v = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let r = vec![
            (v.encode_line("a b"), Alignment(vec![1, 0, 2]), v.encode_line("c c a")),
            (v.encode_line("a"), Alignment(vec![0]), v.encode_line("b")),
            (v.encode_line("a a"), Alignment(vec![2]), v.encode_line("a")),
        ];
        let t = count_aligned_pairs(&r).unwrap();
        for row in t.values() {
            let s: f64 = row.iter().map(|p| p.proportion).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(count_aligned_pairs(&[(v.encode_line("a"), Alignment(vec![2]), v.encode_line("a"))]).is_err());
    }
}
