use super::Alignment;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest source or target length accepted by the exhaustive search.
pub const BRUTE_FORCE_LIMIT: usize = 10;

/// `M x (N+1)` cosine similarities between target and source words. Column
/// 0 stands for the `[Mask]` slot and is always zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    sim: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn target_len(&self) -> usize {
        self.rows
    }

    pub fn source_len(&self) -> usize {
        self.cols - 1
    }

    /// Similarity of target `i` (1-based) and source `j` (0 = mask slot).
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sim[(i - 1) * self.cols + j]
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn embedding_row(emb: &Tensor, tok: usize) -> Result<&[f64]> {
    if emb.shape().len() != 2 || tok >= emb.rows() {
        return Err(Error::MissingEmbedding(tok));
    }
    Ok(emb.row_slice(tok))
}

pub fn similarity_matrix(x: &[usize], y: &[usize], emb: &Tensor) -> Result<SimilarityMatrix> {
    let cols = x.len() + 1;
    let xs: Vec<&[f64]> = x.iter().map(|&t| embedding_row(emb, t)).collect::<Result<_>>()?;
    let mut sim = vec![0.0; y.len() * cols];
    for (i, &yt) in y.iter().enumerate() {
        let yr = embedding_row(emb, yt)?;
        for (j, xr) in xs.iter().enumerate() {
            sim[i * cols + j + 1] = cosine(yr, xr);
        }
    }
    Ok(SimilarityMatrix { rows: y.len(), cols, sim })
}

/// Sum of similarities over aligned target positions, accumulated in target
/// order from 0. Masked positions add nothing.
pub fn alignment_objective(x: &[usize], y: &[usize], t: &Alignment, emb: &Tensor) -> Result<f64> {
    if t.len() != y.len() || !super::validate_alignment(&t.0, x.len()) {
        return Err(Error::InvalidAlignment { targets: t.0.clone(), source_len: x.len() });
    }
    let sim = similarity_matrix(x, y, emb)?;
    Ok(score(&sim, &t.0))
}

fn score(sim: &SimilarityMatrix, t: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &p) in t.iter().enumerate() {
        if p > 0 {
            s += sim.get(i + 1, p);
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    /// target i is masked
    Skip,
    /// target i points at source j
    Take,
    /// target i points somewhere left of j
    Left,
}

/// Highest-scoring monotone alignment of target `y` into source `x`.
///
/// Each cell keeps the first maximal choice in the order: leave the target
/// word unaligned, align it to the current source word, reuse the best
/// alignment with a shorter source prefix.
pub fn pseudo_alignment_dp(x: &[usize], y: &[usize], emb: &Tensor) -> Result<(Alignment, f64)> {
    let sim = similarity_matrix(x, y, emb)?;
    Ok(dp_on(&sim))
}

fn dp_on(sim: &SimilarityMatrix) -> (Alignment, f64) {
    let (m, n) = (sim.target_len(), sim.source_len());
    let w = n + 1;
    let mut f = vec![0.0f64; (m + 1) * w];
    let mut back = vec![Step::Skip; (m + 1) * w];
    for i in 1..=m {
        for j in 0..=n {
            let c1 = f[(i - 1) * w + j];
            let (val, step) = if j == 0 {
                (c1, Step::Skip)
            } else {
                let c2 = f[(i - 1) * w + j - 1] + sim.get(i, j);
                let c3 = f[i * w + j - 1];
                if c1 >= c2 && c1 >= c3 {
                    (c1, Step::Skip)
                } else if c2 >= c3 {
                    (c2, Step::Take)
                } else {
                    (c3, Step::Left)
                }
            };
            f[i * w + j] = val;
            back[i * w + j] = step;
        }
    }
    let mut t = vec![0; m];
    let (mut i, mut j) = (m, n);
    while i > 0 {
        match back[i * w + j] {
            Step::Skip => {
                t[i - 1] = 0;
                i -= 1;
            }
            Step::Take => {
                t[i - 1] = j;
                i -= 1;
                j -= 1;
            }
            Step::Left => j -= 1,
        }
    }
    (Alignment(t), f[m * w + n])
}

/// Every valid alignment of `m` target positions into a source of length `n`.
pub fn all_alignments(n: usize, m: usize) -> Result<Vec<Alignment>> {
    if n > BRUTE_FORCE_LIMIT || m > BRUTE_FORCE_LIMIT {
        return Err(Error::Precondition(format!(
            "exhaustive enumeration limited to lengths <= {BRUTE_FORCE_LIMIT}, got N={n} M={m}"
        )));
    }
    fn rec(n: usize, m: usize, last: usize, cur: &mut Vec<usize>, out: &mut Vec<Alignment>) {
        if cur.len() == m {
            out.push(Alignment(cur.clone()));
            return;
        }
        for p in std::iter::once(0).chain(last + 1..=n) {
            cur.push(p);
            rec(n, m, if p == 0 { last } else { p }, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, m, 0, &mut Vec::with_capacity(m), &mut out);
    Ok(out)
}

/// Scans from the last target position backwards: a masked slot wins over
/// any pointer, and a larger pointer wins over a smaller one.
fn preferred(a: &[usize], b: &[usize]) -> bool {
    for (&pa, &pb) in a.iter().rev().zip(b.iter().rev()) {
        if pa == pb {
            continue;
        }
        return match (pa, pb) {
            (0, _) => true,
            (_, 0) => false,
            _ => pa > pb,
        };
    }
    false
}

/// Exhaustive search over all valid alignments. Among maximal scores it
/// returns the alignment the dynamic program selects.
pub fn brute_force_pseudo_alignment(x: &[usize], y: &[usize], emb: &Tensor) -> Result<(Alignment, f64)> {
    let candidates = all_alignments(x.len(), y.len())?;
    let sim = similarity_matrix(x, y, emb)?;
    let mut best: Option<(Alignment, f64)> = None;
    for t in candidates {
        let s = score(&sim, &t.0);
        let better = match &best {
            None => true,
            Some((bt, bs)) => s > *bs || (s == *bs && preferred(&t.0, &bt.0)),
        };
        if better {
            best = Some((t, s));
        }
    }
    Ok(best.expect("at least the all-mask alignment exists"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::validate_alignment;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(v: usize, d: usize) -> Tensor {
        let mut data = vec![0.0; v * d];
        for i in 0..v {
            data[i * d + i % d] = 1.0;
        }
        Tensor::matrix(v, d, data).unwrap()
    }

    /// Unit rows for tokens a=0, b=1, c=2 with cos(c,a)=0.2, cos(c,b)=0.9,
    /// cos(a,b)=0.
    fn abc() -> Tensor {
        let c2 = (1.0f64 - 0.04 - 0.81).sqrt();
        Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.2, 0.9, c2]).unwrap()
    }

    fn random_unit(v: usize, d: usize, rng: &mut impl Rng) -> Tensor {
        let mut data = Vec::with_capacity(v * d);
        for _ in 0..v {
            let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(row.iter().map(|x| x / norm));
        }
        Tensor::matrix(v, d, data).unwrap()
    }

    #[test]
    fn mask_column_is_zero() {
        let emb = abc();
        let s = similarity_matrix(&[0, 1], &[2, 1], &emb).unwrap();
        assert_eq!(s.get(1, 0), 0.0);
        assert!((s.get(1, 1) - 0.2).abs() < 1e-12);
        assert!((s.get(1, 2) - 0.9).abs() < 1e-12);
        assert!((s.get(2, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        let emb = abc();
        let x = [0, 1];
        let y = [2, 1];
        assert_eq!(alignment_objective(&x, &y, &Alignment(vec![0, 0]), &emb).unwrap(), 0.0);
        let v = alignment_objective(&x, &y, &Alignment(vec![1, 2]), &emb).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
        let id = one_hot(3, 3);
        let v = alignment_objective(&[0, 1, 2], &[0, 1, 2], &Alignment(vec![1, 2, 3]), &id).unwrap();
        assert_eq!(v, 3.0);
        assert!(alignment_objective(&x, &y, &Alignment(vec![2, 1]), &emb).is_err());
    }

    #[test]
    fn dp_examples() {
        let id = one_hot(3, 3);
        let (t, s) = pseudo_alignment_dp(&[0, 1, 2], &[0, 1, 2], &id).unwrap();
        assert_eq!((t.0, s), (vec![1, 2, 3], 3.0));
        let (t, s) = pseudo_alignment_dp(&[0, 1], &[], &id).unwrap();
        assert_eq!((t.0, s), (vec![], 0.0));
        let emb = abc();
        let (t, s) = pseudo_alignment_dp(&[0, 1], &[2, 1], &emb).unwrap();
        assert_eq!(t.0, vec![1, 2]);
        assert!((s - 1.2).abs() < 1e-12);
        // exhaustive enumeration agrees
        let (bt, bs) = brute_force_pseudo_alignment(&[0, 1], &[2, 1], &emb).unwrap();
        assert_eq!((bt.0, bs), (t.0.clone(), s));
    }

    #[test]
    fn negative_similarity_is_left_unaligned() {
        let emb = Tensor::matrix(2, 2, vec![1.0, 0.0, -0.6, 0.8]).unwrap();
        assert_eq!(brute_force_pseudo_alignment(&[0], &[1], &emb).unwrap(), (Alignment(vec![0]), 0.0));
        assert_eq!(pseudo_alignment_dp(&[0], &[1], &emb).unwrap(), (Alignment(vec![0]), 0.0));
        assert_eq!(brute_force_pseudo_alignment(&[0], &[0], &emb).unwrap(), (Alignment(vec![1]), 1.0));
    }

    #[test]
    fn ties_prefer_masking() {
        // orthogonal words everywhere: every alignment scores 0
        let id = one_hot(4, 4);
        let (t, _) = pseudo_alignment_dp(&[0, 1], &[2, 3], &id).unwrap();
        assert_eq!(t.0, vec![0, 0]);
        // a repeated source word: the later copy is preferred
        let (t, s) = pseudo_alignment_dp(&[0, 0], &[0], &id).unwrap();
        assert_eq!((t.0.clone(), s), (vec![2], 1.0));
        assert_eq!(brute_force_pseudo_alignment(&[0, 0], &[0], &id).unwrap().0, t);
    }

    #[test]
    fn missing_embedding_names_token() {
        let id = one_hot(3, 3);
        assert!(matches!(pseudo_alignment_dp(&[0, 7], &[1], &id), Err(Error::MissingEmbedding(7))));
    }

    #[test]
    fn enumeration_guard_and_counts() {
        assert!(all_alignments(11, 2).is_err());
        assert!(brute_force_pseudo_alignment(&[0; 11], &[0], &one_hot(1, 1)).is_err());
        // sum_k C(m,k) C(n,k)
        assert_eq!(all_alignments(2, 2).unwrap().len(), 6);
        assert_eq!(all_alignments(3, 3).unwrap().len(), 20);
        assert_eq!(all_alignments(0, 3).unwrap().len(), 1);
        assert!(all_alignments(4, 3).unwrap().iter().all(|t| validate_alignment(&t.0, 4)));
    }

    #[test]
    fn dp_matches_brute_force_on_many_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let v = rng.gen_range(1..=8);
            let emb = random_unit(v, 4, &mut rng);
            let n = rng.gen_range(0..=6);
            let m = rng.gen_range(0..=6);
            let x: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
            let y: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();
            let dp = pseudo_alignment_dp(&x, &y, &emb).unwrap();
            let bf = brute_force_pseudo_alignment(&x, &y, &emb).unwrap();
            assert_eq!(dp.1.to_bits(), bf.1.to_bits(), "x={x:?} y={y:?}");
            assert_eq!(dp.0, bf.0, "x={x:?} y={y:?}");
        }
    }

    proptest! {
        #[test]
        fn dp_is_valid_and_optimal(
            seed in any::<u64>(),
            n in 0usize..7, m in 0usize..7,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = random_unit(6, 3, &mut rng);
            let x: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let y: Vec<usize> = (0..m).map(|_| rng.gen_range(0..6)).collect();
            let (t, s) = pseudo_alignment_dp(&x, &y, &emb).unwrap();
            prop_assert!(validate_alignment(&t.0, n));
            prop_assert_eq!(t.len(), m);
            prop_assert_eq!(alignment_objective(&x, &y, &t, &emb).unwrap(), s);
            // random valid alignments never beat it
            for _ in 0..20 {
                let mut r = Vec::new();
                let mut last = 0;
                for _ in 0..m {
                    if last < n && rng.gen_bool(0.6) {
                        last = rng.gen_range(last + 1..=n);
                        r.push(last);
                    } else {
                        r.push(0);
                    }
                }
                let v = alignment_objective(&x, &y, &Alignment(r), &emb).unwrap();
                prop_assert!(v <= s);
            }
        }

        #[test]
        fn self_alignment_is_identity(n in 1usize..8) {
            let id = one_hot(8, 8);
            let x: Vec<usize> = (0..n).collect();
            let (t, s) = pseudo_alignment_dp(&x, &x, &id).unwrap();
            prop_assert_eq!(t.0, (1..=n).collect::<Vec<_>>());
            prop_assert_eq!(s, n as f64);
        }
    }
}
