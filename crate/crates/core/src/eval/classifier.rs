use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Style, StyledCorpus, TokenSeq};
use crate::error::{Error, Result};

/// Description written into reports next to accuracy numbers.
pub const CLASSIFIER_KIND: &str = "bag-of-ngrams logistic regression (unigrams+bigrams)";

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Fraction of each style kept aside to measure accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { epochs: 10, lr: 0.5, l2: 1e-5, holdout: 0.1, seed: 7 }
    }
}

/// Binary logistic regression over presence of unigrams and bigrams.
/// A positive score means style Y.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleClassifier {
    features: HashMap<Vec<usize>, usize>,
    weights: Vec<f64>,
    bias: f64,
    pub held_out_accuracy: f64,
}

fn ngrams(seq: &[usize]) -> impl Iterator<Item = &[usize]> {
    seq.windows(1).chain(seq.windows(2))
}

impl StyleClassifier {
    fn active(&self, seq: &[usize]) -> Vec<usize> {
        let mut idx: Vec<usize> = ngrams(seq).filter_map(|g| self.features.get(g).copied()).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    fn score(&self, seq: &[usize]) -> f64 {
        self.bias + self.active(seq).iter().map(|&i| self.weights[i]).sum::<f64>()
    }

    pub fn predict(&self, seq: &[usize]) -> Style {
        if self.score(seq) > 0.0 {
            Style::Y
        } else {
            Style::X
        }
    }

    /// Fits on the corpus minus a held-out slice of each style and records
    /// accuracy on that slice.
    pub fn train(corpus: &StyledCorpus, cfg: &ClassifierConfig) -> Result<Self> {
        if corpus.style_x.is_empty() || corpus.style_y.is_empty() {
            return Err(Error::Precondition("classifier needs sentences of both styles".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut split = |pool: &[TokenSeq], style: Style| {
            let mut items: Vec<(TokenSeq, Style)> = pool.iter().map(|s| (s.clone(), style)).collect();
            items.shuffle(&mut rng);
            let k = ((items.len() as f64 * cfg.holdout).round() as usize).min(items.len().saturating_sub(1));
            let train = items.split_off(k);
            (train, items)
        };
        let (mut train, mut test) = split(&corpus.style_x, Style::X);
        let (ty, hy) = split(&corpus.style_y, Style::Y);
        train.extend(ty);
        test.extend(hy);
        let mut features = HashMap::new();
        for (s, _) in &train {
            for g in ngrams(s) {
                let next = features.len();
                features.entry(g.to_vec()).or_insert(next);
            }
        }
        let mut clf = StyleClassifier { weights: vec![0.0; features.len()], features, bias: 0.0, held_out_accuracy: 0.0 };
        let encoded: Vec<(Vec<usize>, f64)> = train.iter().map(|(s, st)| (clf.active(s), st.index() as f64)).collect();
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let (idx, label) = &encoded[i];
                let z = clf.bias + idx.iter().map(|&j| clf.weights[j]).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - label;
                clf.bias -= cfg.lr * err;
                for &j in idx {
                    clf.weights[j] -= cfg.lr * (err + cfg.l2 * clf.weights[j]);
                }
            }
        }
        clf.held_out_accuracy = if test.is_empty() {
            f64::NAN
        } else {
            100.0 * test.iter().filter(|(s, st)| clf.predict(s) == *st).count() as f64 / test.len() as f64
        };
        Ok(clf)
    }
}

/// Percentage of `sentences` classified as `target`.
pub fn style_accuracy(clf: &StyleClassifier, sentences: &[TokenSeq], target: Style) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Precondition("style accuracy of an empty set".into()));
    }
    let hits = sentences.iter().filter(|s| clf.predict(s) == target).count();
    Ok(100.0 * hits as f64 / sentences.len() as f64)
}
