use std::fmt::Write as _;

use super::bleu::{corpus_bleu4, strip_special};
use super::classifier::{style_accuracy, StyleClassifier, CLASSIFIER_KIND};
use crate::corpus::{Style, TokenSeq};
use crate::error::{Error, Result};

/// `(g2, h2)`: geometric and harmonic mean of accuracy and BLEU. The
/// harmonic mean of two zeros is 0.
pub fn aggregate_g2_h2(acc: f64, ref_bleu: f64) -> (f64, f64) {
    let g2 = (acc * ref_bleu).sqrt();
    let h2 = if acc + ref_bleu == 0.0 { 0.0 } else { 2.0 * acc * ref_bleu / (acc + ref_bleu) };
    (g2, h2)
}

/// `(mean |Δ|, std Δ)` with `Δ = output_len - source_len` and the
/// population standard deviation.
pub fn length_stats(pairs: &[(usize, usize)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Precondition("length statistics of an empty set".into()));
    }
    let n = pairs.len() as f64;
    let deltas: Vec<f64> = pairs.iter().map(|&(s, o)| o as f64 - s as f64).collect();
    let mean_abs = deltas.iter().map(|d| d.abs()).sum::<f64>() / n;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok((mean_abs, var.sqrt()))
}

/// Metrics for one transfer direction (or their average).
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionReport {
    pub acc: f64,
    pub self_bleu: f64,
    pub ref_bleu: Option<f64>,
    pub g2: Option<f64>,
    pub h2: Option<f64>,
    pub mean_abs_delta: f64,
    pub std_delta: f64,
    pub count: usize,
}

/// Inputs for scoring one direction.
pub struct DirectionInput<'a> {
    pub sources: &'a [TokenSeq],
    pub outputs: &'a [TokenSeq],
    pub references: Option<&'a [Vec<TokenSeq>]>,
    pub target: Style,
}

pub fn score_direction(clf: &StyleClassifier, input: &DirectionInput) -> Result<DirectionReport> {
    if input.sources.len() != input.outputs.len() {
        return Err(Error::LengthMismatch(format!("{} sources, {} outputs", input.sources.len(), input.outputs.len())));
    }
    let outputs: Vec<TokenSeq> = input.outputs.iter().map(strip_special).collect();
    let sources: Vec<TokenSeq> = input.sources.iter().map(strip_special).collect();
    let acc = style_accuracy(clf, &outputs, input.target)?;
    let self_refs: Vec<Vec<TokenSeq>> = sources.iter().map(|s| vec![s.clone()]).collect();
    let self_bleu = corpus_bleu4(&outputs, &self_refs)?;
    let ref_bleu = match input.references {
        Some(r) => {
            let r: Vec<Vec<TokenSeq>> = r.iter().map(|set| set.iter().map(strip_special).collect()).collect();
            Some(corpus_bleu4(&outputs, &r)?)
        }
        None => None,
    };
    let (g2, h2) = match ref_bleu {
        Some(b) => {
            let (g, h) = aggregate_g2_h2(acc, b);
            (Some(g), Some(h))
        }
        None => (None, None),
    };
    let pairs: Vec<(usize, usize)> = input.sources.iter().zip(input.outputs).map(|(s, o)| (s.len(), o.len())).collect();
    let (mean_abs_delta, std_delta) = length_stats(&pairs)?;
    Ok(DirectionReport { acc, self_bleu, ref_bleu, g2, h2, mean_abs_delta, std_delta, count: input.sources.len() })
}

fn mean_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? + b?) / 2.0)
}

/// Arithmetic mean of two directions; g2 and h2 are averaged, not
/// recomputed from the averaged inputs.
pub fn average_directions(a: &DirectionReport, b: &DirectionReport) -> DirectionReport {
    DirectionReport {
        acc: (a.acc + b.acc) / 2.0,
        self_bleu: (a.self_bleu + b.self_bleu) / 2.0,
        ref_bleu: mean_opt(a.ref_bleu, b.ref_bleu),
        g2: mean_opt(a.g2, b.g2),
        h2: mean_opt(a.h2, b.h2),
        mean_abs_delta: (a.mean_abs_delta + b.mean_abs_delta) / 2.0,
        std_delta: (a.std_delta + b.std_delta) / 2.0,
        count: a.count + b.count,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub x_to_y: DirectionReport,
    pub y_to_x: DirectionReport,
    pub average: DirectionReport,
    pub classifier: String,
    pub classifier_held_out_acc: f64,
    /// Seconds per sentence. Left out of the serialized form unless asked
    /// for, so that repeated runs produce identical files.
    pub latency: Option<f64>,
}

impl EvalReport {
    pub fn new(x_to_y: DirectionReport, y_to_x: DirectionReport, clf: &StyleClassifier) -> Self {
        let average = average_directions(&x_to_y, &y_to_x);
        EvalReport {
            x_to_y,
            y_to_x,
            average,
            classifier: CLASSIFIER_KIND.to_string(),
            classifier_held_out_acc: clf.held_out_accuracy,
            latency: None,
        }
    }

    /// One `key value` pair per line.
    pub fn to_text(&self, with_latency: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classifier {}", self.classifier);
        let _ = writeln!(s, "classifier_held_out_acc {:.2}", self.classifier_held_out_acc);
        for (name, d) in [("x_to_y", &self.x_to_y), ("y_to_x", &self.y_to_x), ("avg", &self.average)] {
            let _ = writeln!(s, "{name}.count {}", d.count);
            let _ = writeln!(s, "{name}.acc {:.2}", d.acc);
            let _ = writeln!(s, "{name}.self_bleu {:.2}", d.self_bleu);
            if let (Some(r), Some(g), Some(h)) = (d.ref_bleu, d.g2, d.h2) {
                let _ = writeln!(s, "{name}.ref_bleu {r:.2}");
                let _ = writeln!(s, "{name}.g2 {g:.2}");
                let _ = writeln!(s, "{name}.h2 {h:.2}");
            }
            let _ = writeln!(s, "{name}.mean_abs_delta {:.2}", d.mean_abs_delta);
            let _ = writeln!(s, "{name}.std_delta {:.2}", d.std_delta);
        }
        if let (true, Some(l)) = (with_latency, self.latency) {
            let _ = writeln!(s, "latency_per_sentence {l:.6}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_arguments() {
        let (g, h) = aggregate_g2_h2(50.0, 50.0);
        assert!((g - 50.0).abs() < 1e-12 && (h - 50.0).abs() < 1e-12);
        assert_eq!(aggregate_g2_h2(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn length_fixtures() {
        assert_eq!(length_stats(&[(3, 4)]).unwrap(), (1.0, 0.0));
        assert_eq!(length_stats(&[(4, 4), (6, 6)]).unwrap(), (0.0, 0.0));
        assert!(length_stats(&[]).is_err());
    }

    proptest! {
        #[test]
        fn means_are_ordered_and_symmetric(a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
            let (g, h) = aggregate_g2_h2(a, b);
            let (g2, h2) = aggregate_g2_h2(b, a);
            prop_assert!((g - g2).abs() < 1e-9 && (h - h2).abs() < 1e-9);
            prop_assert!(h <= g + 1e-9);
            prop_assert!(g <= (a + b) / 2.0 + 1e-9);
            prop_assert!(g <= a.max(b) + 1e-9);
        }
    }
}
