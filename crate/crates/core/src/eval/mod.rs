//! Automatic metrics: corpus BLEU, a style classifier, the combined scores
//! and length statistics, and trade-off frontiers.

mod bleu;
mod classifier;
mod pareto;
mod report;

pub use bleu::{corpus_bleu4, strip_special};
pub use classifier::{style_accuracy, ClassifierConfig, StyleClassifier, CLASSIFIER_KIND};
pub use pareto::{pareto_filter, render_tradeoff_tsv, TradeoffPoint};
pub use report::{aggregate_g2_h2, average_directions, length_stats, score_direction, DirectionInput, DirectionReport, EvalReport};
