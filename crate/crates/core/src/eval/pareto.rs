use std::fmt::Write as _;

/// One (accuracy, reference BLEU) measurement taken during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub acc: f64,
    pub ref_bleu: f64,
    pub epoch: usize,
    pub run: String,
}

fn dominates(a: &TradeoffPoint, b: &TradeoffPoint) -> bool {
    a.acc >= b.acc && a.ref_bleu >= b.ref_bleu && (a.acc > b.acc || a.ref_bleu > b.ref_bleu)
}

/// Points not dominated on both axes by another point, sorted by accuracy.
/// Of several points equal on both axes only the first is kept.
pub fn pareto_filter(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let mut kept: Vec<TradeoffPoint> = Vec::new();
    for p in points {
        if points.iter().any(|q| dominates(q, p)) {
            continue;
        }
        if kept.iter().any(|k| k.acc == p.acc && k.ref_bleu == p.ref_bleu) {
            continue;
        }
        kept.push(p.clone());
    }
    kept.sort_by(|a, b| a.acc.total_cmp(&b.acc).then(b.ref_bleu.total_cmp(&a.ref_bleu)));
    kept
}

/// Tab-separated dump with a header line.
pub fn render_tradeoff_tsv(points: &[TradeoffPoint]) -> String {
    let mut s = String::from("run\tepoch\tacc\tref_bleu\n");
    for p in points {
        let _ = writeln!(s, "{}\t{}\t{:.2}\t{:.2}", p.run, p.epoch, p.acc, p.ref_bleu);
    }
    s
}
