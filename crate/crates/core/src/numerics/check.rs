use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Runs `expr` once and returns the scalar value and the gradient of every
/// parameter in `store`, keyed by parameter name.
pub fn evaluate_with_gradients<F>(store: &ParamStore, mut expr: F) -> Result<(f64, HashMap<String, Tensor>)>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = expr(store, &mut g)?;
    let grads = g.backward(root)?;
    Ok((g.value(root).item(), grads.named(store)))
}

/// Worst entry found by [`finite_difference_report`].
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Max relative error between reverse-mode gradients and central differences.
pub fn finite_difference_check<F>(store: &mut ParamStore, expr: F, epsilon: f64) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    finite_difference_report(store, expr, epsilon, None).map(|r| r.max_relative_error)
}

/// Compares analytic gradients (computed at the store's precision) with a
/// fourth-order central difference `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`
/// evaluated in 64-bit arithmetic. The error of an entry is
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
///
/// `only` restricts the check to parameters whose name starts with one of the
/// given prefixes.
pub fn finite_difference_report<F>(
    store: &mut ParamStore,
    mut expr: F,
    epsilon: f64,
    only: Option<&[&str]>,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Precondition(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new().with_precision(store.precision());
    let root = expr(store, &mut g)?;
    let first = g.value(root).item();
    let grads = g.backward(root)?;
    drop(g);

    let mut g2 = Graph::new().with_precision(store.precision());
    let root2 = expr(store, &mut g2)?;
    let second = g2.value(root2).item();
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    drop(g2);

    let original_precision = store.precision();
    store.set_precision(Precision::F64);
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new().with_precision(Precision::F64);
        let r = expr(store, &mut g)?;
        Ok(g.value(r).item())
    };

    let mut report = FdReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if let Some(prefixes) = only {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
        }
        if !store.get(id).requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = grads
            .get(store, id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        let base = store.get(id).value.data().to_vec();
        for k in 0..base.len() {
            let mut vals = [0.0; 4];
            for (slot, off) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
                let mut w = base.clone();
                w[k] += off * epsilon;
                store.set_value(id, &w)?;
                vals[slot] = eval(store)?;
            }
            store.set_value(id, &base)?;
            // grouped so that a locally constant function gives exactly 0
            let numeric = ((vals[0] - vals[3]) + 8.0 * (vals[2] - vals[1])) / (12.0 * epsilon);
            let err = (analytic[k] - numeric).abs() / (numeric.abs() + 1e-8);
            report.entries_checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = analytic[k];
                report.numeric = numeric;
            }
        }
    }
    store.set_precision(original_precision);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::PrecisionGuard;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(store: &ParamStore, g: &mut Graph) -> Result<Var> {
        let x = g.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5])?);
        let w = g.param(store, store.id("w").unwrap());
        let b = g.param(store, store.id("b").unwrap());
        let y = g.matmul(x, w)?;
        let y = g.add(y, b)?;
        let c = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.3).collect())?);
        let y = g.mul(y, c)?;
        Ok(g.sum(y))
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_xavier("w", 2, 4, &mut rng).unwrap();
        store.add_normal("b", vec![4], 0.5, &mut rng).unwrap();
        let err = finite_difference_check(&mut store, linear, 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let mut store = ParamStore::new();
        store.add_const("w", vec![2, 4], 0.1).unwrap();
        store.add_const("b", vec![4], 0.0).unwrap();
        assert!(matches!(finite_difference_check(&mut store, linear, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn nondeterministic_expression_is_rejected() {
        let mut store = ParamStore::new();
        store.add_const("w", vec![2, 4], 0.1).unwrap();
        store.add_const("b", vec![4], 0.0).unwrap();
        let mut calls = 0.0;
        let expr = |s: &ParamStore, g: &mut Graph| {
            calls += 1.0;
            let w = g.param(s, s.id("w").unwrap());
            let c = g.scalar(calls);
            let sw = g.sum(w);
            let out = g.mul(sw, c)?;
            Ok(out)
        };
        assert!(matches!(
            finite_difference_check(&mut store, expr, 1e-3),
            Err(Error::NonDeterministic { .. })
        ));
    }

    #[test]
    fn precision_is_restored() {
        let _p = PrecisionGuard::new(Precision::F32);
        let mut store = ParamStore::new();
        store.add_const("w", vec![2, 4], 0.1).unwrap();
        store.add_const("b", vec![4], 0.0).unwrap();
        finite_difference_check(&mut store, linear, 1e-3).unwrap();
        assert_eq!(store.precision(), Precision::F32);
        assert_eq!(store.by_name("w").unwrap().value.data()[0], 0.1f32 as f64);
    }
}
