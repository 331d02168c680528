use rand::Rng;
use rand_distr::Gumbel;

use crate::error::{Error, Result};
use crate::numerics::{argmax, Graph, Var};

/// Standard Gumbel noise, one value per logit.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| rng.sample(dist)).collect()
}

/// Relaxed one-hot sample `softmax((logits + noise) / temperature)` and the
/// hard token of every row.
pub fn gumbel_sample(g: &mut Graph, logits: Var, temperature: f64, noise: &[f64]) -> Result<(Var, Vec<usize>)> {
    if !(temperature > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {temperature}")));
    }
    let z = g.gumbel_perturb(logits, noise)?;
    let z = g.scale(z, 1.0 / temperature);
    let relaxed = g.softmax(z);
    let v = g.value(relaxed);
    let hard = (0..v.rows()).map(|r| argmax(v.row_slice(r))).collect();
    Ok((relaxed, hard))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, ParamStore, Precision, PrecisionGuard, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_sum_to_one_and_low_temperature_is_one_hot() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 0.5, 0.4, 0.3]).unwrap());
        let (r, hard) = gumbel_sample(&mut g, l, 1.0, &gumbel_noise(6, &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        for row in 0..2 {
            let s: f64 = g.value(r).row_slice(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(hard.len(), 2);
        let (r, hard) = gumbel_sample(&mut g, l, 1e-3, &[0.0; 6]).unwrap();
        assert_eq!(hard, vec![1, 0]);
        assert!((g.value(r).get2(0, 1) - 1.0).abs() < 1e-6);
        assert!(gumbel_sample(&mut g, l, 0.0, &[0.0; 6]).is_err());
    }

    #[test]
    fn frozen_noise_gradient_matches_finite_differences() {
        let _p = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add_normal("w", vec![3, 5], 1.0, &mut rng).unwrap();
        let noise = gumbel_noise(15, &mut rng);
        let weights = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let err = finite_difference_check(
            &mut store,
            |s, g| {
                let w = g.param(s, s.id("w").unwrap());
                let (relaxed, _) = gumbel_sample(g, w, 0.7, &noise)?;
                let c = g.constant(weights.clone());
                let y = g.mul(relaxed, c)?;
                Ok(g.sum(y))
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
