use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::Token;
use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `softmax(logits / temperature)`.
pub fn probabilities(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    softmax(&scaled)
}

/// Indices of the `k` largest logits, descending; ties go to the lower index.
pub fn route_topk(gate_logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > gate_logits.len() {
        return Err(Error::TopKExceedsExperts {
            k,
            experts: gate_logits.len(),
        });
    }
    let mut idx: Vec<usize> = (0..gate_logits.len()).collect();
    // stable sort keeps lower indices first among equal logits
    idx.sort_by(|&a, &b| gate_logits[b].total_cmp(&gate_logits[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Argmax with lowest-index tie-break.
pub fn greedy_next(logits: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draw an index from a probability vector.
pub fn sample_from_probs<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<Token> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| Error::Domain(format!("cannot sample from distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// Sample a token from `softmax(logits / temperature)`.
pub fn sample_next<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<Token> {
    let probs = probabilities(logits, temperature)?;
    sample_from_probs(&probs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(route_topk(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(route_topk(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 2, 1]);
        assert_eq!(route_topk(&[5.0, 5.0, 1.0], 1).unwrap(), vec![0]);
        assert!(matches!(
            route_topk(&[1.0], 2),
            Err(Error::TopKExceedsExperts { k: 2, experts: 1 })
        ));
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_next(&[0.1, 0.9]), 1);
        assert_eq!(greedy_next(&[0.5, 0.5]), 0);
        for i in 0..16 {
            let mut v = vec![0.0; 16];
            v[i] = 1.0;
            assert_eq!(greedy_next(&v), i);
        }
    }

    #[test]
    fn sampling_one_hot_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            assert_eq!(sample_next(&[0.0, 1e6, 0.0], 1.0, &mut rng).unwrap(), 1);
        }
        let a = sample_next(&[0.3, 0.1, 0.2], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_next(&[0.3, 0.1, 0.2], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(sample_next(&[0.0, 1.0], 0.0, &mut rng).is_err());
        assert!(sample_next(&[0.0, 1.0], -1.0, &mut rng).is_err());
    }

    #[test]
    fn high_temperature_flattens_two_way_choice() {
        // Monte Carlo: 1e5 draws at T = 1e6 on [3, -1] should be within 0.01 of 50/50.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| sample_next(&[3.0, -1.0], 1e6, &mut rng).unwrap() == 1)
            .count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn topk_is_sorted_and_distinct(logits in prop::collection::vec(-5.0f64..5.0, 1..20), k in 1usize..20) {
            let k = k.min(logits.len());
            let picks = route_topk(&logits, k).unwrap();
            prop_assert_eq!(picks.len(), k);
            for w in picks.windows(2) {
                prop_assert!(logits[w[0]] > logits[w[1]] || (logits[w[0]] == logits[w[1]] && w[0] < w[1]));
            }
            let min_chosen = picks.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
            for i in (0..logits.len()).filter(|i| !picks.contains(i)) {
                prop_assert!(logits[i] <= min_chosen);
            }
        }
    }
}
