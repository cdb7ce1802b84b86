//! Nucleus (top-p) sampling over categorical token distributions.

use rand::Rng;

/// The nucleus of a distribution: the smallest prefix of probability-sorted
/// tokens whose cumulative mass reaches `top_p`, renormalized. Ties in
/// probability break toward the smaller token id. Input must sum to 1 within
/// 1e-6.
pub fn nucleus_distribution(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let total: f64 = probs.iter().sum();
    assert!(
        (total - 1.0).abs() <= 1e-6,
        "nucleus sampling needs a normalized distribution, got mass {total}"
    );
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1], got {top_p}");

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });

    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &id in &order {
        kept.push((id, probs[id]));
        mass += probs[id];
        if mass >= top_p {
            break;
        }
    }
    for (_, p) in kept.iter_mut() {
        *p /= mass;
    }
    kept
}

/// Draws one token id from the nucleus.
pub fn sample_nucleus<R: Rng>(probs: &[f64], top_p: f64, rng: &mut R) -> usize {
    let kept = nucleus_distribution(probs, top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &kept {
        acc += p;
        if u < acc {
            return id;
        }
    }
    kept.last().expect("nucleus is never empty").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn tiny_top_p_recovers_argmax() {
        let probs = [0.1, 0.5, 0.15, 0.25];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_nucleus(&probs, 1e-12, &mut rng), 1);
        }
    }

    #[test]
    fn argmax_tie_breaks_to_smaller_id() {
        let probs = [0.25, 0.25, 0.25, 0.25];
        let kept = nucleus_distribution(&probs, 1e-12);
        assert_eq!(kept[0].0, 0);
    }

    #[test]
    fn prefix_mass_example() {
        let probs = [0.5, 0.3, 0.2];
        let kept = nucleus_distribution(&probs, 0.6);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert_abs_diff_eq!(kept[0].1, 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(kept[1].1, 0.375, epsilon = 1e-12);
    }

    #[test]
    fn full_top_p_matches_frequencies() {
        // Empirical frequencies over 1e5 draws stay within 3-sigma
        // multinomial bounds of the exact distribution.
        let probs = [0.05, 0.4, 0.25, 0.3];
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            counts[sample_nucleus(&probs, 1.0, &mut rng)] += 1;
        }
        for i in 0..4 {
            let expect = probs[i] * n as f64;
            let sigma = (n as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            let diff = (counts[i] as f64 - expect).abs();
            assert!(diff <= 3.0 * sigma, "token {i}: {diff} > 3 sigma {sigma}");
        }
    }

    #[test]
    #[should_panic(expected = "normalized")]
    fn unnormalized_input_is_rejected() {
        let probs = [0.5, 0.3];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        sample_nucleus(&probs, 1.0, &mut rng);
    }
}
