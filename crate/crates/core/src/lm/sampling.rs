//! Temperature + nucleus (top-p) sampling over a logit row.

use rand::Rng;

use super::ops::argmax;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            seed: 0,
            max_new_tokens: 1000,
        }
    }
}

impl SamplingSpec {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            seed: 0,
            max_new_tokens,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            p.push(format!("sampling.temperature ({}) must be >= 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            p.push(format!("sampling.top_p ({}) must be in (0, 1]", self.top_p));
        }
        if self.max_new_tokens == 0 {
            p.push("sampling.max_new_tokens must be > 0".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Draws one token id from `logits`.
///
/// Probabilities are `softmax(logits / temperature)`; the nucleus is the
/// shortest prefix of ids sorted by descending probability (ties by id)
/// whose mass reaches `top_p`.
pub fn sample<F: Scalar>(logits: &[F], temperature: f64, top_p: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|&v| (v - max).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        mass += p.1;
        if mass >= top_p {
            keep = i + 1;
            break;
        }
    }
    let nucleus = &probs[..keep];
    let total: f64 = nucleus.iter().map(|p| p.1).sum();
    let mut dart = rng.random::<f64>() * total;
    for &(id, p) in nucleus {
        dart -= p;
        if dart < 0.0 {
            return id;
        }
    }
    nucleus[keep - 1].0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[0.1f32, 2.0, 2.0, -1.0], 0.0, 0.9, &mut rng), 1);
    }

    #[test]
    fn tiny_temperature_concentrates_on_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample(&[0.1f32, 0.3, 0.2999], 1e-6, 1.0, &mut rng), 1);
        }
    }

    #[test]
    fn nucleus_excludes_tail() {
        // probs ≈ [0.64, 0.24, 0.09, 0.03]
        let logits = [3.0f64, 2.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let id = sample(&logits, 1.0, 0.8, &mut rng);
            assert!(id <= 1);
        }
    }

    #[test]
    fn sampling_frequencies_follow_softmax() {
        let logits = [0.0f64, (2.0f64).ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30_000;
        let ones = (0..n).filter(|_| sample(&logits, 1.0, 1.0, &mut rng) == 1).count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.015, "{frac}");
    }

    #[test]
    fn spec_validation() {
        assert!(SamplingSpec::default().validate().is_ok());
        let bad = SamplingSpec {
            temperature: -1.0,
            top_p: 0.0,
            seed: 0,
            max_new_tokens: 0,
        };
        match bad.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
