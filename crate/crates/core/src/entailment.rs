//! Deterministic stand-in for an NLI model: the condition's three-valued truth
//! picks a vertex of the (entail, neutral, contradict) simplex, optionally
//! smeared by `epsilon` and corrupted by index-keyed entail/contradict swaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanation::{Attributes, Explanation, Truth, EXPLANATION_FEATURES};
use crate::taskgen::mix_seed;

/// Width of [`pair_features`].
pub const PAIR_FEATURES: usize = EXPLANATION_FEATURES + 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliScores {
    pub entail: f64,
    pub neutral: f64,
    pub contradict: f64,
}

impl NliScores {
    pub fn new(entail: f64, neutral: f64, contradict: f64) -> Self {
        NliScores {
            entail,
            neutral,
            contradict,
        }
    }

    pub fn swapped(self) -> Self {
        NliScores {
            entail: self.contradict,
            neutral: self.neutral,
            contradict: self.entail,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.entail, self.neutral, self.contradict]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// Mass moved off the indicated vertex, in [0, 1/3).
    pub epsilon: f64,
    /// Probability of swapping entailment and contradiction, in [0, 1).
    pub noise_rate: f64,
    pub noise_seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            epsilon: 0.0,
            noise_rate: 0.0,
            noise_seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0 / 3.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "scorer.epsilon must lie in [0, 1/3), got {}",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "scorer.noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Whether the pair identified by `key` has its entail/contradict swapped.
    /// Stable across calls.
    pub fn swaps(&self, key: PairKey) -> bool {
        if self.noise_rate <= 0.0 {
            return false;
        }
        let h = mix_seed(
            mix_seed(mix_seed(self.noise_seed, key.task), key.explanation as u64),
            key.example,
        );
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        u < self.noise_rate
    }
}

/// Identity of an (explanation, example) pair for noise keying.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairKey {
    pub task: u64,
    pub explanation: usize,
    pub example: u64,
}

/// Scores the explanation's condition (not its quantifier or label) against
/// an example.
pub fn nli_scores(
    exp: &Explanation,
    attributes: &Attributes,
    config: &ScorerConfig,
    key: PairKey,
) -> Result<NliScores> {
    let eps = config.epsilon;
    let (hi, lo) = (1.0 - eps, eps / 2.0);
    let base = match exp.condition.evaluate(attributes)? {
        Truth::True => NliScores::new(hi, lo, lo),
        Truth::False => NliScores::new(lo, lo, hi),
        Truth::Unknown => NliScores::new(lo, hi, lo),
    };
    Ok(if config.swaps(key) { base.swapped() } else { base })
}

/// Explanation features followed by the three NLI scores.
pub fn pair_features(exp: &Explanation, scores: &NliScores) -> [f64; PAIR_FEATURES] {
    let mut out = [0.0; PAIR_FEATURES];
    out[..EXPLANATION_FEATURES].copy_from_slice(&exp.features());
    out[EXPLANATION_FEATURES..].copy_from_slice(&scores.as_array());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explanation::{ConditionNode, Operator, Value};

    fn exp() -> Explanation {
        let c = ConditionNode::leaf("head", Operator::Equal, Value::Int(1)).unwrap();
        Explanation::new(c, None, "dax", false)
    }

    fn attrs(v: i64) -> Attributes {
        [("head".to_string(), Value::Int(v))].into_iter().collect()
    }

    fn key(i: u64) -> PairKey {
        PairKey {
            task: 1,
            explanation: 0,
            example: i,
        }
    }

    #[test]
    fn clean_vertices() {
        let cfg = ScorerConfig::clean();
        assert_eq!(nli_scores(&exp(), &attrs(1), &cfg, key(0)).unwrap(), NliScores::new(1.0, 0.0, 0.0));
        assert_eq!(nli_scores(&exp(), &attrs(2), &cfg, key(0)).unwrap(), NliScores::new(0.0, 0.0, 1.0));
        let smeared = ScorerConfig {
            epsilon: 0.1,
            ..cfg
        };
        let s = nli_scores(&exp(), &Attributes::new(), &smeared, key(0)).unwrap();
        assert!((s.entail - 0.05).abs() < 1e-15);
        assert!((s.neutral - 0.9).abs() < 1e-15);
        assert!((s.contradict - 0.05).abs() < 1e-15);
    }

    #[test]
    fn noise_is_stable_per_pair() {
        let cfg = ScorerConfig {
            epsilon: 0.0,
            noise_rate: 0.4,
            noise_seed: 17,
        };
        for i in 0..200 {
            let a = nli_scores(&exp(), &attrs(1), &cfg, key(i)).unwrap();
            let b = nli_scores(&exp(), &attrs(1), &cfg, key(i)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_ranges() {
        assert!(ScorerConfig { epsilon: 1.0 / 3.0, ..Default::default() }.validate().is_err());
        assert!(ScorerConfig { noise_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(ScorerConfig { epsilon: 0.3, noise_rate: 0.5, noise_seed: 1 }.validate().is_ok());
    }

    #[test]
    fn pair_feature_layout() {
        let e = exp();
        let cfg = ScorerConfig::clean();
        let s1 = nli_scores(&e, &attrs(1), &cfg, key(0)).unwrap();
        let s2 = nli_scores(&e, &attrs(3), &cfg, key(1)).unwrap();
        let (f1, f2) = (pair_features(&e, &s1), pair_features(&e, &s2));
        assert_eq!(f1.len(), PAIR_FEATURES);
        assert_eq!(f1[..EXPLANATION_FEATURES], f2[..EXPLANATION_FEATURES]);
        assert_ne!(f1[EXPLANATION_FEATURES..], f2[EXPLANATION_FEATURES..]);
        assert_eq!(f1, pair_features(&e, &s1));
    }
}
