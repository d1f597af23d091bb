//! Answer-token objectives: the plain masked LM loss and the Yes/No weighted
//! recognition loss.

use serde::{Deserialize, Serialize};

use crate::backbone::tokenizer::{TokenId, Tokenizer};
use crate::error::{PlvmError, Result};
use crate::scalar::Scalar;

/// How the per-token weights ω_i are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerMode {
    /// `Σ ω_i·CE_i / Σ ω_i`; reduces to the masked LM loss at `w = 1`.
    #[default]
    WeightedMean,
    /// `(Σ ω_i) · Σ ω_i·CE_i`, the formula read literally. Audit only.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on the Yes/No token(s); `w ≥ 1`.
    pub w: f64,
    #[serde(default)]
    pub normalizer: NormalizerMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w: 20.0,
            normalizer: NormalizerMode::WeightedMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w >= 1.0) {
            return Err(PlvmError::InvalidConfig(format!("loss weight w = {} must be ≥ 1", self.w)));
        }
        Ok(())
    }

    /// Multipliers applied to each token's cross-entropy.
    pub fn coefficients<S: Scalar>(&self, indicator: &[bool]) -> Vec<S> {
        let omega: Vec<f64> = indicator.iter().map(|&b| if b { self.w } else { 1.0 }).collect();
        let total: f64 = omega.iter().sum();
        let scale = match self.normalizer {
            NormalizerMode::WeightedMean => 1.0 / total,
            NormalizerMode::Literal => total,
        };
        omega.iter().map(|o| S::of(o * scale)).collect()
    }
}

/// `-ln p[target]`.
pub fn cross_entropy<S: Scalar>(distribution: &[S], target: TokenId) -> Result<S> {
    let p = *distribution.get(target).ok_or(PlvmError::TokenOutOfRange {
        id: target,
        vocab: distribution.len(),
    })?;
    Ok(-p.ln())
}

fn per_token_ce<S: Scalar>(distributions: &[Vec<S>], targets: &[TokenId]) -> Result<Vec<S>> {
    if distributions.len() != targets.len() {
        return Err(PlvmError::LengthMismatch(format!(
            "{} distributions for {} answer tokens",
            distributions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(PlvmError::LengthMismatch("empty answer".into()));
    }
    distributions.iter().zip(targets).map(|(d, &t)| cross_entropy(d, t)).collect()
}

/// `(1/N) Σ CE(p_i, x_i)`.
pub fn masked_lm_loss<S: Scalar>(distributions: &[Vec<S>], targets: &[TokenId]) -> Result<S> {
    let ce = per_token_ce(distributions, targets)?;
    Ok(ce.iter().copied().sum::<S>() / S::of_usize(ce.len()))
}

/// Weighted answer loss with `ω_i = w` on indicator positions and 1 elsewhere.
pub fn weighted_recognition_loss<S: Scalar>(
    distributions: &[Vec<S>],
    targets: &[TokenId],
    indicator: &[bool],
    config: &LossConfig,
) -> Result<S> {
    config.validate()?;
    let ce = per_token_ce(distributions, targets)?;
    if indicator.len() != ce.len() {
        return Err(PlvmError::LengthMismatch(format!(
            "indicator of {} for {} answer tokens",
            indicator.len(),
            ce.len()
        )));
    }
    let coef: Vec<S> = config.coefficients(indicator);
    Ok(ce.iter().zip(&coef).map(|(&c, &k)| c * k).sum())
}

/// Marks the leading token(s) that spell "Yes" or "No" (case-sensitive).
/// Returns `None` when the answer does not start with either word.
pub fn mark_yes_no(answer: &[TokenId], tokenizer: &Tokenizer) -> Option<Vec<bool>> {
    let mut spelled = String::new();
    for (n, &id) in answer.iter().enumerate() {
        spelled.push_str(tokenizer.piece(id)?);
        if spelled == "Yes" || spelled == "No" {
            let mut out = vec![false; answer.len()];
            out[..=n].iter_mut().for_each(|b| *b = true);
            return Some(out);
        }
        if !("Yes".starts_with(&spelled) || "No".starts_with(&spelled)) {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: CE straight from the definition, no shared code.
    fn oracle_ce(p: &[f64], t: usize) -> f64 {
        -(p[t].ln())
    }

    /// Oracle: weighted mean Σ w_i x_i / Σ w_i.
    fn oracle_weighted_mean(x: &[f64], w: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            num += w[i] * x[i];
            den += w[i];
        }
        num / den
    }

    /// Distributions whose CE on target 0 equals each requested value.
    fn dists_with_ce(ce: &[f64], vocab: usize) -> Vec<Vec<f64>> {
        ce.iter()
            .map(|&c| {
                let p0 = (-c).exp();
                let rest = (1.0 - p0) / (vocab - 1) as f64;
                let mut d = vec![rest; vocab];
                d[0] = p0;
                d
            })
            .collect()
    }

    #[test]
    fn hand_value_41_over_22() {
        let expected = oracle_weighted_mean(&[2.0, 0.5, 0.5], &[20.0, 1.0, 1.0]);
        assert!((expected - 41.0 / 22.0).abs() < 1e-15);
        let d = dists_with_ce(&[2.0, 0.5, 0.5], 5);
        let cfg = LossConfig {
            w: 20.0,
            ..Default::default()
        };
        let l = weighted_recognition_loss(&d, &[0, 0, 0], &[true, false, false], &cfg).unwrap();
        assert!((l - 41.0 / 22.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn masked_loss_basics() {
        let onehot = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(masked_lm_loss(&onehot, &[1, 0]).unwrap(), 0.0);
        let v = 7;
        let uniform = vec![vec![1.0 / v as f64; v]; 3];
        assert!((masked_lm_loss(&uniform, &[0, 3, 6]).unwrap() - (v as f64).ln()).abs() < 1e-12);
        let d = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let want = (oracle_ce(&d[0], 1) + oracle_ce(&d[1], 1)) / 2.0;
        assert!((masked_lm_loss(&d, &[1, 1]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let d = vec![vec![0.5, 0.5]];
        assert!(masked_lm_loss(&d, &[0, 1]).is_err());
        assert!(masked_lm_loss::<f64>(&[], &[]).is_err());
        let cfg = LossConfig::default();
        assert!(weighted_recognition_loss(&d, &[0], &[true, false], &cfg).is_err());
        let bad = LossConfig { w: 0.5, ..cfg };
        assert!(weighted_recognition_loss(&d, &[0], &[true], &bad).is_err());
    }

    #[test]
    fn literal_mode_does_not_reduce_to_the_mean() {
        let d = dists_with_ce(&[1.0, 1.0], 4);
        let cfg = LossConfig {
            w: 1.0,
            normalizer: NormalizerMode::Literal,
        };
        // (Σω)(Σω·CE) = 2 · 2
        let l = weighted_recognition_loss(&d, &[0, 0], &[false, false], &cfg).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn yes_no_indicator() {
        let tok = Tokenizer::from_corpus(["Yes, ⟨sks⟩ is in this photo.", "No, not.", "Her hair is black.", "Y es"]);
        let enc = |s: &str| -> Vec<TokenId> {
            tok.encode(s)
                .into_iter()
                .map(|p| match p {
                    crate::backbone::Piece::Token(id) => id,
                    crate::backbone::Piece::Concept(_) => tok.unk(),
                })
                .collect()
        };
        let yes = mark_yes_no(&enc("Yes, is in this photo."), &tok).unwrap();
        assert_eq!(yes[0], true);
        assert!(yes[1..].iter().all(|b| !b));
        let no = mark_yes_no(&enc("No, not."), &tok).unwrap();
        assert_eq!(no, vec![true, false, false, false]);
        assert!(mark_yes_no(&enc("Her hair is black."), &tok).is_none());
        // multi-piece realization: "Y" + "es"
        let split = mark_yes_no(&enc("Y es , not"), &tok).unwrap();
        assert_eq!(split, vec![true, true, false, false]);
    }
}
