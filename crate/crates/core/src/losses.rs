//! SFT and PRO loss kernels over caller-supplied log-probabilities.
//!
//! Candidate scores `log p(x, y^k)` are consumed as scalars; whether they are
//! raw token sums or length-normalized is up to the caller. The raw sum keeps
//! the same convention as [`sft_loss`]. All kernels are pure; batch means are
//! left to the caller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to reward gaps before inverting them into temperatures.
pub const REWARD_GAP_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token log-probability {value} at position {index} is positive")]
    PositiveLogProb { index: usize, value: f64 },
    #[error("rewards are not non-increasing at position {index}: {prev} < {next}")]
    Ordering { index: usize, prev: f64, next: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLogProbs {
    /// Entry `k` scores the `k`-th ranked candidate; index 0 is the preferred one.
    pub candidate_logprobs: Vec<f64>,
    /// Per-token log-probabilities of the preferred candidate.
    pub top_token_logprobs: Vec<f64>,
}

impl RankingLogProbs {
    pub fn new(
        candidate_logprobs: Vec<f64>,
        top_token_logprobs: Vec<f64>,
    ) -> Result<Self, LossError> {
        if candidate_logprobs
            .iter()
            .chain(&top_token_logprobs)
            .any(|v| !v.is_finite())
        {
            return Err(LossError::InvalidArgument(
                "log-probabilities must be finite".into(),
            ));
        }
        Ok(Self {
            candidate_logprobs,
            top_token_logprobs,
        })
    }

    pub fn ranking_len(&self) -> usize {
        self.candidate_logprobs.len()
    }
}

/// Per-contrast temperatures derived from reward gaps.
///
/// Row `k` (0-based) covers candidates `k..n`; its first entry is the diagonal
/// temperature, the minimum over the rest of the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureMatrix {
    rows: Vec<Vec<f64>>,
}

impl TemperatureMatrix {
    /// Ranking length `n` the matrix was built for.
    pub fn ranking_len(&self) -> usize {
        self.rows.len() + 1
    }

    /// Temperature for contrast `k` and candidate `i`, with `k <= i < n`,
    /// `k < n - 1`, both 0-based.
    pub fn get(&self, k: usize, i: usize) -> f64 {
        assert!(i >= k, "temperature index ({k}, {i}) below the diagonal");
        self.rows[k][i - k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Matrix with every temperature set to `value`; mostly for tests.
    pub fn uniform(n: usize, value: f64) -> Self {
        Self {
            rows: (0..n.saturating_sub(1)).map(|k| vec![value; n - k]).collect(),
        }
    }
}

/// `-sum_i log p(y^1_i | x, y^1_<i)`, without length normalization.
pub fn sft_loss(top_token_logprobs: &[f64]) -> Result<f64, LossError> {
    if top_token_logprobs.is_empty() {
        return Err(LossError::InvalidArgument(
            "token log-probabilities must not be empty".into(),
        ));
    }
    let mut loss = 0.0;
    for (index, &value) in top_token_logprobs.iter().enumerate() {
        if !value.is_finite() {
            return Err(LossError::InvalidArgument(format!(
                "token log-probability at position {index} is not finite"
            )));
        }
        if value > 0.0 {
            return Err(LossError::PositiveLogProb { index, value });
        }
        loss -= value;
    }
    Ok(loss)
}

pub fn pro_temperatures(rewards: &[f64]) -> Result<TemperatureMatrix, LossError> {
    if rewards.len() < 2 {
        return Err(LossError::InvalidArgument(format!(
            "need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(LossError::InvalidArgument("rewards must be finite".into()));
    }
    if let Some(index) = rewards.windows(2).position(|w| w[1] > w[0]) {
        return Err(LossError::Ordering {
            index: index + 1,
            prev: rewards[index],
            next: rewards[index + 1],
        });
    }
    let n = rewards.len();
    let rows = (0..n - 1)
        .map(|k| {
            let off: Vec<f64> = rewards[k + 1..]
                .iter()
                .map(|&r| 1.0 / (rewards[k] - r).max(REWARD_GAP_EPSILON))
                .collect();
            let diag = off.iter().copied().fold(f64::INFINITY, f64::min);
            std::iter::once(diag).chain(off).collect()
        })
        .collect();
    Ok(TemperatureMatrix { rows })
}

fn check_dims(logprobs: &RankingLogProbs, temps: &TemperatureMatrix) -> Result<usize, LossError> {
    let n = logprobs.ranking_len();
    if n < 2 {
        return Err(LossError::InvalidArgument(format!(
            "need at least 2 candidates, got {n}"
        )));
    }
    if temps.ranking_len() != n || temps.rows.iter().enumerate().any(|(k, r)| r.len() != n - k) {
        return Err(LossError::InvalidArgument(format!(
            "temperature matrix built for {} candidates, got {n}",
            temps.ranking_len()
        )));
    }
    if logprobs.candidate_logprobs.iter().any(|v| !v.is_finite()) {
        return Err(LossError::InvalidArgument(
            "candidate log-probabilities must be finite".into(),
        ));
    }
    Ok(n)
}

/// Scaled logits `l_i / T[k][i]` for contrast `k`, with their max.
fn contrast_logits(l: &[f64], temps: &TemperatureMatrix, k: usize) -> (Vec<f64>, f64) {
    let z: Vec<f64> = (k..l.len()).map(|i| l[i] / temps.get(k, i)).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (z, max)
}

/// `-log(exp(z_0) / sum_j exp(z_j))`, stabilized by the max logit.
fn contrast_term(z: &[f64], max: f64) -> f64 {
    // Take the max out once and use ln_1p for the remainder so the term stays
    // accurate when the top logit dominates.
    let arg = z.iter().position(|&v| v == max).unwrap_or(0);
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - z[0]) + rest.ln_1p()
}

/// Sum over contrasts `k = 1..n-1` of the one-to-many softmax loss.
pub fn pro_ranking_loss(
    logprobs: &RankingLogProbs,
    temps: &TemperatureMatrix,
) -> Result<f64, LossError> {
    let n = check_dims(logprobs, temps)?;
    let l = &logprobs.candidate_logprobs;
    Ok((0..n - 1)
        .map(|k| {
            let (z, max) = contrast_logits(l, temps, k);
            contrast_term(&z, max)
        })
        .sum())
}

/// `beta * sft + ranking`.
pub fn pro_loss(
    logprobs: &RankingLogProbs,
    temps: &TemperatureMatrix,
    beta: f64,
) -> Result<f64, LossError> {
    check_beta(beta)?;
    let ranking = pro_ranking_loss(logprobs, temps)?;
    let sft = sft_loss(&logprobs.top_token_logprobs)?;
    Ok(beta * sft + ranking)
}

fn check_beta(beta: f64) -> Result<(), LossError> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(LossError::InvalidArgument(format!(
            "beta must be finite and non-negative, got {beta}"
        )));
    }
    Ok(())
}

/// Gradients with respect to every input log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGradient {
    pub candidate_logprobs: Vec<f64>,
    pub top_token_logprobs: Vec<f64>,
}

/// Every token contributes `-1`.
pub fn sft_loss_grad(top_token_logprobs: &[f64]) -> Result<Vec<f64>, LossError> {
    sft_loss(top_token_logprobs)?;
    Ok(vec![-1.0; top_token_logprobs.len()])
}

/// `d/dl_i` of the ranking loss: `sum_k (softmax_k(i) - [i == k]) / T[k][i]`.
pub fn pro_ranking_loss_grad(
    logprobs: &RankingLogProbs,
    temps: &TemperatureMatrix,
) -> Result<Vec<f64>, LossError> {
    let n = check_dims(logprobs, temps)?;
    let l = &logprobs.candidate_logprobs;
    let mut grad = vec![0.0; n];
    for k in 0..n - 1 {
        let (z, max) = contrast_logits(l, temps, k);
        let weights: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            let i = k + j;
            let indicator = if j == 0 { 1.0 } else { 0.0 };
            grad[i] += (w / total - indicator) / temps.get(k, i);
        }
    }
    Ok(grad)
}

pub fn pro_loss_grad(
    logprobs: &RankingLogProbs,
    temps: &TemperatureMatrix,
    beta: f64,
) -> Result<LossGradient, LossError> {
    check_beta(beta)?;
    let candidate_logprobs = pro_ranking_loss_grad(logprobs, temps)?;
    let top_token_logprobs = sft_loss_grad(&logprobs.top_token_logprobs)?
        .into_iter()
        .map(|g| beta * g)
        .collect();
    Ok(LossGradient {
        candidate_logprobs,
        top_token_logprobs,
    })
}

/// Central finite differences of [`pro_loss`] with step `h`.
///
/// Token perturbations that would push an entry above zero are taken one-sided
/// (backward), since positive token log-probabilities are rejected.
pub fn pro_loss_finite_diff(
    logprobs: &RankingLogProbs,
    temps: &TemperatureMatrix,
    beta: f64,
    h: f64,
) -> Result<LossGradient, LossError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(LossError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |lp: &RankingLogProbs| pro_loss(lp, temps, beta);
    let base = eval(logprobs)?;

    let mut candidate = Vec::with_capacity(logprobs.ranking_len());
    for i in 0..logprobs.ranking_len() {
        let mut plus = logprobs.clone();
        plus.candidate_logprobs[i] += h;
        let mut minus = logprobs.clone();
        minus.candidate_logprobs[i] -= h;
        candidate.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }

    let mut tokens = Vec::with_capacity(logprobs.top_token_logprobs.len());
    for i in 0..logprobs.top_token_logprobs.len() {
        let mut minus = logprobs.clone();
        minus.top_token_logprobs[i] -= h;
        if logprobs.top_token_logprobs[i] + h <= 0.0 {
            let mut plus = logprobs.clone();
            plus.top_token_logprobs[i] += h;
            tokens.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
        } else {
            tokens.push((base - eval(&minus)?) / h);
        }
    }
    Ok(LossGradient {
        candidate_logprobs: candidate,
        top_token_logprobs: tokens,
    })
}

/// Gradient magnitude below which [`relative_error`] compares on an absolute
/// scale. Central differences at `h = 1e-5` carry rounding noise around
/// `1e-10`, which swamps a pure relative comparison for near-zero gradients.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(c: &[f64], t: &[f64]) -> RankingLogProbs {
        RankingLogProbs::new(c.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn sft_examples() {
        assert_eq!(sft_loss(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(sft_loss(&[0.0]).unwrap().is_sign_positive());
        assert_eq!(sft_loss(&[-1.0, -2.0]).unwrap(), 3.0);
        assert!(matches!(sft_loss(&[]), Err(LossError::InvalidArgument(_))));
        assert_eq!(
            sft_loss(&[-1.0, 0.5]),
            Err(LossError::PositiveLogProb {
                index: 1,
                value: 0.5
            })
        );
    }

    #[test]
    fn temperature_examples() {
        let t = pro_temperatures(&[3.0, 1.0]).unwrap();
        assert_eq!(t.get(0, 1), 0.5);
        assert_eq!(t.get(0, 0), 0.5);

        let t = pro_temperatures(&[5.0, 3.0, 2.0]).unwrap();
        assert_eq!(t.get(0, 1), 0.5);
        assert_eq!(t.get(0, 2), 1.0 / 3.0);
        assert_eq!(t.get(0, 0), 1.0 / 3.0);
        assert_eq!(t.get(1, 2), 1.0);
        assert_eq!(t.get(1, 1), 1.0);

        let t = pro_temperatures(&[2.0, 2.0]).unwrap();
        assert_eq!(t.get(0, 1), 1.0 / REWARD_GAP_EPSILON);
        assert!((t.get(0, 1) - 1e6).abs() < 1e-6);
    }

    #[test]
    fn temperature_errors() {
        assert!(matches!(
            pro_temperatures(&[1.0, 2.0]),
            Err(LossError::Ordering { index: 1, .. })
        ));
        assert!(pro_temperatures(&[1.0]).is_err());
        assert!(pro_temperatures(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ranking_loss_examples() {
        let loss = pro_ranking_loss(&lp(&[-1.0, -1.0], &[0.0]), &TemperatureMatrix::uniform(2, 1.0))
            .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let loss = pro_ranking_loss(&lp(&[0.0, -50.0], &[0.0]), &TemperatureMatrix::uniform(2, 1.0))
            .unwrap();
        assert!(loss < 1e-20 && loss >= 0.0);
    }

    #[test]
    fn ranking_loss_matches_naive_evaluation() {
        let temps = pro_temperatures(&[5.0, 3.0, 2.0]).unwrap();
        let l = [-1.0, -2.0, -3.0];
        // Direct evaluation without max subtraction.
        // k = 1: T11 = 1/3, T12 = 1/2, T13 = 1/3; k = 2: T22 = T23 = 1.
        let k1 = -((-1.0f64 * 3.0).exp()
            / ((-1.0f64 * 3.0).exp() + (-2.0f64 * 2.0).exp() + (-3.0f64 * 3.0).exp()))
        .ln();
        let k2 = -((-2.0f64).exp() / ((-2.0f64).exp() + (-3.0f64).exp())).ln();
        let loss = pro_ranking_loss(&lp(&l, &[-0.1]), &temps).unwrap();
        assert!((loss - (k1 + k2)).abs() < 1e-12, "{loss} vs {}", k1 + k2);
    }

    #[test]
    fn pro_loss_combines_terms() {
        let temps = pro_temperatures(&[5.0, 3.0, 2.0]).unwrap();
        let x = lp(&[-1.0, -2.0, -3.0], &[-0.5, -0.25]);
        let ranking = pro_ranking_loss(&x, &temps).unwrap();
        assert_eq!(pro_loss(&x, &temps, 0.0).unwrap(), ranking);
        assert_eq!(pro_loss(&x, &temps, 2.0).unwrap(), 2.0 * 0.75 + ranking);
        let zero_tokens = lp(&[-1.0, -2.0, -3.0], &[0.0, 0.0]);
        assert_eq!(pro_loss(&zero_tokens, &temps, 1.0).unwrap(), ranking);
        assert!(pro_loss(&x, &temps, -1.0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let temps = pro_temperatures(&[5.0, 3.0, 2.0]).unwrap();
        assert!(matches!(
            pro_ranking_loss(&lp(&[-1.0, -2.0], &[0.0]), &temps),
            Err(LossError::InvalidArgument(_))
        ));
    }

    #[test]
    fn stable_for_large_magnitudes() {
        let temps = TemperatureMatrix::uniform(3, 1.0);
        let loss = pro_ranking_loss(&lp(&[-1e4, 1e4, -5e3], &[0.0]), &temps).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 2e4).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let temps = pro_temperatures(&[2.0, 1.5, 0.2, -1.0]).unwrap();
        let x = lp(&[-3.0, -1.0, -4.0, -2.5], &[-0.3, -1.2, -0.01]);
        let g = pro_loss_grad(&x, &temps, 0.7).unwrap();
        let fd = pro_loss_finite_diff(&x, &temps, 0.7, 1e-5).unwrap();
        for (a, b) in g
            .candidate_logprobs
            .iter()
            .chain(&g.top_token_logprobs)
            .zip(fd.candidate_logprobs.iter().chain(&fd.top_token_logprobs))
        {
            assert!(relative_error(*a, *b, GRADIENT_CHECK_FLOOR) < 1e-4, "{a} vs {b}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ranking_loss_nonnegative_and_monotone_in_top(
                l in prop::collection::vec(-100.0f64..10.0, 2..6),
                gaps in prop::collection::vec(0.0f64..3.0, 5),
                bump in 0.0f64..20.0,
            ) {
                let mut rewards = vec![0.0];
                for g in &gaps[..l.len() - 1] {
                    rewards.push(rewards.last().unwrap() - g);
                }
                let temps = pro_temperatures(&rewards).unwrap();
                let base = lp(&l, &[0.0]);
                let loss = pro_ranking_loss(&base, &temps).unwrap();
                prop_assert!(loss >= 0.0);
                let mut up = base.clone();
                up.candidate_logprobs[0] += bump;
                prop_assert!(pro_ranking_loss(&up, &temps).unwrap() <= loss + 1e-12);
            }

            #[test]
            fn n2_unit_temperature_is_logistic(a in -30.0f64..30.0, b in -30.0f64..30.0) {
                let loss = pro_ranking_loss(&lp(&[a, b], &[0.0]), &TemperatureMatrix::uniform(2, 1.0)).unwrap();
                let expected = (1.0 + (-(a - b)).exp()).ln();
                prop_assert!((loss - expected).abs() < 1e-10);
            }
        }
    }
}
