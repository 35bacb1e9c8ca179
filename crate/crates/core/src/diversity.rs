//! Prompt diversity `d = r_unique * m^p`, least-squares fits of scores
//! against `d`, and the decay-index grid search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{unique_rate, CorpusError, NGramBag};

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("no grid point yields ascending diversity values")]
    NoFeasibleDecay,
    #[error("linear fit is degenerate at every feasible grid point")]
    SearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub r_unique: f64,
    pub m: usize,
    pub p: f64,
    pub d: f64,
}

impl DiversityScore {
    /// Recomputes `d` from the other fields.
    pub fn recompute(&self) -> f64 {
        diversity_value(self.r_unique, self.m, self.p)
    }
}

fn diversity_value(r_unique: f64, m: usize, p: f64) -> f64 {
    r_unique * (m as f64).powf(p)
}

fn check_decay(p: f64) -> Result<(), DiversityError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DiversityError::InvalidArgument(format!(
            "decay index must lie in (0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Diversity of a prompt corpus whose merged gram bag is `bag` and which holds
/// `m` prompts (duplicates included).
pub fn diversity_score(bag: &NGramBag, m: usize, p: f64) -> Result<DiversityScore, DiversityError> {
    CorpusSummary::from_bag(bag, m)?.score(p)
}

/// The two quantities the diversity metric needs from a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub r_unique: f64,
    pub m: usize,
}

impl CorpusSummary {
    pub fn new(r_unique: f64, m: usize) -> Result<Self, DiversityError> {
        if !(r_unique > 0.0 && r_unique <= 1.0) {
            return Err(DiversityError::InvalidArgument(format!(
                "unique rate must lie in (0, 1], got {r_unique}"
            )));
        }
        if m < 1 {
            return Err(DiversityError::InvalidArgument(
                "prompt count must be at least 1".into(),
            ));
        }
        Ok(Self { r_unique, m })
    }

    pub fn from_bag(bag: &NGramBag, m: usize) -> Result<Self, DiversityError> {
        if m < 1 {
            return Err(DiversityError::InvalidArgument(
                "prompt count must be at least 1".into(),
            ));
        }
        Ok(Self {
            r_unique: unique_rate(bag)?,
            m,
        })
    }

    pub fn score(&self, p: f64) -> Result<DiversityScore, DiversityError> {
        check_decay(p)?;
        Ok(DiversityScore {
            r_unique: self.r_unique,
            m: self.m,
            p,
            d: diversity_value(self.r_unique, self.m, p),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: f64,
    pub beta: f64,
    pub mse: f64,
    pub residuals: Vec<f64>,
}

impl FitResult {
    pub fn predict(&self, d: f64) -> f64 {
        self.alpha * d + self.beta
    }
}

/// Ordinary least squares `r ≈ alpha * d + beta` over `(d, r)` points.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<FitResult, DiversityError> {
    if points.len() < 2 {
        return Err(DiversityError::DegenerateFit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(d, r)| !d.is_finite() || !r.is_finite()) {
        return Err(DiversityError::InvalidArgument(
            "fit points must be finite".into(),
        ));
    }
    let first = points[0].0;
    if points.iter().all(|&(d, _)| d == first) {
        return Err(DiversityError::DegenerateFit(
            "all diversity values are identical".into(),
        ));
    }

    let n = points.len() as f64;
    let mean_d = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_r = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(d, r) in points {
        let dx = d - mean_d;
        sxx += dx * dx;
        sxy += dx * (r - mean_r);
    }
    let alpha = sxy / sxx;
    let beta = mean_r - alpha * mean_d;
    let residuals: Vec<f64> = points.iter().map(|&(d, r)| r - (alpha * d + beta)).collect();
    let mse = residuals.iter().map(|e| e * e).sum::<f64>() / n;
    Ok(FitResult {
        alpha,
        beta,
        mse,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    /// Grid step `l`; candidates are `l, 2l, ...` up to `p_max`.
    pub step: f64,
    pub require_ascending: bool,
    /// Require `d_{i+1} > d_i` instead of `d_{i+1} >= d_i`.
    pub strict_ascending: bool,
    pub p_max: f64,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            require_ascending: true,
            strict_ascending: false,
            p_max: 1.0,
        }
    }
}

impl GridSearchConfig {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DiversityError> {
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return Err(DiversityError::InvalidArgument(format!(
                "p_max must lie in (0, 1], got {}",
                self.p_max
            )));
        }
        if !(self.step > 0.0 && self.step <= self.p_max) {
            return Err(DiversityError::InvalidArgument(format!(
                "step must lie in (0, p_max], got {}",
                self.step
            )));
        }
        Ok(())
    }

    /// Candidate decay indices in ascending order.
    pub fn grid(&self) -> Vec<f64> {
        // Small slack so that e.g. 10 * 0.1 still counts as <= 1.0.
        let steps = (self.p_max / self.step + 1e-9).floor() as usize;
        (1..=steps)
            .map(|k| {
                let p = k as f64 * self.step;
                let p = (p * 1e12).round() / 1e12;
                p.min(self.p_max)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub p: f64,
    /// `None` when the fit is degenerate at this point.
    pub mse: Option<f64>,
    pub ascending: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub alpha: f64,
    pub beta: f64,
    pub mse: f64,
    pub p: f64,
    pub grid: Vec<GridPoint>,
}

fn is_ascending(values: &[f64], strict: bool) -> bool {
    values
        .windows(2)
        .all(|w| if strict { w[1] > w[0] } else { w[1] >= w[0] })
}

/// Picks the decay index whose diversity values best explain `scores` linearly.
///
/// `corpora` must be ordered by strictly ascending prompt count and paired
/// one-to-one with `scores`. Among grid points whose diversity sequence is
/// ascending, the smallest MSE wins; ties go to the smaller `p`.
pub fn search_decay_index(
    corpora: &[CorpusSummary],
    scores: &[f64],
    config: &GridSearchConfig,
) -> Result<GridSearchResult, DiversityError> {
    config.validate()?;
    if corpora.len() != scores.len() {
        return Err(DiversityError::InvalidArgument(format!(
            "{} corpora but {} scores",
            corpora.len(),
            scores.len()
        )));
    }
    if corpora.len() < 3 {
        return Err(DiversityError::InvalidArgument(format!(
            "need at least 3 corpora, got {}",
            corpora.len()
        )));
    }
    if corpora.windows(2).any(|w| w[1].m <= w[0].m) {
        return Err(DiversityError::InvalidArgument(
            "corpora must have strictly ascending prompt counts".into(),
        ));
    }

    let evaluated: Vec<(GridPoint, Option<FitResult>)> = config
        .grid()
        .into_par_iter()
        .map(|p| {
            let ds: Vec<f64> = corpora
                .iter()
                .map(|c| diversity_value(c.r_unique, c.m, p))
                .collect();
            let ascending = is_ascending(&ds, config.strict_ascending);
            let points: Vec<(f64, f64)> = ds.into_iter().zip(scores.iter().copied()).collect();
            let fit = linear_fit(&points).ok();
            let point = GridPoint {
                p,
                mse: fit.as_ref().map(|f| f.mse),
                ascending,
            };
            (point, fit)
        })
        .collect();

    let mut any_feasible = false;
    let mut best: Option<(f64, &FitResult)> = None;
    for (point, fit) in &evaluated {
        if config.require_ascending && !point.ascending {
            continue;
        }
        any_feasible = true;
        if let Some(fit) = fit {
            if best.is_none_or(|(_, b)| fit.mse < b.mse) {
                best = Some((point.p, fit));
            }
        }
    }
    let (p, fit) = match best {
        Some(b) => b,
        None if !any_feasible => return Err(DiversityError::NoFeasibleDecay),
        None => return Err(DiversityError::SearchFailed),
    };
    Ok(GridSearchResult {
        alpha: fit.alpha,
        beta: fit.beta,
        mse: fit.mse,
        p,
        grid: evaluated.into_iter().map(|(g, _)| g).collect(),
    })
}
