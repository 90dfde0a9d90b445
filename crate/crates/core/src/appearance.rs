//! Naive Bayes appearance layer over diagonal Gaussians.
//!
//! The tracking score of a feature vector is the log-likelihood ratio
//! `sum_i log N(x_i; mu_pos_i, var_pos_i) - log N(x_i; mu_neg_i, var_neg_i)` under equal
//! class priors.

use thiserror::Error;

use crate::feature::FeatureVector;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum AppearanceError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("need at least 2 samples to fit a Gaussian, got {0}")]
    BatchTooSmall(usize),
    #[error("gradient batch is empty")]
    EmptyBatch,
    #[error("invalid update config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

/// Cross term of the variance blend in [`ema_update`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceCrossTerm {
    /// `gamma (1 - gamma) (sigma - sigma*)^2`, difference of standard deviations.
    #[default]
    SigmaDiff,
    /// `gamma (1 - gamma) (mu - mu*)^2`, the moment-matching form.
    MuDiff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    /// Weight kept on the old moments.
    pub gamma: f64,
    pub variance_floor: f64,
    pub cross_term: VarianceCrossTerm,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            variance_floor: 1e-4,
            cross_term: VarianceCrossTerm::SigmaDiff,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<(), AppearanceError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AppearanceError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(AppearanceError::Config(format!(
                "variance floor {} must be positive",
                self.variance_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<T> {
    pub mu: Vec<T>,
    /// Per-dimension variance, never below the configured floor.
    pub var: Vec<T>,
}

impl<T: Scalar> DiagonalGaussian<T> {
    pub fn new(mu: Vec<T>, var: Vec<T>) -> Result<Self, AppearanceError> {
        if mu.len() != var.len() {
            return Err(AppearanceError::Dimension {
                expected: mu.len(),
                found: var.len(),
            });
        }
        Ok(Self { mu, var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Maximum likelihood fit: sample mean and population (1/M) variance.
    pub fn fit(batch: &[FeatureVector<T>], variance_floor: f64) -> Result<Self, AppearanceError> {
        if batch.len() < 2 {
            return Err(AppearanceError::BatchTooSmall(batch.len()));
        }
        let dim = batch[0].len();
        if let Some(bad) = batch.iter().find(|f| f.len() != dim) {
            return Err(AppearanceError::Dimension {
                expected: dim,
                found: bad.len(),
            });
        }
        let n = T::lit(batch.len() as f64);
        let floor = T::lit(variance_floor);
        let mut mu = vec![T::zero(); dim];
        for f in batch {
            for (m, &v) in mu.iter_mut().zip(f.iter()) {
                *m = *m + v;
            }
        }
        mu.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); dim];
        for f in batch {
            for ((s, &v), &m) in var.iter_mut().zip(f.iter()).zip(&mu) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / n).max(floor));
        Ok(Self { mu, var })
    }

    /// Per-dimension log density, without exponentiating.
    #[inline]
    fn log_pdf_term(&self, i: usize, x: T) -> T {
        let half = T::lit(0.5);
        let ln_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        let d = x - self.mu[i];
        -half * (ln_2pi + self.var[i].ln()) - d * d / (self.var[i] + self.var[i])
    }

    pub fn log_pdf(&self, x: &[T]) -> Result<T, AppearanceError> {
        self.check_dim(x.len())?;
        Ok((0..x.len()).map(|i| self.log_pdf_term(i, x[i])).sum())
    }

    fn check_dim(&self, found: usize) -> Result<(), AppearanceError> {
        if found != self.dim() {
            return Err(AppearanceError::Dimension {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

/// Blend `old` towards freshly estimated moments; `gamma` is the weight kept on `old`.
pub fn ema_update<T: Scalar>(
    old: &DiagonalGaussian<T>,
    fresh: &DiagonalGaussian<T>,
    cfg: &UpdateConfig,
) -> Result<DiagonalGaussian<T>, AppearanceError> {
    cfg.validate()?;
    old.check_dim(fresh.dim())?;
    let g = T::lit(cfg.gamma);
    let rest = T::one() - g;
    let floor = T::lit(cfg.variance_floor);
    let mut mu = Vec::with_capacity(old.dim());
    let mut var = Vec::with_capacity(old.dim());
    for i in 0..old.dim() {
        mu.push(g * old.mu[i] + rest * fresh.mu[i]);
        let diff = match cfg.cross_term {
            VarianceCrossTerm::SigmaDiff => old.var[i].sqrt() - fresh.var[i].sqrt(),
            VarianceCrossTerm::MuDiff => old.mu[i] - fresh.mu[i],
        };
        let v = g * old.var[i] + rest * fresh.var[i] + g * rest * diff * diff;
        var.push(v.max(floor));
    }
    Ok(DiagonalGaussian { mu, var })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel<T> {
    pub pos: DiagonalGaussian<T>,
    pub neg: DiagonalGaussian<T>,
}

impl<T: Scalar> AppearanceModel<T> {
    pub fn new(pos: DiagonalGaussian<T>, neg: DiagonalGaussian<T>) -> Result<Self, AppearanceError> {
        pos.check_dim(neg.dim())?;
        Ok(Self { pos, neg })
    }

    pub fn fit(pos: &[FeatureVector<T>], neg: &[FeatureVector<T>], variance_floor: f64) -> Result<Self, AppearanceError> {
        Self::new(
            DiagonalGaussian::fit(pos, variance_floor)?,
            DiagonalGaussian::fit(neg, variance_floor)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.pos.dim()
    }

    pub fn swapped(&self) -> Self {
        Self {
            pos: self.neg.clone(),
            neg: self.pos.clone(),
        }
    }

    /// Log-likelihood ratio of positive over negative.
    pub fn score(&self, x: &[T]) -> Result<T, AppearanceError> {
        self.pos.check_dim(x.len())?;
        Ok((0..x.len())
            .map(|i| self.pos.log_pdf_term(i, x[i]) - self.neg.log_pdf_term(i, x[i]))
            .sum())
    }

    /// dS/dx for positives, -dS/dx for negatives.
    pub fn score_gradient(&self, x: &[T], label: Label) -> Result<Vec<T>, AppearanceError> {
        self.pos.check_dim(x.len())?;
        let sign = match label {
            Label::Positive => T::one(),
            Label::Negative => -T::one(),
        };
        Ok((0..x.len())
            .map(|i| {
                let g = -(x[i] - self.pos.mu[i]) / self.pos.var[i] + (x[i] - self.neg.mu[i]) / self.neg.var[i];
                sign * g
            })
            .collect())
    }

    /// Elementwise sum of per-sample score gradients over a labeled batch.
    pub fn batch_gradient<'a>(
        &self,
        batch: impl IntoIterator<Item = (&'a FeatureVector<T>, Label)>,
    ) -> Result<Vec<T>, AppearanceError> {
        let mut acc: Option<Vec<T>> = None;
        for (x, label) in batch {
            let g = self.score_gradient(x, label)?;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a = *a + g),
            }
        }
        acc.ok_or(AppearanceError::EmptyBatch)
    }

    pub fn ema_update(&self, fresh: &AppearanceModel<T>, cfg: &UpdateConfig) -> Result<Self, AppearanceError> {
        Ok(Self {
            pos: ema_update(&self.pos, &fresh.pos, cfg)?,
            neg: ema_update(&self.neg, &fresh.neg, cfg)?,
        })
    }
}
