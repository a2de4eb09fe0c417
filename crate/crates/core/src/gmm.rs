//! Gaussian-mixture targets with closed-form noised marginals, scores and the
//! exact noise predictor.
//!
//! Under `x_t = α_t·x + σ_t·ε` a mixture `Σ w_i N(μ_i, Σ_i)` stays a mixture,
//! `Σ w_i N(α_t μ_i, α_t² Σ_i + σ_t² I)`, so the optimal noise predictor
//! `ε̂(x_t) = −σ_t ∇ log p_t(x_t)` is available without any learned model.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Serialize, Serializer};

use crate::error::{Result, SsdError};
use crate::moments::normal_vector;
use crate::schedule::{DiffusionSchedule, Timestep};

/// Maximum deviation of the weight sum from 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let invalid = |reason: String| SsdError::InvalidComponent { index: 0, reason };
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(invalid(format!("weight must be > 0 (got {weight})")));
        }
        if d == 0 {
            return Err(invalid("mean must have at least one coordinate".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(invalid(format!(
                "covariance is {}x{}, expected {d}x{d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite parameter".into()));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[(i, j)], covariance[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(invalid("covariance is not symmetric".into()));
                }
            }
        }
        let cholesky =
            Cholesky::new(covariance.clone()).ok_or_else(|| invalid("covariance is not positive definite".into()))?;
        let log_det = 2.0 * cholesky.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            weight,
            mean,
            covariance,
            cholesky,
            log_det,
        })
    }

    pub fn isotropic(weight: f64, mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(weight, mean, DMatrix::identity(d, d) * variance)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn with_weight(&self, weight: f64) -> Self {
        Self { weight, ..self.clone() }
    }

    /// `log N(x; μ, Σ)` without the mixture weight.
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let mut z = diff;
        // L z = (x − μ)
        self.cholesky.l_dirty().solve_lower_triangular_mut(&mut z);
        let quad = z.norm_squared();
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det + quad)
    }

    /// `Σ⁻¹(μ − x)`, the score of this component alone.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        self.cholesky.solve(&(&self.mean - x))
    }

    fn precision(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    conditional: Vec<bool>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>, conditional: Vec<bool>) -> Result<Self> {
        let first = components.first().ok_or(SsdError::EmptyMixture)?;
        let dim = first.dim();
        if conditional.len() != components.len() {
            return Err(SsdError::InvalidConfig(format!(
                "conditional mask has {} entries for {} components",
                conditional.len(),
                components.len()
            )));
        }
        for (index, c) in components.iter().enumerate() {
            if c.dim() != dim {
                return Err(SsdError::InvalidComponent {
                    index,
                    reason: format!("dimension {} differs from {dim}", c.dim()),
                });
            }
        }
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(SsdError::WeightsNotNormalized { sum });
        }
        if !conditional.iter().any(|&c| c) {
            return Err(SsdError::EmptyConditionalSupport);
        }
        Ok(Self {
            components,
            conditional,
            dim,
        })
    }

    /// Mixture whose every component is conditional.
    pub fn fully_conditional(components: Vec<GaussianComponent>) -> Result<Self> {
        let n = components.len();
        Self::new(components, vec![true; n])
    }

    /// `0.2 N([0,0], 0.1I) + 0.4 N([1,1], 0.05I) + 0.4 N([2,1], 0.05I)`, with the
    /// last two components conditional and the one at the origin singular.
    pub fn three_mode_toy() -> Self {
        let c = |w: f64, m: [f64; 2], v: f64| {
            GaussianComponent::isotropic(w, DVector::from_row_slice(&m), v).expect("valid toy component")
        };
        Self::new(
            vec![
                c(0.2, [0.0, 0.0], 0.1),
                c(0.4, [1.0, 1.0], 0.05),
                c(0.4, [2.0, 1.0], 0.05),
            ],
            vec![false, true, true],
        )
        .expect("valid toy mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn conditional_mask(&self) -> &[bool] {
        &self.conditional
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Restriction to conditional components, weights renormalized.
    pub fn conditional_view(&self) -> Result<Self> {
        let kept: Vec<&GaussianComponent> = self
            .components
            .iter()
            .zip(&self.conditional)
            .filter_map(|(c, &keep)| keep.then_some(c))
            .collect();
        if kept.is_empty() {
            return Err(SsdError::EmptyConditionalSupport);
        }
        if kept.len() == self.components.len() {
            return Ok(self.clone());
        }
        let total: f64 = kept.iter().map(|c| c.weight).sum();
        let components: Vec<_> = kept.iter().map(|c| c.with_weight(c.weight / total)).collect();
        let n = components.len();
        Ok(Self {
            components,
            conditional: vec![true; n],
            dim: self.dim,
        })
    }

    /// Distribution of `x_t` when `x` follows this mixture.
    pub fn noised_marginal(&self, schedule: &DiffusionSchedule, t: Timestep) -> Result<Self> {
        let (alpha, sigma) = schedule.coefficients(t)?;
        self.scaled(alpha, sigma)
    }

    /// Each component mapped to `N(α μ, α² Σ + σ² I)`.
    pub fn scaled(&self, alpha: f64, sigma: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .enumerate()
            .map(|(index, c)| {
                let mut cov = &c.covariance * (alpha * alpha);
                for i in 0..self.dim {
                    cov[(i, i)] += sigma * sigma;
                }
                GaussianComponent::new(c.weight, &c.mean * alpha, cov).map_err(|e| match e {
                    SsdError::InvalidComponent { reason, .. } => SsdError::InvalidComponent { index, reason },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            components,
            conditional: self.conditional.clone(),
            dim: self.dim,
        })
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            Err(SsdError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            })
        } else {
            Ok(())
        }
    }

    /// Per-component `log w_i + log N(x; μ_i, Σ_i)` and their log-sum-exp.
    fn log_terms(&self, x: &DVector<f64>) -> (Vec<f64>, f64) {
        let terms: Vec<f64> = self.components.iter().map(|c| c.weight.ln() + c.log_pdf(x)).collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        (terms, lse)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.log_terms(x).1)
    }

    /// Posterior component probabilities γ_i(x).
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (terms, lse) = self.log_terms(x);
        Ok(terms.iter().map(|v| (v - lse).exp()).collect())
    }

    /// `∇_x log p(x) = Σ γ_i Σ_i⁻¹ (μ_i − x)`.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let gamma = self.responsibilities(x)?;
        let mut out = DVector::zeros(self.dim);
        for (g, c) in gamma.iter().zip(&self.components) {
            if *g > 0.0 {
                out += c.score(x) * *g;
            }
        }
        Ok(out)
    }

    /// `∇² log p(x) = Σ γ_i (g_i g_iᵀ − Σ_i⁻¹) − s sᵀ` with `g_i` the component
    /// scores and `s` the mixture score.
    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let gamma = self.responsibilities(x)?;
        let d = self.dim;
        let mut h = DMatrix::zeros(d, d);
        let mut s = DVector::zeros(d);
        for (g, c) in gamma.iter().zip(&self.components) {
            if *g > 0.0 {
                let gi = c.score(x);
                h += (&gi * gi.transpose() - c.precision()) * *g;
                s += gi * *g;
            }
        }
        h -= &s * s.transpose();
        Ok(h)
    }

    /// One draw: a component by weight, then `μ + L z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty mixture");
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let z = normal_vector(rng, self.dim);
        &chosen.mean + chosen.cholesky.l_dirty().lower_triangle() * z
    }

    /// Exact noise predictor `−σ_t ∇ log p_t(x_t)` of the conditional
    /// (`conditional = true`) or full mixture.
    pub fn denoiser_eps(
        &self,
        schedule: &DiffusionSchedule,
        xt: &DVector<f64>,
        t: Timestep,
        conditional: bool,
    ) -> Result<DVector<f64>> {
        let base = if conditional {
            self.conditional_view()?
        } else {
            self.clone()
        };
        let sigma = schedule.sigma(t)?;
        let marginal = base.noised_marginal(schedule, t)?;
        Ok(marginal.score(xt)? * -sigma)
    }
}

/// Serialized as `{"components": [{weight, mean, covariance, conditional}]}`.
impl Serialize for GaussianMixture {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Component {
            weight: f64,
            mean: Vec<f64>,
            covariance: Vec<Vec<f64>>,
            conditional: bool,
        }
        #[derive(Serialize)]
        struct Mixture {
            components: Vec<Component>,
        }
        let components = self
            .components
            .iter()
            .zip(&self.conditional)
            .map(|(c, &conditional)| Component {
                weight: c.weight,
                mean: c.mean.iter().copied().collect(),
                covariance: c.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
                conditional,
            })
            .collect();
        Mixture { components }.serialize(serializer)
    }
}
