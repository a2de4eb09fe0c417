//! Noise-residual estimators that stand in for `ε̂^CFG − ε` in the
//! distillation gradient.
//!
//! The CFG residual splits as `ω·h + ε̂(y) − ε`, where
//! `h = ε̂(x_t, t, y) − ε̂(x_t, t, ∅)` is the mode-disengaging term, `ε̂(y)` is
//! the mode-seeking term, and `−ε` is the variance-reducing term. The SSD
//! estimator uses `h` above the timestep threshold `M` and, at or below it, the
//! variance-reduced mode-seeking term `ε̃ = ε̂(y) − r·ε` rescaled to `‖h‖`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsdError};
use crate::gmm::GaussianMixture;
use crate::moments::{self, normal_vector, seeded_stream};
use crate::schedule::{DiffusionSchedule, Timestep};

/// Below this norm `ε̃` is treated as zero and the rescale is skipped.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sds,
    ModeSeeking,
    ModeDisengaging,
    Ssd,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sds => "sds",
            Self::ModeSeeking => "mode_seeking",
            Self::ModeDisengaging => "mode_disengaging",
            Self::Ssd => "ssd",
        }
    }
}

/// Residual applied to the mode-seeking term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceReduction {
    /// `ε̂(y)`
    #[default]
    None,
    /// `ε̂(y) − ε`
    SdsStyle,
    /// `ε̂(y) − r·ε`
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(rename = "M", default = "default_threshold")]
    pub threshold: Timestep,
    #[serde(default)]
    pub variance_reduction: VarianceReduction,
}

fn default_omega() -> f64 {
    100.0
}

fn default_threshold() -> Timestep {
    200
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self::new(EstimatorKind::Ssd)
    }
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            omega: default_omega(),
            threshold: default_threshold(),
            variance_reduction: VarianceReduction::None,
        }
    }

    pub fn ssd(threshold: Timestep) -> Self {
        Self {
            threshold,
            ..Self::new(EstimatorKind::Ssd)
        }
    }

    pub fn sds(omega: f64) -> Self {
        Self {
            omega,
            ..Self::new(EstimatorKind::Sds)
        }
    }

    pub fn validate(&self, horizon: Timestep) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(SsdError::InvalidEstimator(format!(
                "omega must be >= 0 (got {})",
                self.omega
            )));
        }
        if self.threshold > horizon {
            return Err(SsdError::InvalidEstimator(format!(
                "threshold exceeds horizon (M = {} > T = {horizon})",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Which side of the timestep threshold produced an SSD output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsdBranch {
    /// `t > M`: the mode-disengaging term.
    ModeDisengaging,
    /// `t ≤ M`: `ε̃` rescaled to `‖h‖`.
    Rescaled,
    /// `t ≤ M` with `‖ε̃‖` below [`DEGENERATE_NORM`]; the output is zero.
    Degenerate,
}

impl SsdBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ModeDisengaging => "h",
            Self::Rescaled => "rescaled",
            Self::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorParts {
    pub h: Option<DVector<f64>>,
    pub eps_hat_cond: Option<DVector<f64>>,
    pub eps_hat_uncond: Option<DVector<f64>>,
    pub eps: Option<DVector<f64>>,
    pub r_scalar: Option<f64>,
    pub rescale_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub value: DVector<f64>,
    pub parts: EstimatorParts,
    /// Set for SSD outputs only.
    pub branch: Option<SsdBranch>,
}

/// `r = (ε̂·ε)/‖ε‖²`, the `k` minimizing `‖ε̂ − kε‖`.
pub fn projection_ratio(eps_hat: &DVector<f64>, epsilon: &DVector<f64>) -> Result<f64> {
    let denom = epsilon.norm_squared();
    if denom.is_nan() || denom <= 0.0 {
        return Err(SsdError::DegenerateNoise);
    }
    Ok(eps_hat.dot(epsilon) / denom)
}

/// `(ε̂ − r·ε, r)`; the first entry is orthogonal to `ε`.
pub fn variance_reduced(eps_hat: &DVector<f64>, epsilon: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let r = projection_ratio(eps_hat, epsilon)?;
    Ok((eps_hat - epsilon * r, r))
}

/// `c = tr(Σ_{ε̂ε}) / tr(Σ_ε)` over a fixed sample set: the `k` that minimizes
/// the sample total variance of `ε̂ − kε`. With `ε ~ N(0, I)` the denominator
/// concentrates on `d`.
pub fn optimal_c_from_samples(eps_hats: &[DVector<f64>], epsilons: &[DVector<f64>]) -> Result<f64> {
    if eps_hats.len() < 2 {
        return Err(SsdError::TooFewSamples(eps_hats.len()));
    }
    let denom = moments::total_variance(epsilons);
    if denom.is_nan() || denom <= 0.0 {
        return Err(SsdError::DegenerateNoise);
    }
    Ok(moments::cross_covariance_trace(eps_hats, epsilons) / denom)
}

/// A mixture, its conditional restriction, and a schedule: everything the
/// exact noise predictors need.
#[derive(Debug, Clone)]
pub struct DistillationTarget {
    mixture: GaussianMixture,
    conditional: GaussianMixture,
    schedule: DiffusionSchedule,
}

impl DistillationTarget {
    pub fn new(mixture: GaussianMixture, schedule: DiffusionSchedule) -> Result<Self> {
        let conditional = mixture.conditional_view()?;
        Ok(Self {
            mixture,
            conditional,
            schedule,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn conditional(&self) -> &GaussianMixture {
        &self.conditional
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn horizon(&self) -> Timestep {
        self.schedule.horizon()
    }

    /// Noised conditional and unconditional marginals at `t`.
    pub fn at(&self, t: Timestep) -> Result<NoisedTarget> {
        let (alpha, sigma) = self.schedule.coefficients(t)?;
        Ok(NoisedTarget {
            t,
            alpha,
            sigma,
            conditional: self.conditional.scaled(alpha, sigma)?,
            unconditional: self.mixture.scaled(alpha, sigma)?,
        })
    }

    pub fn mode_disengaging(&self, x0: &DVector<f64>, epsilon: &DVector<f64>, t: Timestep) -> Result<DVector<f64>> {
        self.at(t)?.mode_disengaging(x0, epsilon)
    }

    pub fn mode_seeking(&self, x0: &DVector<f64>, epsilon: &DVector<f64>, t: Timestep) -> Result<DVector<f64>> {
        self.at(t)?.mode_seeking(x0, epsilon)
    }

    pub fn variance_reduced_mode_seeking(
        &self,
        x0: &DVector<f64>,
        epsilon: &DVector<f64>,
        t: Timestep,
    ) -> Result<DVector<f64>> {
        self.at(t)?.variance_reduced_mode_seeking(x0, epsilon)
    }

    pub fn sds_estimator(
        &self,
        x0: &DVector<f64>,
        epsilon: &DVector<f64>,
        t: Timestep,
        omega: f64,
    ) -> Result<DVector<f64>> {
        self.at(t)?.sds(x0, epsilon, omega)
    }

    pub fn ssd_estimator(
        &self,
        x0: &DVector<f64>,
        epsilon: &DVector<f64>,
        t: Timestep,
        threshold: Timestep,
    ) -> Result<EstimatorOutput> {
        if threshold > self.horizon() {
            return Err(SsdError::InvalidEstimator(format!(
                "threshold exceeds horizon (M = {threshold} > T = {})",
                self.horizon()
            )));
        }
        self.at(t)?.ssd(x0, epsilon, threshold)
    }

    pub fn evaluate(
        &self,
        spec: &EstimatorSpec,
        x0: &DVector<f64>,
        epsilon: &DVector<f64>,
        t: Timestep,
    ) -> Result<EstimatorOutput> {
        self.at(t)?.evaluate(spec, x0, epsilon)
    }

    /// Monte-Carlo closed-form `c(x0, t)` from `n_samples` fresh noises.
    pub fn optimal_c(&self, x0: &DVector<f64>, t: Timestep, n_samples: usize, seed: u64) -> Result<f64> {
        if n_samples < 2 {
            return Err(SsdError::TooFewSamples(n_samples));
        }
        let noised = self.at(t)?;
        let mut rng = seeded_stream(seed, 0);
        let epsilons: Vec<_> = (0..n_samples).map(|_| normal_vector(&mut rng, self.dim())).collect();
        let eps_hats = epsilons
            .iter()
            .map(|e| noised.mode_seeking(x0, e))
            .collect::<Result<Vec<_>>>()?;
        optimal_c_from_samples(&eps_hats, &epsilons)
    }
}

/// Both noised marginals at a fixed timestep; reuse across many noise draws.
#[derive(Debug, Clone)]
pub struct NoisedTarget {
    pub t: Timestep,
    pub alpha: f64,
    pub sigma: f64,
    pub conditional: GaussianMixture,
    pub unconditional: GaussianMixture,
}

impl NoisedTarget {
    pub fn noise(&self, x0: &DVector<f64>, epsilon: &DVector<f64>) -> Result<DVector<f64>> {
        if x0.len() != epsilon.len() {
            return Err(SsdError::DimensionMismatch {
                expected: x0.len(),
                got: epsilon.len(),
            });
        }
        Ok(x0 * self.alpha + epsilon * self.sigma)
    }

    pub fn eps_hat(&self, xt: &DVector<f64>, conditional: bool) -> Result<DVector<f64>> {
        let m = if conditional {
            &self.conditional
        } else {
            &self.unconditional
        };
        Ok(m.score(xt)? * -self.sigma)
    }

    fn both(&self, x0: &DVector<f64>, epsilon: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let xt = self.noise(x0, epsilon)?;
        Ok((self.eps_hat(&xt, true)?, self.eps_hat(&xt, false)?))
    }

    pub fn mode_seeking(&self, x0: &DVector<f64>, epsilon: &DVector<f64>) -> Result<DVector<f64>> {
        let xt = self.noise(x0, epsilon)?;
        self.eps_hat(&xt, true)
    }

    pub fn mode_disengaging(&self, x0: &DVector<f64>, epsilon: &DVector<f64>) -> Result<DVector<f64>> {
        let (cond, uncond) = self.both(x0, epsilon)?;
        Ok(cond - uncond)
    }

    pub fn variance_reduced_mode_seeking(&self, x0: &DVector<f64>, epsilon: &DVector<f64>) -> Result<DVector<f64>> {
        let eps_hat = self.mode_seeking(x0, epsilon)?;
        Ok(variance_reduced(&eps_hat, epsilon)?.0)
    }

    /// `ω·h + ε̂(y) − ε`.
    pub fn sds(&self, x0: &DVector<f64>, epsilon: &DVector<f64>, omega: f64) -> Result<DVector<f64>> {
        let (cond, uncond) = self.both(x0, epsilon)?;
        let h = &cond - uncond;
        Ok(h * omega + cond - epsilon)
    }

    pub fn ssd(&self, x0: &DVector<f64>, epsilon: &DVector<f64>, threshold: Timestep) -> Result<EstimatorOutput> {
        let (cond, uncond) = self.both(x0, epsilon)?;
        let h = &cond - &uncond;
        let mut parts = EstimatorParts {
            h: Some(h.clone()),
            eps_hat_cond: Some(cond.clone()),
            eps_hat_uncond: Some(uncond),
            eps: Some(epsilon.clone()),
            ..Default::default()
        };
        if self.t > threshold {
            return Ok(EstimatorOutput {
                value: h,
                parts,
                branch: Some(SsdBranch::ModeDisengaging),
            });
        }
        let (reduced, r) = variance_reduced(&cond, epsilon)?;
        parts.r_scalar = Some(r);
        let reduced_norm = reduced.norm();
        if reduced_norm < DEGENERATE_NORM {
            return Ok(EstimatorOutput {
                value: DVector::zeros(h.len()),
                parts,
                branch: Some(SsdBranch::Degenerate),
            });
        }
        let factor = h.norm() / reduced_norm;
        parts.rescale_factor = Some(factor);
        Ok(EstimatorOutput {
            value: reduced * factor,
            parts,
            branch: Some(SsdBranch::Rescaled),
        })
    }

    pub fn evaluate(&self, spec: &EstimatorSpec, x0: &DVector<f64>, epsilon: &DVector<f64>) -> Result<EstimatorOutput> {
        match spec.kind {
            EstimatorKind::Ssd => self.ssd(x0, epsilon, spec.threshold),
            EstimatorKind::ModeDisengaging => {
                let (cond, uncond) = self.both(x0, epsilon)?;
                let h = &cond - &uncond;
                Ok(EstimatorOutput {
                    value: h.clone(),
                    parts: EstimatorParts {
                        h: Some(h),
                        eps_hat_cond: Some(cond),
                        eps_hat_uncond: Some(uncond),
                        eps: Some(epsilon.clone()),
                        ..Default::default()
                    },
                    branch: None,
                })
            }
            EstimatorKind::ModeSeeking => {
                let cond = self.mode_seeking(x0, epsilon)?;
                let mut parts = EstimatorParts {
                    eps_hat_cond: Some(cond.clone()),
                    eps: Some(epsilon.clone()),
                    ..Default::default()
                };
                let value = match spec.variance_reduction {
                    VarianceReduction::None => cond,
                    VarianceReduction::SdsStyle => cond - epsilon,
                    VarianceReduction::Adaptive => {
                        let (reduced, r) = variance_reduced(&cond, epsilon)?;
                        parts.r_scalar = Some(r);
                        reduced
                    }
                };
                Ok(EstimatorOutput {
                    value,
                    parts,
                    branch: None,
                })
            }
            EstimatorKind::Sds => {
                let (cond, uncond) = self.both(x0, epsilon)?;
                let h = &cond - &uncond;
                let value = &h * spec.omega + &cond - epsilon;
                Ok(EstimatorOutput {
                    value,
                    parts: EstimatorParts {
                        h: Some(h),
                        eps_hat_cond: Some(cond),
                        eps_hat_uncond: Some(uncond),
                        eps: Some(epsilon.clone()),
                        ..Default::default()
                    },
                    branch: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianComponent;
    use crate::schedule::ScheduleKind;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn toy() -> DistillationTarget {
        DistillationTarget::new(
            GaussianMixture::three_mode_toy(),
            DiffusionSchedule::new(ScheduleKind::Cosine, 1000).unwrap(),
        )
        .unwrap()
    }

    fn fully_conditional() -> DistillationTarget {
        let comps = GaussianMixture::three_mode_toy().components().to_vec();
        DistillationTarget::new(
            GaussianMixture::fully_conditional(comps).unwrap(),
            DiffusionSchedule::new(ScheduleKind::Cosine, 1000).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn mode_disengaging_vanishes_without_singular_modes() {
        let target = fully_conditional();
        for t in [1, 200, 650, 999] {
            let h = target.mode_disengaging(&v(&[0.4, 0.9]), &v(&[1.1, -0.3]), t).unwrap();
            assert_eq!(h.norm(), 0.0);
        }
    }

    #[test]
    fn endpoint_behaviour() {
        let target = toy();
        let x0 = v(&[0.3, 0.8]);
        let eps = v(&[-0.6, 1.4]);
        assert!(target.mode_disengaging(&x0, &eps, 1000).unwrap().norm() < 1e-9);
        assert!((target.mode_seeking(&x0, &eps, 1000).unwrap() - &eps).amax() < 1e-12);
        assert_eq!(target.mode_seeking(&x0, &eps, 0).unwrap().norm(), 0.0);
        assert!(target.variance_reduced_mode_seeking(&x0, &eps, 1000).unwrap().norm() < 1e-9);
        assert!(target.variance_reduced_mode_seeking(&x0, &eps, 0).unwrap().norm() < 1e-9);
        // the SDS-style residual at t = 0 is −ε
        let naive = target.sds_estimator(&x0, &eps, 0, 0.0).unwrap();
        assert!((naive.norm() - eps.norm()).abs() < 1e-12);
        for omega in [0.0, 7.5, 100.0] {
            assert!(target.sds_estimator(&x0, &eps, 1000, omega).unwrap().norm() < 1e-9);
        }
    }

    #[test]
    fn mode_disengaging_pushes_off_the_singular_mode() {
        let target = toy();
        let h = target.mode_disengaging(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), 350).unwrap();
        let toward_conditional = v(&[1.0, 1.0]);
        // descent moves θ by −h
        assert!((-&h).dot(&toward_conditional) > 0.0);
        // regression constant, computed by an independent numpy evaluation
        assert!((h[0] - H_AT_ORIGIN_T350[0]).abs() < 1e-12, "{h}");
        assert!((h[1] - H_AT_ORIGIN_T350[1]).abs() < 1e-12, "{h}");

        // one descent step raises the conditional log-density
        let cond = target.conditional();
        let before = cond.log_density(&v(&[0.0, 0.0])).unwrap();
        let after = cond.log_density(&(-&h * 0.01)).unwrap();
        assert!(after > before);
    }

    const H_AT_ORIGIN_T350: [f64; 2] = [-1.1857898199811499, -1.1492304815242764];

    #[test]
    fn projection_ratio_cases() {
        let eps = v(&[0.6, -0.8, 2.0]);
        assert!((projection_ratio(&eps, &eps).unwrap() - 1.0).abs() < 1e-15);
        let perp = v(&[0.8, 0.6, 0.0]);
        assert_eq!(projection_ratio(&perp, &eps).unwrap(), 0.0);
        let mixed = &eps * 2.5 + &perp;
        assert!((projection_ratio(&mixed, &eps).unwrap() - 2.5).abs() < 1e-14);
        assert!(matches!(
            projection_ratio(&eps, &DVector::zeros(3)),
            Err(SsdError::DegenerateNoise)
        ));
    }

    #[test]
    fn ssd_branches() {
        let target = toy();
        let x0 = v(&[0.5, 0.4]);
        let eps = v(&[0.9, -0.2]);
        let above = target.ssd_estimator(&x0, &eps, 201, 200).unwrap();
        assert_eq!(above.branch, Some(SsdBranch::ModeDisengaging));
        assert_eq!(Some(&above.value), above.parts.h.as_ref());
        assert!(above.parts.rescale_factor.is_none());

        let below = target.ssd_estimator(&x0, &eps, 200, 200).unwrap();
        assert_eq!(below.branch, Some(SsdBranch::Rescaled));
        let h = below.parts.h.as_ref().unwrap();
        assert!((below.value.norm() - h.norm()).abs() < 1e-9);
        let reduced = target.variance_reduced_mode_seeking(&x0, &eps, 200).unwrap();
        let cos = below.value.dot(&reduced) / (below.value.norm() * reduced.norm());
        assert!((cos - 1.0).abs() < 1e-12);

        for t in 1..=1000 {
            let out = target.ssd_estimator(&x0, &eps, t, 0).unwrap();
            assert_eq!(out.value, target.mode_disengaging(&x0, &eps, t).unwrap());
        }
        assert!(target.ssd_estimator(&x0, &eps, 10, 1001).is_err());
    }

    #[test]
    fn ssd_degenerate_at_clean_timestep() {
        let target = toy();
        let out = target.ssd_estimator(&v(&[0.5, 0.4]), &v(&[0.9, -0.2]), 0, 200).unwrap();
        assert_eq!(out.branch, Some(SsdBranch::Degenerate));
        assert_eq!(out.value.norm(), 0.0);
    }

    #[test]
    fn optimal_c_endpoints() {
        let target = toy();
        let x0 = v(&[1.2, 0.9]);
        let at_terminal = target.optimal_c(&x0, 1000, 4096, 5).unwrap();
        assert!((at_terminal - 1.0).abs() < 1e-12);
        assert_eq!(target.optimal_c(&x0, 0, 4096, 5).unwrap(), 0.0);
        assert!(matches!(
            target.optimal_c(&x0, 10, 1, 5),
            Err(SsdError::TooFewSamples(1))
        ));
        assert_eq!(
            target.optimal_c(&x0, 400, 512, 8).unwrap(),
            target.optimal_c(&x0, 400, 512, 8).unwrap()
        );
    }

    #[test]
    fn optimal_c_within_r_extremes() {
        let target = toy();
        let x0 = v(&[1.3, 1.1]);
        let noised = target.at(300).unwrap();
        let mut rng = seeded_stream(2, 0);
        let eps: Vec<_> = (0..2048).map(|_| normal_vector(&mut rng, 2)).collect();
        let hats: Vec<_> = eps.iter().map(|e| noised.mode_seeking(&x0, e).unwrap()).collect();
        let c = optimal_c_from_samples(&hats, &eps).unwrap();
        let rs: Vec<f64> = hats
            .iter()
            .zip(&eps)
            .map(|(h, e)| projection_ratio(h, e).unwrap())
            .collect();
        let lo = rs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= c && c <= hi);
    }

    #[test]
    fn evaluate_dispatches() {
        let target = toy();
        let x0 = v(&[0.2, 0.1]);
        let eps = v(&[0.5, 0.5]);
        let t = 420;
        let ms = EstimatorSpec::new(EstimatorKind::ModeSeeking);
        assert_eq!(
            target.evaluate(&ms, &x0, &eps, t).unwrap().value,
            target.mode_seeking(&x0, &eps, t).unwrap()
        );
        let sds_style = EstimatorSpec {
            variance_reduction: VarianceReduction::SdsStyle,
            ..ms
        };
        assert_eq!(
            target.evaluate(&sds_style, &x0, &eps, t).unwrap().value,
            target.mode_seeking(&x0, &eps, t).unwrap() - &eps
        );
        let adaptive = EstimatorSpec {
            variance_reduction: VarianceReduction::Adaptive,
            ..ms
        };
        assert_eq!(
            target.evaluate(&adaptive, &x0, &eps, t).unwrap().value,
            target.variance_reduced_mode_seeking(&x0, &eps, t).unwrap()
        );
        let sds = EstimatorSpec::sds(7.5);
        assert_eq!(
            target.evaluate(&sds, &x0, &eps, t).unwrap().value,
            target.sds_estimator(&x0, &eps, t, 7.5).unwrap()
        );
    }

    #[test]
    fn spec_validation_and_json_keys() {
        assert!(EstimatorSpec::ssd(1001).validate(1000).is_err());
        assert!(EstimatorSpec::sds(-1.0).validate(1000).is_err());
        assert!(EstimatorSpec::default().validate(1000).is_ok());
        let spec: EstimatorSpec =
            serde_json::from_str(r#"{"kind":"ssd","omega":3.0,"M":150,"variance_reduction":"adaptive"}"#).unwrap();
        assert_eq!(spec.threshold, 150);
        assert_eq!(spec.variance_reduction, VarianceReduction::Adaptive);
    }

    #[test]
    fn single_component_dims() {
        let target = DistillationTarget::new(
            GaussianMixture::fully_conditional(vec![
                GaussianComponent::isotropic(1.0, v(&[0.0, 0.0, 0.0]), 1.0).unwrap()
            ])
            .unwrap(),
            DiffusionSchedule::new(ScheduleKind::Cosine, 100).unwrap(),
        )
        .unwrap();
        assert!(target.mode_seeking(&v(&[0.0, 0.0]), &v(&[1.0, 0.0, 0.0]), 5).is_err());
    }

    proptest! {
        #[test]
        fn reduced_term_is_orthogonal_to_noise(
            x in -2.0f64..3.0, y in -2.0f64..3.0,
            e0 in -3.0f64..3.0, e1 in -3.0f64..3.0,
            t in 1u32..1000,
        ) {
            prop_assume!(e0.abs() + e1.abs() > 1e-3);
            let target = toy();
            let eps = v(&[e0, e1]);
            let reduced = target.variance_reduced_mode_seeking(&v(&[x, y]), &eps, t).unwrap();
            prop_assert!(reduced.dot(&eps).abs() <= 1e-9 * reduced.norm().max(1e-300) * eps.norm() + 1e-300);
        }

        #[test]
        fn r_minimizes_residual_norm(
            a0 in -5.0f64..5.0, a1 in -5.0f64..5.0,
            e0 in -3.0f64..3.0, e1 in -3.0f64..3.0,
            delta in 1e-6f64..2.0,
        ) {
            prop_assume!(e0.abs() + e1.abs() > 1e-3);
            let eps_hat = v(&[a0, a1]);
            let eps = v(&[e0, e1]);
            let r = projection_ratio(&eps_hat, &eps).unwrap();
            let best = (&eps_hat - &eps * r).norm();
            for k in [r - delta, r + delta] {
                prop_assert!((&eps_hat - &eps * k).norm() >= best);
            }
        }
    }
}
