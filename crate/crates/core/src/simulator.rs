//! Direct optimization of a point `θ = x` under a chosen noise-residual
//! estimator: sample `t`, sample `ε`, step `θ ← θ − lr·w(t)·E(θ, ε, t)`.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SsdError};
use crate::estimators::{DistillationTarget, EstimatorKind, EstimatorSpec, NoisedTarget, SsdBranch};
use crate::moments::{normal_vector, seeded_stream};
use crate::schedule::Timestep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    SigmaSquared,
}

impl Weighting {
    pub fn factor(self, sigma: f64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::SigmaSquared => sigma * sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UpdateRule {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Inclusive `[lo, hi]` sampled before `anneal_after`.
    pub t_range_initial: [Timestep; 2],
    /// Inclusive `[lo, hi]` sampled from `anneal_after` on.
    pub t_range_final: [Timestep; 2],
    pub anneal_after: usize,
    #[serde(default)]
    pub w_of_t: Weighting,
    #[serde(default)]
    pub seed: u64,
    pub init_theta: Vec<f64>,
    #[serde(default)]
    pub update: UpdateRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.01,
            t_range_initial: [20, 980],
            t_range_final: [20, 500],
            anneal_after: 1000,
            w_of_t: Weighting::Constant,
            seed: 0,
            init_theta: vec![0.0, 0.0],
            update: UpdateRule::Sgd,
        }
    }
}

impl OptimizerConfig {
    /// Every violation, one message each.
    pub fn violations(&self, horizon: Timestep) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        for (name, [lo, hi]) in [
            ("t_range_initial", self.t_range_initial),
            ("t_range_final", self.t_range_final),
        ] {
            if lo > hi {
                out.push(format!("{name}: lower bound {lo} exceeds upper bound {hi}"));
            }
            if lo < 1 || hi > horizon.saturating_sub(1) {
                out.push(format!(
                    "{name}: [{lo}, {hi}] must lie within [1, {}]",
                    horizon.saturating_sub(1)
                ));
            }
        }
        if self.anneal_after > self.steps {
            out.push(format!(
                "anneal_after ({}) exceeds steps ({})",
                self.anneal_after, self.steps
            ));
        }
        if self.init_theta.is_empty() || self.init_theta.iter().any(|v| !v.is_finite()) {
            out.push("init_theta must be a non-empty finite point".into());
        }
        if let UpdateRule::Adam { beta1, beta2, eps } = self.update {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                out.push("adam: betas must lie in [0, 1) and eps must be > 0".into());
            }
        }
        out
    }

    pub fn validate(&self, horizon: Timestep) -> Result<()> {
        match self.violations(horizon).into_iter().next() {
            Some(msg) => Err(SsdError::InvalidOptimizer(msg)),
            None => Ok(()),
        }
    }
}

/// Uniform integer draw from the range active at `step_index`.
pub fn sample_timestep<R: Rng + ?Sized>(config: &OptimizerConfig, step_index: usize, rng: &mut R) -> Timestep {
    let [lo, hi] = if step_index < config.anneal_after {
        config.t_range_initial
    } else {
        config.t_range_final
    };
    rng.random_range(lo..=hi)
}

/// Diagnostics for one point of a trajectory. Entry `k` describes the update
/// that produced `θ_k`; entry 0 (the initial point) has no update fields.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: Option<Timestep>,
    pub est_norm: Option<f64>,
    pub branch: Option<SsdBranch>,
    pub r: Option<f64>,
    pub logp_uncond: f64,
    pub logp_cond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub estimator: EstimatorKind,
    pub points: Vec<DVector<f64>>,
    pub records: Vec<StepRecord>,
    pub config_hash: String,
}

impl Trajectory {
    pub fn final_point(&self) -> &DVector<f64> {
        self.points.last().expect("trajectory holds its initial point")
    }

    /// Largest distance from `anchor` over all recorded points.
    pub fn max_distance_from(&self, anchor: &DVector<f64>) -> f64 {
        self.points.iter().map(|p| (p - anchor).norm()).fold(0.0, f64::max)
    }

    /// Columns `step, t, theta_0..theta_{d-1}, branch, est_norm, r, logp_uncond,
    /// logp_cond`, preceded by a `# config_hash=` comment line.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# config_hash={}", self.config_hash)?;
        let d = self.points.first().map_or(0, |p| p.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("theta_{i}")));
        header.extend(["branch", "est_norm", "r", "logp_uncond", "logp_cond"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (k, (p, rec)) in self.points.iter().zip(&self.records).enumerate() {
            let mut row = vec![k.to_string(), rec.t.map(|t| t.to_string()).unwrap_or_default()];
            row.extend(p.iter().map(|x| x.to_string()));
            row.push(rec.branch.map(|b| b.as_str().to_string()).unwrap_or_default());
            row.push(opt(rec.est_norm));
            row.push(opt(rec.r));
            row.push(rec.logp_uncond.to_string());
            row.push(rec.logp_cond.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of the JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

fn trajectory_hash(target: &DistillationTarget, estimator: &EstimatorSpec, config: &OptimizerConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        mixture: &'a crate::gmm::GaussianMixture,
        schedule: (String, Timestep),
        estimator: &'a EstimatorSpec,
        optimizer: &'a OptimizerConfig,
    }
    fingerprint(&Key {
        mixture: target.mixture(),
        schedule: (target.schedule().kind().to_string(), target.horizon()),
        estimator,
        optimizer: config,
    })
}

struct Stepper {
    rule: UpdateRule,
    m: DVector<f64>,
    v: DVector<f64>,
    k: i32,
}

impl Stepper {
    fn new(rule: UpdateRule, dim: usize) -> Self {
        Self {
            rule,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            k: 0,
        }
    }

    fn delta(&mut self, grad: &DVector<f64>, lr: f64) -> DVector<f64> {
        match self.rule {
            UpdateRule::Sgd => grad * lr,
            UpdateRule::Adam { beta1, beta2, eps } => {
                self.k += 1;
                self.m = &self.m * beta1 + grad * (1.0 - beta1);
                self.v = &self.v * beta2 + grad.component_mul(grad) * (1.0 - beta2);
                let m_hat = &self.m / (1.0 - beta1.powi(self.k));
                let v_hat = &self.v / (1.0 - beta2.powi(self.k));
                m_hat.zip_map(&v_hat, |m, v| lr * m / (v.sqrt() + eps))
            }
        }
    }
}

pub fn run_trajectory(
    target: &DistillationTarget,
    estimator: &EstimatorSpec,
    config: &OptimizerConfig,
) -> Result<Trajectory> {
    let horizon = target.horizon();
    estimator.validate(horizon)?;
    config.validate(horizon)?;
    let d = target.dim();
    if config.init_theta.len() != d {
        return Err(SsdError::DimensionMismatch {
            expected: d,
            got: config.init_theta.len(),
        });
    }
    let mixture = target.mixture();
    let conditional = target.conditional();
    let log_densities =
        |p: &DVector<f64>| -> Result<(f64, f64)> { Ok((mixture.log_density(p)?, conditional.log_density(p)?)) };

    let mut theta = DVector::from_vec(config.init_theta.clone());
    let (lu, lc) = log_densities(&theta)?;
    let mut traj = Trajectory {
        estimator: estimator.kind,
        points: vec![theta.clone()],
        records: vec![StepRecord {
            t: None,
            est_norm: None,
            branch: None,
            r: None,
            logp_uncond: lu,
            logp_cond: lc,
        }],
        config_hash: trajectory_hash(target, estimator, config),
    };

    let mut rng = seeded_stream(config.seed, 0);
    let mut stepper = Stepper::new(config.update, d);
    let mut cache: HashMap<Timestep, NoisedTarget> = HashMap::new();
    for k in 0..config.steps {
        let t = sample_timestep(config, k, &mut rng);
        let eps = normal_vector(&mut rng, d);
        let noised = match cache.entry(t) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(target.at(t)?),
        };
        let out = noised.evaluate(estimator, &theta, &eps)?;
        let weight = config.w_of_t.factor(noised.sigma);
        theta -= stepper.delta(&(&out.value * weight), config.learning_rate);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(SsdError::Divergence {
                step: k + 1,
                partial: Box::new(traj),
            });
        }
        let (lu, lc) = log_densities(&theta)?;
        traj.points.push(theta.clone());
        traj.records.push(StepRecord {
            t: Some(t),
            est_norm: Some(out.value.norm()),
            branch: out.branch,
            r: out.parts.r_scalar,
            logp_uncond: lu,
            logp_cond: lc,
        });
    }
    Ok(traj)
}

/// Mode-disengaging run from `config.init_theta`, normally a trapping point.
pub fn run_trap_escape(target: &DistillationTarget, config: &OptimizerConfig) -> Result<Trajectory> {
    run_trajectory(target, &EstimatorSpec::new(EstimatorKind::ModeDisengaging), config)
}

/// One trajectory per seed, run in parallel and returned in seed order.
pub fn run_seeds(
    target: &DistillationTarget,
    estimator: &EstimatorSpec,
    config: &OptimizerConfig,
    seeds: &[u64],
) -> Vec<Result<Trajectory>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = OptimizerConfig { seed, ..config.clone() };
            run_trajectory(target, estimator, &cfg)
        })
        .collect()
}
