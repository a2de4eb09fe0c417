//! Experiment configuration: one JSON file describes a target, the estimator
//! and optimizer defaults, and the list of experiments to run on it.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::Region;
use crate::error::{Result, SsdError};
use crate::estimators::{DistillationTarget, EstimatorSpec};
use crate::gmm::{GaussianComponent, GaussianMixture, WEIGHT_SUM_TOLERANCE};
use crate::schedule::{DiffusionSchedule, ScheduleKind, Timestep};
use crate::simulator::{OptimizerConfig, UpdateRule, Weighting};

/// Either `v` (meaning `v·I`) or a full matrix given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Isotropic(f64),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: CovarianceSpec,
    #[serde(default = "yes")]
    pub conditional: bool,
}

fn yes() -> bool {
    true
}

impl ComponentSpec {
    fn covariance_matrix(&self) -> std::result::Result<DMatrix<f64>, String> {
        let d = self.mean.len();
        match &self.covariance {
            CovarianceSpec::Isotropic(v) => Ok(DMatrix::identity(d, d) * *v),
            CovarianceSpec::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(format!("covariance must be {d}x{d}"));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }

    fn build(&self) -> std::result::Result<GaussianComponent, String> {
        let cov = self.covariance_matrix()?;
        GaussianComponent::new(self.weight, DVector::from_column_slice(&self.mean), cov).map_err(|e| match e {
            SsdError::InvalidComponent { reason, .. } => reason,
            other => other.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.components.is_empty() {
            out.push("mixture: no components".into());
            return out;
        }
        let d = self.dim();
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != d {
                out.push(format!(
                    "mixture.components[{i}]: mean has dimension {} (expected {d})",
                    c.mean.len()
                ));
            } else if let Err(reason) = c.build() {
                out.push(format!("mixture.components[{i}]: {reason}"));
            }
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            out.push(format!("mixture: weights must sum to 1 (got {sum})"));
        }
        if !self.components.iter().any(|c| c.conditional) {
            out.push("mixture: empty conditional support (no component is conditional)".into());
        }
        out
    }

    pub fn build(&self) -> Result<GaussianMixture> {
        let components = self
            .components
            .iter()
            .enumerate()
            .map(|(index, c)| c.build().map_err(|reason| SsdError::InvalidComponent { index, reason }))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(components, self.components.iter().map(|c| c.conditional).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub horizon: Timestep,
}

/// Fields replaced on top of the config-wide optimizer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_range_initial: Option<[Timestep; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_range_final: Option<[Timestep; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal_after: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_of_t: Option<Weighting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdateRule>,
}

impl OptimizerOverride {
    pub fn apply(&self, base: &OptimizerConfig) -> OptimizerConfig {
        let mut c = base.clone();
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.t_range_initial {
            c.t_range_initial = v;
        }
        if let Some(v) = self.t_range_final {
            c.t_range_final = v;
        }
        if let Some(v) = self.anneal_after {
            c.anneal_after = v;
        }
        if let Some(v) = self.w_of_t {
            c.w_of_t = v;
        }
        if let Some(v) = &self.init_theta {
            c.init_theta = v.clone();
        }
        if let Some(v) = self.update {
            c.update = v;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub t: Timestep,
    pub region: Region,
    pub resolution: [usize; 2],
}

/// Defaults for the Monte-Carlo and raster experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Points of the evenly spaced sweep grid over `[1, T − 1]`.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Seed for drawing the sweep probe from the conditional mixture.
    #[serde(default)]
    pub probe_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
}

fn default_samples() -> usize {
    8192
}

fn default_grid_points() -> usize {
    20
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            n_samples: default_samples(),
            grid_points: default_grid_points(),
            probe_seed: 0,
            density: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// One optimizer run per seed.
    Trajectory {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        estimator: Option<EstimatorSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        optimizer: Option<OptimizerOverride>,
    },
    /// Mode-disengaging runs from a trapping point.
    TrapEscape {
        label: String,
        init_theta: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        optimizer: Option<OptimizerOverride>,
    },
    /// Per-timestep statistics at one probe point.
    Sweep {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timesteps: Option<Vec<Timestep>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probe_x0: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_samples: Option<usize>,
    },
    /// Conditional noised density raster, optionally overlaid with earlier
    /// trajectories scaled by `α_t`.
    DensityMap {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        density: Option<DensitySpec>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        overlay: Vec<String>,
    },
    /// Modes of the noised conditional marginal at each listed timestep.
    Modes {
        label: String,
        timesteps: Vec<Timestep>,
        #[serde(default)]
        onset: bool,
    },
    /// SDS loss at fixed points and timesteps.
    LossProbe {
        label: String,
        points: Vec<Vec<f64>>,
        timesteps: Vec<Timestep>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_samples: Option<usize>,
        #[serde(default)]
        w_of_t: Weighting,
    },
}

impl Experiment {
    pub fn label(&self) -> &str {
        match self {
            Self::Trajectory { label, .. }
            | Self::TrapEscape { label, .. }
            | Self::Sweep { label, .. }
            | Self::DensityMap { label, .. }
            | Self::Modes { label, .. }
            | Self::LossProbe { label, .. } => label,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Trajectory { .. } => "trajectory",
            Self::TrapEscape { .. } => "trap_escape",
            Self::Sweep { .. } => "sweep",
            Self::DensityMap { .. } => "density_map",
            Self::Modes { .. } => "modes",
            Self::LossProbe { .. } => "loss_probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub mixture: MixtureSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    pub output_dir: String,
    pub seeds: Vec<u64>,
    pub experiments: Vec<Experiment>,
}

fn label_ok(label: &str) -> bool {
    !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn target(&self) -> Result<DistillationTarget> {
        let schedule = DiffusionSchedule::new(self.schedule.kind, self.schedule.horizon)?;
        DistillationTarget::new(self.mixture.build()?, schedule)
    }

    /// Optimizer for a trajectory-like experiment, before seeding.
    pub fn optimizer_for(&self, over: Option<&OptimizerOverride>) -> OptimizerConfig {
        over.map_or_else(|| self.optimizer.clone(), |o| o.apply(&self.optimizer))
    }

    pub fn density_for<'a>(&'a self, own: Option<&'a DensitySpec>) -> Option<&'a DensitySpec> {
        own.or(self.analysis.density.as_ref())
    }

    /// Every schema-level problem, one message each; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.mixture.violations();
        let d = self.mixture.dim();
        let horizon = self.schedule.horizon;
        if horizon < 2 {
            out.push(format!("schedule: horizon must be at least 2 (got {horizon})"));
        }
        let check_estimator = |ctx: &str, e: &EstimatorSpec, out: &mut Vec<String>| {
            if let Err(SsdError::InvalidEstimator(msg)) = e.validate(horizon) {
                out.push(format!("{ctx}: {msg}"));
            }
        };
        let check_optimizer = |ctx: &str, o: &OptimizerConfig, out: &mut Vec<String>| {
            for msg in o.violations(horizon) {
                out.push(format!("{ctx}: {msg}"));
            }
            if o.init_theta.len() != d {
                out.push(format!(
                    "{ctx}: init_theta has dimension {} (mixture has {d})",
                    o.init_theta.len()
                ));
            }
        };
        let check_t = |ctx: &str, t: Timestep, out: &mut Vec<String>| {
            if t > horizon {
                out.push(format!("{ctx}: timestep {t} exceeds horizon {horizon}"));
            }
        };
        check_estimator("estimator", &self.estimator, &mut out);
        if self.analysis.n_samples < 2 {
            out.push(format!(
                "analysis: n_samples must be at least 2 (got {})",
                self.analysis.n_samples
            ));
        }
        if self.analysis.grid_points < 2 {
            out.push(format!(
                "analysis: grid_points must be at least 2 (got {})",
                self.analysis.grid_points
            ));
        }
        if self.output_dir.is_empty() {
            out.push("output_dir must not be empty".into());
        }
        if self.seeds.is_empty() {
            out.push("seeds must not be empty".into());
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                out.push(format!("seeds: duplicate seed {s}"));
            }
        }
        if self.experiments.is_empty() {
            out.push("experiments must not be empty".into());
        }

        let mut labels = HashSet::new();
        let mut runs = HashSet::new();
        for (i, e) in self.experiments.iter().enumerate() {
            let ctx = format!("experiments[{i}] ({})", e.label());
            if !label_ok(e.label()) {
                out.push(format!("{ctx}: label must be non-empty and use only [A-Za-z0-9_-]"));
            }
            if !labels.insert(e.label().to_string()) {
                out.push(format!("{ctx}: duplicate label"));
            }
            match e {
                Experiment::Trajectory {
                    estimator, optimizer, ..
                } => {
                    if let Some(est) = estimator {
                        check_estimator(&ctx, est, &mut out);
                    }
                    check_optimizer(&ctx, &self.optimizer_for(optimizer.as_ref()), &mut out);
                    runs.insert(e.label().to_string());
                }
                Experiment::TrapEscape {
                    init_theta, optimizer, ..
                } => {
                    let mut o = self.optimizer_for(optimizer.as_ref());
                    o.init_theta = init_theta.clone();
                    check_optimizer(&ctx, &o, &mut out);
                    runs.insert(e.label().to_string());
                }
                Experiment::Sweep {
                    timesteps,
                    probe_x0,
                    n_samples,
                    ..
                } => {
                    for &t in timesteps.iter().flatten() {
                        check_t(&ctx, t, &mut out);
                    }
                    if timesteps.as_ref().is_some_and(|t| t.is_empty()) {
                        out.push(format!("{ctx}: timesteps must not be empty"));
                    }
                    if let Some(p) = probe_x0 {
                        if p.len() != d {
                            out.push(format!("{ctx}: probe_x0 has dimension {} (mixture has {d})", p.len()));
                        }
                    }
                    if n_samples.is_some_and(|n| n < 2) {
                        out.push(format!("{ctx}: n_samples must be at least 2"));
                    }
                }
                Experiment::DensityMap { density, overlay, .. } => {
                    if d != 2 {
                        out.push(format!("{ctx}: density maps need a 2-D mixture (got d = {d})"));
                    }
                    match self.density_for(density.as_ref()) {
                        None => out.push(format!("{ctx}: no density spec here or under analysis.density")),
                        Some(spec) => {
                            check_t(&ctx, spec.t, &mut out);
                            if let Err(err) = spec.region.check() {
                                out.push(format!("{ctx}: {err}"));
                            }
                            if spec.resolution[0] == 0 || spec.resolution[1] == 0 {
                                out.push(format!("{ctx}: resolution must be positive"));
                            }
                        }
                    }
                    for name in overlay {
                        if !runs.contains(name) {
                            out.push(format!(
                                "{ctx}: overlay `{name}` is not an earlier trajectory experiment"
                            ));
                        }
                    }
                }
                Experiment::Modes { timesteps, .. } => {
                    if timesteps.is_empty() {
                        out.push(format!("{ctx}: timesteps must not be empty"));
                    }
                    for &t in timesteps {
                        check_t(&ctx, t, &mut out);
                    }
                }
                Experiment::LossProbe {
                    points,
                    timesteps,
                    n_samples,
                    ..
                } => {
                    if points.is_empty() || timesteps.is_empty() {
                        out.push(format!("{ctx}: points and timesteps must not be empty"));
                    }
                    for p in points {
                        if p.len() != d {
                            out.push(format!("{ctx}: point has dimension {} (mixture has {d})", p.len()));
                        }
                    }
                    for &t in timesteps {
                        if t >= horizon {
                            out.push(format!("{ctx}: timestep {t} has α_t = 0 (must be < {horizon})"));
                        }
                    }
                    if n_samples.is_some_and(|n| n < 2) {
                        out.push(format!("{ctx}: n_samples must be at least 2"));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SsdError::InvalidConfig(v.join("; ")))
        }
    }
}
