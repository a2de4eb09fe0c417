//! Variance-preserving forward-process coefficients over integer timesteps.
//!
//! A sample is noised as `x_t = α_t·x + σ_t·ε`. Both supported families are
//! variance preserving (`α_t² + σ_t² = 1`) and have their endpoints clamped to
//! `(α_0, σ_0) = (1, 0)` and `(α_T, σ_T) = (0, 1)`.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsdError};

pub type Timestep = u32;

/// Offset of the cosine schedule; keeps β small near t = 0.
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    LinearBeta,
}

impl FromStr for ScheduleKind {
    type Err = SsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear_beta" | "linear" => Ok(Self::LinearBeta),
            other => Err(SsdError::UnknownSchedule(other.to_string())),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Cosine => f.write_str("cosine"),
            Self::LinearBeta => f.write_str("linear_beta"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    horizon: Timestep,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, horizon: Timestep) -> Result<Self> {
        if horizon < 2 {
            return Err(SsdError::HorizonTooShort(horizon));
        }
        let alpha_bar = match kind {
            ScheduleKind::Cosine => cosine_alpha_bar(horizon),
            ScheduleKind::LinearBeta => linear_beta_alpha_bar(horizon),
        };
        let n = horizon as usize;
        let mut alphas: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let mut sigmas: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        alphas[0] = 1.0;
        sigmas[0] = 0.0;
        alphas[n] = 0.0;
        sigmas[n] = 1.0;
        Ok(Self {
            kind,
            horizon,
            alphas,
            sigmas,
        })
    }

    /// Parses the family tag, then builds the schedule.
    pub fn from_tag(tag: &str, horizon: Timestep) -> Result<Self> {
        Self::new(tag.parse()?, horizon)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> Timestep {
        self.horizon
    }

    pub fn check(&self, t: Timestep) -> Result<()> {
        if t > self.horizon {
            Err(SsdError::TimestepOutOfRange {
                t,
                horizon: self.horizon,
            })
        } else {
            Ok(())
        }
    }

    pub fn alpha(&self, t: Timestep) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t as usize])
    }

    pub fn sigma(&self, t: Timestep) -> Result<f64> {
        self.check(t)?;
        Ok(self.sigmas[t as usize])
    }

    /// `(α_t, σ_t)` in one lookup.
    pub fn coefficients(&self, t: Timestep) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok((self.alphas[t as usize], self.sigmas[t as usize]))
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn forward_noise(&self, x0: &DVector<f64>, epsilon: &DVector<f64>, t: Timestep) -> Result<NoisySample> {
        if x0.len() != epsilon.len() {
            return Err(SsdError::DimensionMismatch {
                expected: x0.len(),
                got: epsilon.len(),
            });
        }
        let (alpha, sigma) = self.coefficients(t)?;
        let xt = x0 * alpha + epsilon * sigma;
        Ok(NoisySample {
            x0: x0.clone(),
            epsilon: epsilon.clone(),
            t,
            xt,
        })
    }

    /// Writes the `t, alpha, sigma` table.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "alpha", "sigma"])?;
        for (t, (a, s)) in self.alphas.iter().zip(&self.sigmas).enumerate() {
            w.write_record([t.to_string(), format!("{a:.17e}"), format!("{s:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x0: DVector<f64>,
    pub epsilon: DVector<f64>,
    pub t: Timestep,
    pub xt: DVector<f64>,
}

fn cosine_alpha_bar(horizon: Timestep) -> Vec<f64> {
    let f = |t: f64| {
        let phase = (t / horizon as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        phase.cos().powi(2)
    };
    let f0 = f(0.0);
    (0..=horizon).map(|t| (f(t as f64) / f0).clamp(0.0, 1.0)).collect()
}

// β ramps linearly from 0.1/T to 20/T (1e-4 to 0.02 at T = 1000), so the
// shape of ᾱ is comparable across horizons.
fn linear_beta_alpha_bar(horizon: Timestep) -> Vec<f64> {
    let n = horizon as f64;
    let (beta_start, beta_end) = (0.1 / n, 20.0 / n);
    let mut out = Vec::with_capacity(horizon as usize + 1);
    let mut acc = 1.0;
    out.push(acc);
    for t in 1..=horizon {
        let frac = if horizon == 1 { 0.0 } else { (t - 1) as f64 / (n - 1.0) };
        let beta = (beta_start + frac * (beta_end - beta_start)).min(0.999);
        acc *= 1.0 - beta;
        out.push(acc);
    }
    out
}
