//! Monte-Carlo statistics over timesteps, mode finding on noised marginals,
//! density rasters and the SDS loss diagnostic.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsdError};
use crate::estimators::{optimal_c_from_samples, projection_ratio, variance_reduced, DistillationTarget};
use crate::gmm::GaussianMixture;
use crate::moments::{normal_vector, seeded_stream, total_variance, trace_correlation};
use crate::schedule::Timestep;
use crate::simulator::Weighting;

/// Distinct modes closer than this are merged.
pub const MODE_TOLERANCE: f64 = 1e-3;
/// Ascent stops once `‖∇ log p‖` falls below this.
pub const SCORE_TOLERANCE: f64 = 1e-8;
const MAX_ASCENT_ITERS: usize = 2000;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRecord {
    pub t: Timestep,
    pub mean_norm_eps_hat: f64,
    pub mean_norm_h: f64,
    pub correlation: f64,
    pub c: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl StatRecord {
    pub fn bracketed(&self) -> bool {
        self.r_min <= self.c && self.c <= self.r_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatSweep {
    pub timesteps: Vec<Timestep>,
    pub per_t: Vec<StatRecord>,
    pub n_samples: usize,
    pub probe_x0: Vec<f64>,
}

impl StatSweep {
    /// Timesteps where `c` falls outside `[min r, max r]`.
    pub fn bracket_violations(&self) -> Vec<Timestep> {
        self.per_t.iter().filter(|r| !r.bracketed()).map(|r| r.t).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "norm_eps_hat", "norm_h", "correlation", "c", "r_min", "r_max"])?;
        for r in &self.per_t {
            w.write_record([
                r.t.to_string(),
                r.mean_norm_eps_hat.to_string(),
                r.mean_norm_h.to_string(),
                r.correlation.to_string(),
                r.c.to_string(),
                r.r_min.to_string(),
                r.r_max.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` evenly spaced integer timesteps covering `[1, T − 1]`.
pub fn sweep_grid(horizon: Timestep, n: usize) -> Result<Vec<Timestep>> {
    if n < 2 || horizon < 2 {
        return Err(SsdError::InvalidGrid(format!(
            "need at least 2 points on a horizon of at least 2 (got {n} on T = {horizon})"
        )));
    }
    let span = (horizon - 2) as f64;
    let mut grid: Vec<Timestep> = (0..n)
        .map(|i| (1.0 + i as f64 * span / (n - 1) as f64).round() as Timestep)
        .collect();
    grid.dedup();
    Ok(grid)
}

/// A probe point drawn from the conditional mixture.
pub fn sample_probe(target: &DistillationTarget, seed: u64) -> Vec<f64> {
    let mut rng = seeded_stream(seed, 0);
    target.conditional().sample(&mut rng).iter().copied().collect()
}

/// Statistics of `ε̂`, `h` and `r` at each timestep. Timestep `t` draws its
/// noises from stream `t` of `seed`.
pub fn stat_sweep(
    target: &DistillationTarget,
    probe_x0: &[f64],
    timesteps: &[Timestep],
    n_samples: usize,
    seed: u64,
) -> Result<StatSweep> {
    if n_samples < 2 {
        return Err(SsdError::TooFewSamples(n_samples));
    }
    let d = target.dim();
    if probe_x0.len() != d {
        return Err(SsdError::DimensionMismatch {
            expected: d,
            got: probe_x0.len(),
        });
    }
    let x0 = DVector::from_column_slice(probe_x0);
    let per_t = timesteps
        .par_iter()
        .map(|&t| {
            let noised = target.at(t)?;
            let mut rng = seeded_stream(seed, t as u64);
            let mut eps = Vec::with_capacity(n_samples);
            let mut eps_hat = Vec::with_capacity(n_samples);
            let mut norm_h = 0.0;
            let mut r_min = f64::INFINITY;
            let mut r_max = f64::NEG_INFINITY;
            for _ in 0..n_samples {
                let e = normal_vector(&mut rng, d);
                let xt = noised.noise(&x0, &e)?;
                let cond = noised.eps_hat(&xt, true)?;
                let uncond = noised.eps_hat(&xt, false)?;
                norm_h += (&cond - &uncond).norm();
                let r = projection_ratio(&cond, &e)?;
                r_min = r_min.min(r);
                r_max = r_max.max(r);
                eps.push(e);
                eps_hat.push(cond);
            }
            let n = n_samples as f64;
            Ok(StatRecord {
                t,
                mean_norm_eps_hat: eps_hat.iter().map(|v| v.norm()).sum::<f64>() / n,
                mean_norm_h: norm_h / n,
                correlation: trace_correlation(&eps_hat, &eps),
                c: optimal_c_from_samples(&eps_hat, &eps)?,
                r_min,
                r_max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StatSweep {
        timesteps: timesteps.to_vec(),
        per_t,
        n_samples,
        probe_x0: probe_x0.to_vec(),
    })
}

/// Total variances of the mode-seeking term and its residual forms over one
/// shared noise set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualVariances {
    pub t: Timestep,
    pub c: f64,
    /// `ε̂`
    pub eps_hat: f64,
    /// `ε̂ − ε`
    pub naive: f64,
    /// `ε̂ − rε` with per-sample `r`
    pub adaptive: f64,
    /// `ε̂ − cε`
    pub constant_c: f64,
}

pub fn residual_variances(
    target: &DistillationTarget,
    x0: &[f64],
    t: Timestep,
    n_samples: usize,
    seed: u64,
) -> Result<ResidualVariances> {
    if n_samples < 2 {
        return Err(SsdError::TooFewSamples(n_samples));
    }
    let d = target.dim();
    if x0.len() != d {
        return Err(SsdError::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    let x0 = DVector::from_column_slice(x0);
    let noised = target.at(t)?;
    let mut rng = seeded_stream(seed, t as u64);
    let mut eps = Vec::with_capacity(n_samples);
    let mut eps_hat = Vec::with_capacity(n_samples);
    let mut adaptive = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let e = normal_vector(&mut rng, d);
        let v = noised.mode_seeking(&x0, &e)?;
        adaptive.push(variance_reduced(&v, &e)?.0);
        eps.push(e);
        eps_hat.push(v);
    }
    let c = optimal_c_from_samples(&eps_hat, &eps)?;
    let shifted = |k: f64| -> Vec<DVector<f64>> { eps_hat.iter().zip(&eps).map(|(v, e)| v - e * k).collect() };
    Ok(ResidualVariances {
        t,
        c,
        eps_hat: total_variance(&eps_hat),
        naive: total_variance(&shifted(1.0)),
        adaptive: total_variance(&adaptive),
        constant_c: total_variance(&shifted(c)),
    })
}

/// Axis-aligned rectangle in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        let r = Self { min, max };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<()> {
        let ok = (0..2).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]);
        if ok {
            Ok(())
        } else {
            Err(SsdError::InvalidGrid(format!(
                "region must have finite bounds with min < max (got {:?} .. {:?})",
                self.min, self.max
            )))
        }
    }

    /// Bounding box of the component means, padded by `k` of the widest
    /// component standard deviation.
    pub fn around(mixture: &GaussianMixture, k: f64) -> Result<Self> {
        if mixture.dim() != 2 {
            return Err(SsdError::DimensionMismatch {
                expected: 2,
                got: mixture.dim(),
            });
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for c in mixture.components() {
            for i in 0..2 {
                let pad = k * c.covariance()[(i, i)].sqrt();
                min[i] = min[i].min(c.mean()[i] - pad);
                max[i] = max[i].max(c.mean()[i] + pad);
            }
        }
        Self::new(min, max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSearch {
    /// Grid seeding for 2-D mixtures; `None` seeds from means and midpoints only.
    pub region: Option<Region>,
    pub resolution: usize,
}

impl ModeSearch {
    pub fn grid(region: Region, resolution: usize) -> Self {
        Self {
            region: Some(region),
            resolution,
        }
    }

    /// Grid over the means ± 3 std for 2-D mixtures, otherwise means and
    /// midpoints.
    pub fn automatic(mixture: &GaussianMixture) -> Result<Self> {
        if mixture.dim() == 2 {
            Ok(Self::grid(Region::around(mixture, 3.0)?, 16))
        } else {
            Ok(Self {
                region: None,
                resolution: 0,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mode {
    pub point: Vec<f64>,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSet {
    /// Sorted by decreasing log-density.
    pub modes: Vec<Mode>,
    pub tolerance: f64,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.modes.first().map_or(0, |m| m.point.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["index".to_string()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.push("log_density".into());
        w.write_record(&header)?;
        for (i, m) in self.modes.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(m.point.iter().map(|v| v.to_string()));
            row.push(m.log_density.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn seeds(mixture: &GaussianMixture, search: &ModeSearch) -> Result<Vec<DVector<f64>>> {
    let means: Vec<_> = mixture.components().iter().map(|c| c.mean().clone()).collect();
    let mut out = means.clone();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            out.push((&means[i] + &means[j]) * 0.5);
        }
    }
    if let Some(region) = search.region {
        if mixture.dim() != 2 {
            return Err(SsdError::DimensionMismatch {
                expected: 2,
                got: mixture.dim(),
            });
        }
        region.check()?;
        if search.resolution == 0 {
            return Err(SsdError::InvalidGrid("resolution must be positive".into()));
        }
        let n = search.resolution;
        let step = [
            (region.max[0] - region.min[0]) / n as f64,
            (region.max[1] - region.min[1]) / n as f64,
        ];
        for iy in 0..n {
            for ix in 0..n {
                out.push(DVector::from_vec(vec![
                    region.min[0] + (ix as f64 + 0.5) * step[0],
                    region.min[1] + (iy as f64 + 0.5) * step[1],
                ]));
            }
        }
    }
    Ok(out)
}

fn negative_definite(h: &DMatrix<f64>) -> bool {
    SymmetricEigen::new(h.clone()).eigenvalues.iter().all(|&l| l < 0.0)
}

/// Newton steps where the Hessian is negative definite, gradient steps
/// elsewhere, both with backtracking on log-density.
fn ascend(mixture: &GaussianMixture, start: &DVector<f64>) -> Result<Option<DVector<f64>>> {
    let mut x = start.clone();
    let mut lp = mixture.log_density(&x)?;
    for _ in 0..MAX_ASCENT_ITERS {
        let g = mixture.score(&x)?;
        let gnorm = g.norm();
        if gnorm < SCORE_TOLERANCE {
            return Ok(Some(x));
        }
        let neg_h = -mixture.hessian(&x)?;
        let newton = neg_h.cholesky().map(|c| c.solve(&g));
        // Close to a maximum the predicted gain drops below log-density
        // round-off, so the line search is skipped.
        if let (Some(dir), true) = (&newton, gnorm < 1e-6) {
            x += dir;
            lp = mixture.log_density(&x)?;
            continue;
        }
        let dir = newton.unwrap_or_else(|| g.clone());
        let slope = g.dot(&dir);
        let mut step = 1.0;
        loop {
            let cand = &x + &dir * step;
            let lc = mixture.log_density(&cand)?;
            if lc >= lp + ARMIJO * step * slope {
                x = cand;
                lp = lc;
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                return Ok(None);
            }
        }
    }
    Ok(None)
}

/// Local maxima of the mixture density reached from the search seeds.
pub fn find_modes(mixture: &GaussianMixture, search: &ModeSearch) -> Result<ModeSet> {
    let starts = seeds(mixture, search)?;
    let converged = starts
        .par_iter()
        .map(|s| ascend(mixture, s))
        .collect::<Result<Vec<_>>>()?;
    let mut any = false;
    let mut modes: Vec<Mode> = Vec::new();
    for x in converged.into_iter().flatten() {
        any = true;
        if !negative_definite(&mixture.hessian(&x)?) {
            continue;
        }
        if modes
            .iter()
            .any(|m| (DVector::from_column_slice(&m.point) - &x).norm() <= MODE_TOLERANCE)
        {
            continue;
        }
        modes.push(Mode {
            log_density: mixture.log_density(&x)?,
            point: x.iter().copied().collect(),
        });
    }
    if !any {
        return Err(SsdError::NoConvergence);
    }
    modes.sort_by(|a, b| b.log_density.total_cmp(&a.log_density));
    Ok(ModeSet {
        modes,
        tolerance: MODE_TOLERANCE,
    })
}

/// Modes of the noised conditional marginal at `t`, seeded automatically.
pub fn conditional_modes(target: &DistillationTarget, t: Timestep) -> Result<ModeSet> {
    let noised = target.conditional().noised_marginal(target.schedule(), t)?;
    find_modes(&noised, &ModeSearch::automatic(&noised)?)
}

/// Smallest `t` at which the noised conditional marginal has one mode.
pub fn transient_onset(target: &DistillationTarget) -> Result<Timestep> {
    let count = |t| conditional_modes(target, t).map(|m| m.len());
    if count(1)? <= 1 {
        return Err(SsdError::NoBimodalRegime);
    }
    let (mut lo, mut hi) = (1, target.horizon());
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid)? <= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Row-major raster: `values[iy * nx + ix]` sits at
/// `origin + (ix·spacing[0], iy·spacing[1])`, the pixel centre.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub t: Timestep,
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
        ]
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// Pixel index `(ix, iy)` of the largest value.
    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) =
            self.values.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            );
        (i % self.nx, i / self.nx)
    }

    /// Riemann sum of the density over the raster.
    pub fn integral(&self) -> f64 {
        self.values.iter().map(|v| v.exp()).sum::<f64>() * self.spacing[0] * self.spacing[1]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["ix", "iy", "x", "y", "log_density"])?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let [x, y] = self.center(ix, iy);
                w.write_record([
                    ix.to_string(),
                    iy.to_string(),
                    x.to_string(),
                    y.to_string(),
                    self.value(ix, iy).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Log-density of the noised conditional marginal at the pixel centres of
/// `region`, `resolution = [nx, ny]`.
pub fn density_map(
    target: &DistillationTarget,
    t: Timestep,
    region: &Region,
    resolution: [usize; 2],
) -> Result<DensityGrid> {
    if resolution[0] == 0 || resolution[1] == 0 {
        return Err(SsdError::InvalidGrid(format!(
            "resolution must be positive (got {}x{})",
            resolution[0], resolution[1]
        )));
    }
    region.check()?;
    if target.dim() != 2 {
        return Err(SsdError::DimensionMismatch {
            expected: 2,
            got: target.dim(),
        });
    }
    let noised = target.conditional().noised_marginal(target.schedule(), t)?;
    let [nx, ny] = resolution;
    let spacing = [
        (region.max[0] - region.min[0]) / nx as f64,
        (region.max[1] - region.min[1]) / ny as f64,
    ];
    let origin = [region.min[0] + spacing[0] / 2.0, region.min[1] + spacing[1] / 2.0];
    let rows = (0..ny)
        .into_par_iter()
        .map(|iy| {
            (0..nx)
                .map(|ix| {
                    let p = DVector::from_vec(vec![
                        origin[0] + ix as f64 * spacing[0],
                        origin[1] + iy as f64 * spacing[1],
                    ]);
                    noised.log_density(&p)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityGrid {
        t,
        origin,
        spacing,
        nx,
        ny,
        values: rows.concat(),
    })
}

/// `(σ_t/α_t)·w(t)·KL(N(α_t x0, σ_t² I) ‖ p_t(·|y))`, the KL estimated from
/// `n_samples` draws of the first argument. Zero at `t = 0`, where the weight
/// vanishes.
pub fn sds_loss_estimate(
    target: &DistillationTarget,
    x0: &[f64],
    t: Timestep,
    n_samples: usize,
    seed: u64,
    weighting: Weighting,
) -> Result<f64> {
    let (alpha, sigma) = target.schedule().coefficients(t)?;
    if alpha == 0.0 {
        return Err(SsdError::TerminalWeight);
    }
    if n_samples < 2 {
        return Err(SsdError::TooFewSamples(n_samples));
    }
    let d = target.dim();
    if x0.len() != d {
        return Err(SsdError::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let x0 = DVector::from_column_slice(x0);
    let noised = target.conditional().noised_marginal(target.schedule(), t)?;
    let mut rng = seeded_stream(seed, t as u64);
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let mut kl = 0.0;
    for _ in 0..n_samples {
        let e = normal_vector(&mut rng, d);
        let z = &x0 * alpha + &e * sigma;
        kl += log_norm - 0.5 * e.norm_squared() - noised.log_density(&z)?;
    }
    kl /= n_samples as f64;
    Ok(sigma / alpha * weighting.factor(sigma) * kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianComponent;
    use crate::schedule::{DiffusionSchedule, ScheduleKind};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn cosine() -> DiffusionSchedule {
        DiffusionSchedule::new(ScheduleKind::Cosine, 1000).unwrap()
    }

    fn toy() -> DistillationTarget {
        DistillationTarget::new(GaussianMixture::three_mode_toy(), cosine()).unwrap()
    }

    fn single(mean: &[f64], var: f64) -> GaussianMixture {
        GaussianMixture::fully_conditional(vec![GaussianComponent::isotropic(1.0, v(mean), var).unwrap()]).unwrap()
    }

    fn pair_1d(offset: f64, var: f64) -> DistillationTarget {
        let m = GaussianMixture::fully_conditional(vec![
            GaussianComponent::isotropic(0.5, v(&[-offset]), var).unwrap(),
            GaussianComponent::isotropic(0.5, v(&[offset]), var).unwrap(),
        ])
        .unwrap();
        DistillationTarget::new(m, cosine()).unwrap()
    }

    #[test]
    fn grid_covers_the_interior() {
        let g = sweep_grid(1000, 20).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!((g[0], g[19]), (1, 999));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(sweep_grid(1000, 1).is_err());
    }

    #[test]
    fn sweep_endpoints() {
        let target = toy();
        let sweep = stat_sweep(&target, &[1.2, 0.9], &[1, 500, 1000], 4096, 3).unwrap();
        assert_eq!(sweep.n_samples, 4096);
        let last = &sweep.per_t[2];
        assert!((last.correlation - 1.0).abs() < 1e-6);
        assert!((last.c - 1.0).abs() < 5.0 / 4096f64.sqrt());
        assert!(last.mean_norm_h < 1e-6);
        // Near t = 0 the conditional predictor barely responds to ε in scale.
        assert!(sweep.per_t[0].c < 1e-2);
        assert!(sweep.bracket_violations().is_empty());
        assert!(matches!(
            stat_sweep(&target, &[0.0, 0.0], &[5], 1, 0),
            Err(SsdError::TooFewSamples(1))
        ));
    }

    #[test]
    fn sweep_is_order_independent() {
        let target = toy();
        let a = stat_sweep(&target, &[1.0, 1.0], &[100, 700], 256, 9).unwrap();
        let b = stat_sweep(&target, &[1.0, 1.0], &[700], 256, 9).unwrap();
        assert_eq!(a.per_t[1], b.per_t[0]);
    }

    #[test]
    fn naive_residual_blows_up_near_clean() {
        let rv = residual_variances(&toy(), &[1.0, 1.0], 1, 8192, 0).unwrap();
        assert!(rv.naive > 10.0 * rv.eps_hat);
        assert!(rv.constant_c <= rv.eps_hat);
        assert!(rv.constant_c <= rv.naive);
    }

    #[test]
    fn single_gaussian_has_one_mode() {
        let m = single(&[0.3, -0.7], 0.5);
        let search = ModeSearch::grid(Region::new([-3.0, -3.0], [3.0, 3.0]).unwrap(), 8);
        let modes = find_modes(&m, &search).unwrap();
        assert_eq!(modes.len(), 1);
        assert!((v(&modes.modes[0].point) - v(&[0.3, -0.7])).amax() < 1e-6);
    }

    #[test]
    fn toy_conditional_modes() {
        let target = toy();
        let at0 = find_modes(
            target.conditional(),
            &ModeSearch::automatic(target.conditional()).unwrap(),
        )
        .unwrap();
        assert_eq!(at0.len(), 2);
        let mut pts: Vec<_> = at0.modes.iter().map(|m| v(&m.point)).collect();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((&pts[0] - v(&[1.0, 1.0])).amax() < 1e-3);
        assert!((&pts[1] - v(&[2.0, 1.0])).amax() < 1e-3);

        let at350 = conditional_modes(&target, 350).unwrap();
        assert_eq!(at350.len(), 1);
        let alpha = target.schedule().alpha(350).unwrap();
        let pre = v(&at350.modes[0].point) / alpha;
        assert!(pre[0] > 1.0 && pre[0] < 2.0);
        assert!((pre[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn modes_stable_under_refinement() {
        let target = toy();
        let m = target.conditional().noised_marginal(target.schedule(), 150).unwrap();
        let region = Region::around(&m, 3.0).unwrap();
        let coarse = find_modes(&m, &ModeSearch::grid(region, 10)).unwrap();
        let fine = find_modes(&m, &ModeSearch::grid(region, 20)).unwrap();
        assert_eq!(coarse.len(), fine.len());
        for (a, b) in coarse.modes.iter().zip(&fine.modes) {
            assert!((v(&a.point) - v(&b.point)).amax() < 1e-5);
        }
    }

    #[test]
    fn reported_modes_are_stationary() {
        let target = toy();
        for t in [0, 50, 200, 600] {
            let m = target.mixture().noised_marginal(target.schedule(), t).unwrap();
            let set = find_modes(&m, &ModeSearch::automatic(&m).unwrap()).unwrap();
            for mode in &set.modes {
                assert!(m.score(&v(&mode.point)).unwrap().norm() < 1e-6);
            }
            for (i, a) in set.modes.iter().enumerate() {
                for b in &set.modes[i + 1..] {
                    assert!((v(&a.point) - v(&b.point)).norm() > set.tolerance);
                }
            }
        }
    }

    // Brute-force count of strict local maxima on a fine 1-D grid.
    fn scan_count(m: &GaussianMixture, half_width: f64) -> usize {
        let n = 20_001;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64;
                m.log_density(&v(&[x])).unwrap()
            })
            .collect();
        vals.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count()
    }

    #[test]
    fn onset_matches_brute_force_in_one_dimension() {
        let target = pair_1d(10.0, 0.01);
        let onset = transient_onset(&target).unwrap();
        let brute = (1..=1000)
            .find(|&t| {
                let m = target.conditional().noised_marginal(target.schedule(), t).unwrap();
                scan_count(&m, 12.0) == 1
            })
            .unwrap();
        assert!(onset > 900, "onset {onset}");
        assert!(onset.abs_diff(brute) <= 1, "onset {onset} vs scan {brute}");
    }

    #[test]
    fn coincident_components_have_no_bimodal_regime() {
        let target = pair_1d(0.0, 0.2);
        assert!(matches!(transient_onset(&target), Err(SsdError::NoBimodalRegime)));
    }

    #[test]
    fn toy_onset_regression() {
        let onset = transient_onset(&toy()).unwrap();
        assert!(onset < 350);
        assert_eq!(onset, TOY_ONSET);
    }

    const TOY_ONSET: Timestep = 262;

    #[test]
    fn density_map_cases() {
        let target = DistillationTarget::new(single(&[0.4, -0.2], 0.3), cosine()).unwrap();
        let region = Region::new([-2.0, -2.0], [2.0, 2.0]).unwrap();
        let grid = density_map(&target, 0, &region, [80, 80]).unwrap();
        let (ix, iy) = grid.argmax();
        let c = grid.center(ix, iy);
        assert!((c[0] - 0.4).abs() <= grid.spacing[0] && (c[1] + 0.2).abs() <= grid.spacing[1]);
        assert!(grid.values.iter().all(|x| x.is_finite()));
        assert!(matches!(
            density_map(&target, 0, &region, [0, 4]),
            Err(SsdError::InvalidGrid(_))
        ));
    }

    #[test]
    fn toy_density_map_peaks_at_the_transient_mode() {
        let target = toy();
        let region = Region::new([-3.0, -3.0], [3.0, 3.0]).unwrap();
        let grid = density_map(&target, 350, &region, [240, 240]).unwrap();
        assert!(grid.values.iter().all(|x| x.is_finite()));
        let peak = v(&grid.center(grid.argmax().0, grid.argmax().1));
        let a = target.schedule().alpha(350).unwrap();
        let trap = (&peak - v(&[1.5, 1.0]) * a).norm();
        assert!(trap < (&peak - v(&[1.0, 1.0]) * a).norm());
        assert!(trap < (&peak - v(&[2.0, 1.0]) * a).norm());
        assert!(grid.integral() <= 1.02);
        assert!(grid.integral() >= 0.95);
    }

    #[test]
    fn loss_cases() {
        let target = DistillationTarget::new(single(&[0.5, 0.5], 0.2), cosine()).unwrap();
        let at_mean = sds_loss_estimate(&target, &[0.5, 0.5], 300, 4096, 1, Weighting::Constant).unwrap();
        let near = sds_loss_estimate(&target, &[0.7, 0.5], 300, 4096, 1, Weighting::Constant).unwrap();
        let off = sds_loss_estimate(&target, &[1.5, 0.5], 300, 4096, 1, Weighting::Constant).unwrap();
        assert!(at_mean < near && near < off);
        assert!(matches!(
            sds_loss_estimate(&target, &[0.5, 0.5], 1000, 16, 1, Weighting::Constant),
            Err(SsdError::TerminalWeight)
        ));

        let toy = toy();
        let trap = sds_loss_estimate(&toy, &[1.5, 1.0], 700, 8192, 2, Weighting::Constant).unwrap();
        let mode = sds_loss_estimate(&toy, &[1.0, 1.0], 700, 8192, 2, Weighting::Constant).unwrap();
        assert!(trap < mode);
    }
}
