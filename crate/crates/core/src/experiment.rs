//! Executes the experiments of a config and writes their artifacts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::analysis::{self, DensityGrid, ModeSet};
use crate::config::{Experiment, ExperimentConfig};
use crate::error::{Result, SsdError};
use crate::estimators::{EstimatorKind, EstimatorSpec};
use crate::simulator::{run_seeds, Trajectory};
use crate::svg::{self, Marker, Overlay};

const OVERLAY_COLORS: [&str; 6] = ["#ff4040", "#ffffff", "#40c0ff", "#c040ff", "#ffa000", "#00ff80"];

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub item: String,
    pub value: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub summary: Vec<SummaryRow>,
}

impl RunReport {
    pub fn table(&self) -> String {
        let w0 = self
            .summary
            .iter()
            .map(|r| r.experiment.len())
            .max()
            .unwrap_or(0)
            .max(10);
        let w1 = self.summary.iter().map(|r| r.item.len()).max().unwrap_or(0).max(4);
        let mut s = format!("{:<w0$}  {:<w1$}  value\n", "experiment", "item");
        for r in &self.summary {
            s.push_str(&format!("{:<w0$}  {:<w1$}  {}\n", r.experiment, r.item, r.value));
        }
        s
    }
}

fn seeds(config: &ExperimentConfig, options: &RunOptions) -> Vec<u64> {
    options.seed_override.map_or_else(|| config.seeds.clone(), |s| vec![s])
}

/// Artifact file names a run would write, in write order.
pub fn planned_artifacts(config: &ExperimentConfig, options: &RunOptions) -> Vec<String> {
    let seeds = seeds(config, options);
    let mut out = Vec::new();
    for e in &config.experiments {
        let label = e.label();
        match e {
            Experiment::Trajectory { .. } | Experiment::TrapEscape { .. } => {
                out.extend(seeds.iter().map(|s| format!("{label}_seed{s}.csv")));
            }
            Experiment::Sweep { .. } | Experiment::LossProbe { .. } => out.push(format!("{label}.csv")),
            Experiment::DensityMap { .. } => {
                out.push(format!("{label}.csv"));
                out.push(format!("{label}.svg"));
            }
            Experiment::Modes { timesteps, .. } => {
                out.extend(timesteps.iter().map(|t| format!("{label}_t{t}.csv")));
            }
        }
    }
    out
}

struct Writer {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Writer {
    fn create(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(path);
        Ok(())
    }
}

fn fmt_point(p: &DVector<f64>) -> String {
    let parts: Vec<String> = p.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Runs every experiment in order. Trajectory files of a divergent run are
/// still written (the divergent seed up to its last finite point) before the
/// divergence is returned.
pub fn run(config: &ExperimentConfig, options: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    let out_dir = options
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));
    let planned = planned_artifacts(config, options);
    if !options.overwrite {
        if let Some(existing) = planned.iter().map(|n| out_dir.join(n)).find(|p| p.exists()) {
            return Err(SsdError::ArtifactExists(existing.display().to_string()));
        }
    }
    std::fs::create_dir_all(&out_dir)?;

    let target = config.target()?;
    let seeds = seeds(config, options);
    let mut writer = Writer {
        dir: out_dir.clone(),
        written: Vec::new(),
    };
    let mut summary = Vec::new();
    let mut row = |experiment: &str, item: String, value: String| {
        summary.push(SummaryRow {
            experiment: experiment.to_string(),
            item,
            value,
        })
    };
    let mut runs: HashMap<String, Vec<Trajectory>> = HashMap::new();
    let conditional_means: Vec<DVector<f64>> = target
        .conditional()
        .components()
        .iter()
        .map(|c| c.mean().clone())
        .collect();

    for e in &config.experiments {
        let label = e.label();
        match e {
            Experiment::Trajectory { .. } | Experiment::TrapEscape { .. } => {
                let (spec, opt) = match e {
                    Experiment::Trajectory {
                        estimator, optimizer, ..
                    } => (
                        estimator.unwrap_or(config.estimator),
                        config.optimizer_for(optimizer.as_ref()),
                    ),
                    Experiment::TrapEscape {
                        init_theta, optimizer, ..
                    } => {
                        let mut o = config.optimizer_for(optimizer.as_ref());
                        o.init_theta = init_theta.clone();
                        (EstimatorSpec::new(EstimatorKind::ModeDisengaging), o)
                    }
                    _ => unreachable!(),
                };
                let anchor = DVector::from_vec(opt.init_theta.clone());
                let results = run_seeds(&target, &spec, &opt, &seeds);
                let mut done = Vec::new();
                let mut failure = None;
                for (seed, res) in seeds.iter().zip(results) {
                    let traj = match res {
                        Ok(t) => t,
                        Err(SsdError::Divergence { step, partial }) => {
                            writer.create(&format!("{label}_seed{seed}.csv"), |w| partial.write_csv(w))?;
                            row(label, format!("seed {seed}"), format!("diverged at step {step}"));
                            failure.get_or_insert(SsdError::Divergence { step, partial });
                            continue;
                        }
                        Err(other) => return Err(other),
                    };
                    writer.create(&format!("{label}_seed{seed}.csv"), |w| traj.write_csv(w))?;
                    let end = traj.final_point();
                    let nearest = conditional_means
                        .iter()
                        .map(|m| (end - m).norm())
                        .fold(f64::INFINITY, f64::min);
                    let value = if matches!(e, Experiment::TrapEscape { .. }) {
                        format!(
                            "final {} max displacement {:.4}",
                            fmt_point(end),
                            traj.max_distance_from(&anchor)
                        )
                    } else {
                        format!("final {} nearest conditional mean {nearest:.4}", fmt_point(end))
                    };
                    row(label, format!("seed {seed}"), value);
                    done.push(traj);
                }
                if let Some(err) = failure {
                    return Err(err);
                }
                runs.insert(label.to_string(), done);
            }
            Experiment::Sweep {
                timesteps,
                probe_x0,
                n_samples,
                ..
            } => {
                let grid = match timesteps {
                    Some(t) => t.clone(),
                    None => analysis::sweep_grid(target.horizon(), config.analysis.grid_points)?,
                };
                let probe = probe_x0
                    .clone()
                    .unwrap_or_else(|| analysis::sample_probe(&target, config.analysis.probe_seed));
                let n = n_samples.unwrap_or(config.analysis.n_samples);
                let sweep = analysis::stat_sweep(&target, &probe, &grid, n, seeds[0])?;
                writer.create(&format!("{label}.csv"), |w| sweep.write_csv(w))?;
                row(label, "probe_x0".into(), fmt_point(&DVector::from_vec(probe)));
                row(label, "timesteps".into(), format!("{} x {n} samples", grid.len()));
                let violations = sweep.bracket_violations();
                row(label, "c outside [min r, max r]".into(), format!("{violations:?}"));
            }
            Experiment::DensityMap { density, overlay, .. } => {
                let spec = config.density_for(density.as_ref()).expect("validated density spec");
                let grid = analysis::density_map(&target, spec.t, &spec.region, spec.resolution)?;
                let alpha = target.schedule().alpha(spec.t)?;
                writer.create(&format!("{label}.csv"), |w| grid.write_csv(w))?;
                let overlays = overlay_paths(&runs, overlay, alpha);
                let markers = induced_modes(&target, alpha);
                let title = format!("{} at t = {}", config.name, spec.t);
                let svg_text = svg::render_density(&grid, &title, &overlays, &markers);
                writer.create(&format!("{label}.svg"), |w| Ok(w.write_all(svg_text.as_bytes())?))?;
                summarize_grid(&grid, label, &mut row);
            }
            Experiment::Modes { timesteps, onset, .. } => {
                let sets = timesteps
                    .par_iter()
                    .map(|&t| analysis::conditional_modes(&target, t))
                    .collect::<Result<Vec<ModeSet>>>()?;
                for (t, set) in timesteps.iter().zip(&sets) {
                    writer.create(&format!("{label}_t{t}.csv"), |w| set.write_csv(w))?;
                    let pts: Vec<String> = set
                        .modes
                        .iter()
                        .map(|m| fmt_point(&DVector::from_vec(m.point.clone())))
                        .collect();
                    row(
                        label,
                        format!("t = {t}"),
                        format!("{} mode(s) {}", set.len(), pts.join(" ")),
                    );
                }
                if *onset {
                    let value = match analysis::transient_onset(&target) {
                        Ok(t) => t.to_string(),
                        Err(err) => err.to_string(),
                    };
                    row(label, "transient onset".into(), value);
                }
            }
            Experiment::LossProbe {
                points,
                timesteps,
                n_samples,
                w_of_t,
                ..
            } => {
                let n = n_samples.unwrap_or(config.analysis.n_samples);
                let mut rows = Vec::new();
                for p in points {
                    for &t in timesteps {
                        let loss = analysis::sds_loss_estimate(&target, p, t, n, seeds[0], *w_of_t)?;
                        rows.push((p.clone(), t, loss));
                    }
                }
                writer.create(&format!("{label}.csv"), |w| {
                    let mut c = csv::Writer::from_writer(w);
                    let d = target.dim();
                    let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
                    header.extend(["t".into(), "loss".into()]);
                    c.write_record(&header)?;
                    for (p, t, loss) in &rows {
                        let mut rec: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                        rec.push(t.to_string());
                        rec.push(loss.to_string());
                        c.write_record(&rec)?;
                    }
                    c.flush()?;
                    Ok(())
                })?;
                for (p, t, loss) in &rows {
                    row(
                        label,
                        format!("{} t = {t}", fmt_point(&DVector::from_vec(p.clone()))),
                        format!("{loss:.6}"),
                    );
                }
            }
        }
    }
    Ok(RunReport {
        out_dir,
        artifacts: writer.written,
        summary,
    })
}

fn overlay_paths(runs: &HashMap<String, Vec<Trajectory>>, names: &[String], alpha: f64) -> Vec<Overlay> {
    names
        .iter()
        .enumerate()
        .filter_map(|(i, name)| {
            let traj = runs.get(name)?.first()?;
            Some(Overlay {
                label: name.clone(),
                color: OVERLAY_COLORS[i % OVERLAY_COLORS.len()].to_string(),
                points: traj.points.iter().map(|p| [alpha * p[0], alpha * p[1]]).collect(),
            })
        })
        .collect()
}

fn induced_modes(target: &crate::estimators::DistillationTarget, alpha: f64) -> Vec<Marker> {
    target
        .mixture()
        .components()
        .iter()
        .map(|c| Marker {
            label: format!("α·[{}, {}]", c.mean()[0], c.mean()[1]),
            at: [alpha * c.mean()[0], alpha * c.mean()[1]],
        })
        .collect()
}

fn summarize_grid(grid: &DensityGrid, label: &str, row: &mut impl FnMut(&str, String, String)) {
    let (ix, iy) = grid.argmax();
    let [x, y] = grid.center(ix, iy);
    row(label, "argmax pixel".into(), format!("[{x:.4}, {y:.4}]"));
    row(label, "integral".into(), format!("{:.4}", grid.integral()));
}
