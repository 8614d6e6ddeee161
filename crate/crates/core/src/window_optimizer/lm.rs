use std::io::Write;

use log::warn;
use nalgebra::DVector;

use super::NormalEquations;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub initial_lambda: f64,
    pub max_iterations: usize,
    pub min_step: f64,
    pub min_relative_decrease: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            initial_lambda: 1e-4,
            max_iterations: 10,
            min_step: 1e-8,
            min_relative_decrease: 1e-6,
        }
    }
}

/// A problem whose Gauss-Newton system has the window's block structure.
pub trait LeastSquaresProblem: Clone {
    fn linearize(&self) -> Result<NormalEquations>;
    fn apply(&mut self, frames: &DVector<f64>, depths: &DVector<f64>, ne: &NormalEquations);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub energy_surfel: f64,
    pub energy_non: f64,
    pub damping: f64,
    pub step_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: Vec<IterationLog>,
    /// Energies after each accepted step (non-increasing).
    pub accepted_energies: Vec<f64>,
}

impl LmReport {
    pub fn write_csv_rows(&self, out: &mut impl Write, solve_id: usize) -> std::io::Result<()> {
        for it in &self.iterations {
            writeln!(
                out,
                "{},{},{:.9e},{:.9e},{:.3e},{:.6e}",
                solve_id, it.iteration, it.energy_surfel, it.energy_non, it.damping, it.step_norm
            )?;
        }
        Ok(())
    }
}

pub const ITERATION_CSV_HEADER: &str = "solve,iteration,energy_surfel,energy_non,damping,step_norm";

/// Multiplicative-damping Levenberg-Marquardt; a step is accepted iff the
/// total energy decreases.
pub fn levenberg_marquardt<P: LeastSquaresProblem>(problem: &mut P, cfg: &LmConfig) -> Result<LmReport> {
    let mut ne = problem.linearize()?;
    let mut energy = ne.energy();
    let mut report = LmReport {
        initial_energy: energy,
        final_energy: energy,
        ..Default::default()
    };
    let mut lambda = cfg.initial_lambda;
    for iteration in 0..cfg.max_iterations {
        let mut accepted = None;
        let mut step_norm = 0.0;
        for _ in 0..30 {
            let Some((df, dd)) = ne.solve(lambda) else {
                lambda *= 2.0;
                continue;
            };
            step_norm = (df.norm_squared() + dd.norm_squared()).sqrt();
            let mut candidate = problem.clone();
            candidate.apply(&df, &dd, &ne);
            let cand_ne = match candidate.linearize() {
                Ok(c) => c,
                Err(Error::NonFinite(_)) => {
                    lambda *= 2.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if cand_ne.energy() < energy {
                lambda *= 0.5;
                accepted = Some((candidate, cand_ne));
                break;
            }
            lambda *= 2.0;
            if step_norm < cfg.min_step {
                break;
            }
        }
        let Some((candidate, cand_ne)) = accepted else {
            report.iterations.push(IterationLog {
                iteration,
                energy_surfel: ne.energy_surfel,
                energy_non: ne.energy_non,
                damping: lambda,
                step_norm: 0.0,
            });
            break;
        };
        let new_energy = cand_ne.energy();
        assert!(new_energy <= energy, "accepted step increased the energy");
        let rel = (energy - new_energy) / energy.max(f64::MIN_POSITIVE);
        *problem = candidate;
        ne = cand_ne;
        energy = new_energy;
        report.accepted_energies.push(energy);
        report.iterations.push(IterationLog {
            iteration,
            energy_surfel: ne.energy_surfel,
            energy_non: ne.energy_non,
            damping: lambda,
            step_norm,
        });
        if step_norm < cfg.min_step || rel < cfg.min_relative_decrease {
            break;
        }
    }
    if !energy.is_finite() {
        warn!("non-finite energy after optimization");
        return Err(Error::NonFinite("energy".into()));
    }
    report.final_energy = energy;
    Ok(report)
}
