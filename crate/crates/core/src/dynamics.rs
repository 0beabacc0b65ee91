//! Vacancy dynamics: incremental-step SET programming and perturbation hops.
//!
//! A SET pulse creates new vacancies at oxygen sites, favoring sites that
//! dissipate the most power in the latest read solve, then lets a few
//! vacancies hop to empty nearest neighbors. Perturbation conserves the
//! vacancy count and moves vacancies by nearest-neighbor or occasional
//! far hops.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{generate_grid, order_parameter, Site, VacancyGrid};
use crate::network::{solve_network, ConductanceModel, SolveResult, DEFAULT_V_READ};
use crate::seed::{derive_seed, rng_from_seed, tag};
use crate::stats;
use crate::tcoeff::{measure_grid, Cell, EnsembleRecord, SweepConfig, TAlphaFit};

/// Trailing window used for the fluctuation metric.
pub const FLUCTUATION_WINDOW: usize = 30;

/// Power floor added to every candidate site, relative to the mean site power.
const POWER_FLOOR_REL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetParams {
    pub target_g: f64,
    pub max_pulses: usize,
    pub vacancies_per_pulse: usize,
    pub redistribution_hops_per_pulse: usize,
    pub power_weighting_exponent: f64,
    pub v_read: f64,
}

impl Default for SetParams {
    fn default() -> Self {
        SetParams {
            target_g: 60e-6,
            max_pulses: 600,
            vacancies_per_pulse: 2,
            redistribution_hops_per_pulse: 20,
            power_weighting_exponent: 1.0,
            v_read: DEFAULT_V_READ,
        }
    }
}

impl SetParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_g > 0.0) {
            return Err(Error::config("target_g must be positive"));
        }
        if self.max_pulses < 1 {
            return Err(Error::config("max_pulses must be at least 1"));
        }
        if !(self.power_weighting_exponent >= 0.0) {
            return Err(Error::config("power_weighting_exponent must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbParams {
    pub steps: usize,
    pub p_far: f64,
    pub r_far: usize,
    pub seed: u64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        PerturbParams {
            steps: 500,
            p_far: 0.05,
            r_far: 5,
            seed: 0,
        }
    }
}

impl PerturbParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_far) {
            return Err(Error::config("p_far must lie in [0, 1]"));
        }
        if self.r_far < 2 {
            return Err(Error::config("r_far must be at least 2"));
        }
        Ok(())
    }
}

/// One SET pulse driven by the site powers of the latest read.
pub fn apply_pulse<R: Rng>(
    grid: &VacancyGrid,
    site_powers: &[f64],
    params: &SetParams,
    rng: &mut R,
) -> Result<VacancyGrid> {
    let mut next = grid.clone();
    let n = grid.n_sites();
    if params.vacancies_per_pulse > 0 {
        if grid.occupied_count() == n {
            return Err(Error::Saturated);
        }
        let mean_power = site_powers.iter().sum::<f64>() / n as f64;
        let floor = (POWER_FLOOR_REL * mean_power).max(f64::MIN_POSITIVE);
        // Normalized by the hottest site so large exponents cannot underflow.
        let scale = site_powers.iter().fold(0.0f64, |m, p| m.max(*p)) + floor;
        let mut weights: Vec<f64> = (0..n)
            .map(|i| {
                if grid.occupancy()[i] {
                    0.0
                } else {
                    ((site_powers[i] + floor) / scale).powf(params.power_weighting_exponent)
                }
            })
            .collect();
        for _ in 0..params.vacancies_per_pulse {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                break;
            }
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    chosen = Some(i);
                    if u < *w {
                        break;
                    }
                    u -= w;
                }
            }
            let i = chosen.expect("positive total weight has a candidate");
            weights[i] = 0.0;
            next.set(grid.site(i), true);
        }
    }
    for _ in 0..params.redistribution_hops_per_pulse {
        match random_hop(&next, rng) {
            Some((from, to)) => {
                next.set(from, false);
                next.set(to, true);
            }
            None => break,
        }
    }
    Ok(next)
}

/// Draws a hop uniformly among all (occupied site, empty neighbor) pairs by
/// rejection over directed nearest-neighbor pairs. `None` when no hop exists.
fn random_hop<R: Rng>(grid: &VacancyGrid, rng: &mut R) -> Option<(Site, Site)> {
    let count = grid.occupied_count();
    if count == 0 || count == grid.n_sites() || grid.n_sites() < 2 {
        return None;
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let horizontal = rows * (cols - 1);
    let bonds = grid.bond_count();
    loop {
        let k = rng.random_range(0..2 * bonds);
        let (bond, forward) = (k / 2, k % 2 == 0);
        let (a, b) = if bond < horizontal {
            let (r, c) = (bond / (cols - 1), bond % (cols - 1));
            (Site::new(r, c), Site::new(r, c + 1))
        } else {
            let v = bond - horizontal;
            let (r, c) = (v / cols, v % cols);
            (Site::new(r, c), Site::new(r + 1, c))
        };
        let (from, to) = if forward { (a, b) } else { (b, a) };
        if grid.is_occupied(from) && !grid.is_occupied(to) {
            return Some((from, to));
        }
    }
}

/// Reads `grid` at the model reference temperature and applies one pulse.
pub fn set_pulse(grid: &VacancyGrid, model: &ConductanceModel, params: &SetParams, seed: u64) -> Result<VacancyGrid> {
    params.validate()?;
    if params.vacancies_per_pulse > 0 && grid.occupied_count() == grid.n_sites() {
        return Err(Error::Saturated);
    }
    let read = solve_network(grid, model, model.t0, params.v_read)?;
    apply_pulse(grid, &read.site_powers(), params, &mut rng_from_seed(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetTrace {
    /// Read conductance before the first pulse and after every pulse.
    pub pulse_conductances: Vec<f64>,
    pub pulses_to_target: usize,
    pub final_t_alpha: f64,
    pub target_g: f64,
    pub fluctuation_std: f64,
    /// False when `max_pulses` ran out before the target was reached.
    pub completed: bool,
}

impl SetTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "pulse_index,conductance_S")?;
        for (i, g) in self.pulse_conductances.iter().enumerate() {
            writeln!(out, "{i},{g}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IsppRun {
    pub trace: SetTrace,
    pub grid: VacancyGrid,
    /// Final read solve, for current-density maps.
    pub read: SolveResult,
    pub fit: TAlphaFit,
}

/// Population std of the trailing `FLUCTUATION_WINDOW` entries.
pub fn trailing_std(values: &[f64]) -> f64 {
    let start = values.len().saturating_sub(FLUCTUATION_WINDOW);
    stats::std_pop(&values[start..])
}

/// Pulses `initial` until its read conductance reaches `target_g`, then
/// measures the temperature coefficient of the programmed cell.
pub fn ispp_set(
    initial: &VacancyGrid,
    model: &ConductanceModel,
    params: &SetParams,
    sweep: &SweepConfig,
    seed: u64,
) -> Result<IsppRun> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut grid = initial.clone();
    let mut read = solve_network(&grid, model, model.t0, params.v_read)?;
    let mut trace = vec![read.conductance()];
    let mut completed = read.conductance() >= params.target_g;
    while !completed && trace.len() <= params.max_pulses {
        grid = match apply_pulse(&grid, &read.site_powers(), params, &mut rng) {
            Ok(g) => g,
            Err(Error::Saturated) => break,
            Err(e) => return Err(e),
        };
        read = solve_network(&grid, model, model.t0, params.v_read)?;
        trace.push(read.conductance());
        completed = read.conductance() >= params.target_g;
    }
    let fit = measure_grid(&grid, sweep, model)?;
    Ok(IsppRun {
        trace: SetTrace {
            pulses_to_target: trace.len() - 1,
            fluctuation_std: trailing_std(&trace),
            pulse_conductances: trace,
            final_t_alpha: fit.t_alpha,
            target_g: params.target_g,
            completed,
        },
        grid,
        read,
        fit,
    })
}

/// `n_runs` independent SET runs from fresh grids at `c_v`. Run `i` uses grid seed
/// `derive_seed(master, GRID, i)` and pulse seed `derive_seed(master, ISPP, i)`.
pub fn ispp_batch(
    n_runs: usize,
    c_v: f64,
    model: &ConductanceModel,
    params: &SetParams,
    sweep: &SweepConfig,
    master_seed: u64,
) -> Result<Vec<IsppRun>> {
    (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let grid = generate_grid(sweep.rows, sweep.cols, c_v, derive_seed(master_seed, tag::GRID, i as u64))?;
            ispp_set(&grid, model, params, sweep, derive_seed(master_seed, tag::ISPP, i as u64))
        })
        .collect()
}

/// Programmed cells as ensemble-style records, ready for `perturb_ensemble`.
pub fn programmed_cells(runs: &[IsppRun]) -> Result<Vec<Cell>> {
    runs.iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Cell {
                record: EnsembleRecord {
                    trial_id: i,
                    c_v: r.grid.c_v(),
                    r0: r.fit.r0,
                    t_alpha: r.fit.t_alpha,
                    order_param: order_parameter(&r.grid)?,
                    seed: r.grid.seed(),
                },
                grid: r.grid.clone(),
            })
        })
        .collect()
}

/// Vacancy hops that conserve the vacancy count.
pub fn perturb(grid: &VacancyGrid, params: &PerturbParams) -> Result<VacancyGrid> {
    params.validate()?;
    let mut rng = rng_from_seed(params.seed);
    let mut next = grid.clone();
    let mut occupied: Vec<usize> = (0..grid.n_sites()).filter(|&i| grid.occupancy()[i]).collect();
    if occupied.is_empty() {
        return Ok(next);
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut candidates = Vec::new();
    for _ in 0..params.steps {
        let k = rng.random_range(0..occupied.len());
        let from = next.site(occupied[k]);
        candidates.clear();
        if rng.random::<f64>() < params.p_far {
            let r = params.r_far;
            for row in from.row.saturating_sub(r)..=(from.row + r).min(rows - 1) {
                for col in from.col.saturating_sub(r)..=(from.col + r).min(cols - 1) {
                    let s = Site::new(row, col);
                    if !next.is_occupied(s) {
                        candidates.push(s);
                    }
                }
            }
        } else {
            candidates.extend(next.neighbors(from).filter(|s| !next.is_occupied(*s)));
        }
        if candidates.is_empty() {
            continue;
        }
        let to = candidates[rng.random_range(0..candidates.len())];
        next.set(from, false);
        next.set(to, true);
        occupied[k] = next.index(to);
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbPair {
    pub trial_id: usize,
    pub before: EnsembleRecord,
    pub after: EnsembleRecord,
}

/// Perturbs every cell's grid, then re-solves and re-fits it. Each cell uses
/// the child seed `derive_seed(params.seed, PERTURB, position)`.
pub fn perturb_ensemble(
    cells: &[Cell],
    params: &PerturbParams,
    sweep: &SweepConfig,
    model: &ConductanceModel,
) -> Result<Vec<PerturbPair>> {
    params.validate()?;
    cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let local = PerturbParams {
                seed: derive_seed(params.seed, tag::PERTURB, i as u64),
                ..params.clone()
            };
            let wrap = |e: Error| Error::Trial {
                trial_id: cell.record.trial_id,
                c_v: cell.record.c_v,
                seed: local.seed,
                source: Box::new(e),
            };
            let grid = perturb(&cell.grid, &local).map_err(wrap)?;
            let fit = measure_grid(&grid, sweep, model).map_err(wrap)?;
            let order_param = order_parameter(&grid).map_err(wrap)?;
            Ok(PerturbPair {
                trial_id: cell.record.trial_id,
                before: cell.record,
                after: EnsembleRecord {
                    r0: fit.r0,
                    t_alpha: fit.t_alpha,
                    order_param,
                    ..cell.record
                },
            })
        })
        .collect()
}

pub fn write_perturb_csv<W: Write>(pairs: &[PerturbPair], mut out: W) -> Result<()> {
    writeln!(out, "trial_id,r0_before,t_alpha_before,r0_after,t_alpha_after,ov_before,ov_after")?;
    for p in pairs {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.trial_id,
            p.before.r0,
            p.before.t_alpha,
            p.after.r0,
            p.after.t_alpha,
            p.before.order_param,
            p.after.order_param
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::generate_grid;

    fn model() -> ConductanceModel {
        ConductanceModel::default()
    }

    #[test]
    fn single_empty_site_is_filled() {
        let mut g = VacancyGrid::filled(5, 4, true).unwrap();
        g.set(Site::new(2, 1), false);
        let params = SetParams {
            vacancies_per_pulse: 1,
            redistribution_hops_per_pulse: 0,
            ..SetParams::default()
        };
        let next = set_pulse(&g, &model(), &params, 1).unwrap();
        assert_eq!(next.occupied_count(), 20);
        assert!(matches!(set_pulse(&next, &model(), &params, 1), Err(Error::Saturated)));
    }

    #[test]
    fn null_pulse_is_identity() {
        let g = generate_grid(8, 6, 0.5, 4).unwrap();
        let params = SetParams {
            vacancies_per_pulse: 0,
            redistribution_hops_per_pulse: 0,
            ..SetParams::default()
        };
        assert_eq!(set_pulse(&g, &model(), &params, 9).unwrap(), g);
    }

    #[test]
    fn pulses_add_exactly_the_requested_vacancies() {
        let mut g = generate_grid(20, 16, 0.5, 2).unwrap();
        let params = SetParams::default();
        let mut last = g.occupied_count();
        for k in 0..50u64 {
            g = set_pulse(&g, &model(), &params, k).unwrap();
            assert_eq!(g.occupied_count(), last + 2);
            last = g.occupied_count();
        }
    }

    #[test]
    fn new_vacancies_follow_power() {
        // Exponent large: the hottest oxygen site is chosen.
        let g = VacancyGrid::from_rows(&["VVV", "VOV", "OVO", "VVV"]).unwrap();
        let read = solve_network(&g, &model(), 300.0, 0.1).unwrap();
        let p = read.site_powers();
        let hottest = (0..g.n_sites())
            .filter(|&i| !g.occupancy()[i])
            .max_by(|&a, &b| p[a].total_cmp(&p[b]))
            .unwrap();
        let params = SetParams {
            vacancies_per_pulse: 1,
            redistribution_hops_per_pulse: 0,
            power_weighting_exponent: 50.0,
            ..SetParams::default()
        };
        let next = apply_pulse(&g, &p, &params, &mut rng_from_seed(3)).unwrap();
        assert!(next.occupancy()[hottest]);
    }

    #[test]
    fn ispp_early_exit() {
        let g = VacancyGrid::filled(6, 6, true).unwrap();
        let params = SetParams {
            target_g: 1e-6,
            ..SetParams::default()
        };
        let run = ispp_set(&g, &model(), &params, &SweepConfig::default(), 0).unwrap();
        assert_eq!(run.trace.pulses_to_target, 0);
        assert_eq!(run.trace.pulse_conductances.len(), 1);
        assert!(run.trace.completed);
    }

    #[test]
    fn ispp_flags_exhaustion() {
        let g = generate_grid(40, 32, 0.5, 1).unwrap();
        let params = SetParams {
            max_pulses: 3,
            target_g: 1.0,
            ..SetParams::default()
        };
        let run = ispp_set(&g, &model(), &params, &SweepConfig::default(), 0).unwrap();
        assert!(!run.trace.completed);
        assert_eq!(run.trace.pulse_conductances.len(), 4);
    }

    #[test]
    fn perturb_conserves_and_is_deterministic() {
        let g = generate_grid(12, 10, 0.55, 8).unwrap();
        let params = PerturbParams {
            steps: 500,
            seed: 5,
            ..PerturbParams::default()
        };
        let a = perturb(&g, &params).unwrap();
        assert_eq!(a.occupied_count(), g.occupied_count());
        assert_eq!((a.rows(), a.cols()), (g.rows(), g.cols()));
        assert_ne!(a, g);
        assert_eq!(a, perturb(&g, &params).unwrap());
        let none = PerturbParams { steps: 0, ..params };
        assert_eq!(perturb(&g, &none).unwrap(), g);
    }

    #[test]
    fn perturb_far_hops_stay_in_radius() {
        let mut g = VacancyGrid::filled(20, 20, false).unwrap();
        g.set(Site::new(10, 10), true);
        let params = PerturbParams {
            steps: 1,
            p_far: 1.0,
            r_far: 3,
            seed: 0,
        };
        for seed in 0..50 {
            let out = perturb(&g, &PerturbParams { seed, ..params.clone() }).unwrap();
            let s = (0..400).map(|i| out.site(i)).find(|&s| out.is_occupied(s)).unwrap();
            assert!(s.row.abs_diff(10) <= 3 && s.col.abs_diff(10) <= 3);
            assert_ne!(s, Site::new(10, 10));
        }
    }

    #[test]
    fn perturb_rejects_bad_params() {
        let g = VacancyGrid::filled(4, 4, true).unwrap();
        assert!(perturb(&g, &PerturbParams { p_far: 1.5, ..PerturbParams::default() }).is_err());
        assert!(perturb(&g, &PerturbParams { r_far: 1, ..PerturbParams::default() }).is_err());
        // fully occupied: every hop is blocked
        assert_eq!(perturb(&g, &PerturbParams::default()).unwrap(), g);
    }

    #[test]
    fn trailing_window() {
        let v: Vec<f64> = (0..40).map(|i| if i < 10 { 100.0 } else { (i % 2) as f64 }).collect();
        assert!((trailing_std(&v) - 0.5).abs() < 1e-15);
        assert_eq!(trailing_std(&[3.0]), 0.0);
    }
}
