//! Kirchhoff solve of the vacancy resistor network.
//!
//! Every nearest-neighbor bond of a [`VacancyGrid`] becomes a resistor whose
//! conductance depends on its [`BondType`] and the temperature. Row 0 is the
//! top electrode held at `v_read`, the last row is the grounded bottom
//! electrode. The interior potentials solve the reduced graph-Laplacian system
//! `L_ii v_i = -L_ie v_e`, which is symmetric positive definite and banded
//! (half-bandwidth = `cols` in row-major order), so a banded Cholesky
//! factorization is used.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{classify_bonds, Bond, BondType, VacancyGrid};

/// Supported operating range for every conductance model.
pub const T_MIN: f64 = 250.0;
pub const T_MAX: f64 = 450.0;

pub const DEFAULT_V_READ: f64 = 0.1;
pub const DEFAULT_T0: f64 = 300.0;

/// KCL tolerance relative to the total current.
pub const KCL_TOL: f64 = 1e-10;

/// Per-bond-type conductances at `t0` and linear temperature coefficients
/// of the bond resistance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConductanceModel {
    pub g_metal: f64,
    pub g_semi: f64,
    pub g_ins: f64,
    pub alpha_metal: f64,
    pub alpha_semi: f64,
    pub alpha_ins: f64,
    pub t0: f64,
}

impl Default for ConductanceModel {
    fn default() -> Self {
        ConductanceModel {
            g_metal: 2800e-6,
            g_semi: 4e-6,
            g_ins: 0.004e-6,
            alpha_metal: 0.0015,
            alpha_semi: -0.0046,
            alpha_ins: 0.0,
            t0: DEFAULT_T0,
        }
    }
}

impl ConductanceModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.g_metal,
            self.g_semi,
            self.g_ins,
            self.alpha_metal,
            self.alpha_semi,
            self.alpha_ins,
            self.t0,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("conductance model has non-finite entries"));
        }
        if !(self.g_metal > self.g_semi && self.g_semi > self.g_ins && self.g_ins > 0.0) {
            return Err(Error::config("need g_metal > g_semi > g_ins > 0"));
        }
        if !(self.alpha_metal > 0.0 && self.alpha_semi < 0.0 && self.alpha_ins == 0.0) {
            return Err(Error::config("need alpha_metal > 0, alpha_semi < 0, alpha_ins == 0"));
        }
        for alpha in [self.alpha_metal, self.alpha_semi] {
            for t in [T_MIN, T_MAX] {
                let d = 1.0 + alpha * (t - self.t0);
                if d <= 0.0 {
                    return Err(Error::ModelRange(format!(
                        "1 + {alpha}*({t} - {}) = {d} is not positive",
                        self.t0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn base(&self, kind: BondType) -> (f64, f64) {
        match kind {
            BondType::Metallic => (self.g_metal, self.alpha_metal),
            BondType::Semiconducting => (self.g_semi, self.alpha_semi),
            BondType::Insulating => (self.g_ins, self.alpha_ins),
        }
    }

    /// Copy with every conductance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ConductanceModel {
            g_metal: self.g_metal * factor,
            g_semi: self.g_semi * factor,
            g_ins: self.g_ins * factor,
            ..*self
        }
    }
}

/// `g(T) = g0 / (1 + alpha (T - T0))` for the given bond type.
pub fn bond_conductance(kind: BondType, temperature: f64, model: &ConductanceModel) -> Result<f64> {
    let (g0, alpha) = model.base(kind);
    let d = 1.0 + alpha * (temperature - model.t0);
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::ModelRange(format!(
            "{kind} bond at {temperature} K: 1 + alpha*dT = {d}"
        )));
    }
    Ok(g0 / d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub rows: usize,
    pub cols: usize,
    /// Node potentials, row-major.
    pub potentials: Vec<f64>,
    pub bonds: Vec<Bond>,
    pub bond_conductances: Vec<f64>,
    /// Signed current from `bond.a` to `bond.b`.
    pub bond_currents: Vec<f64>,
    pub total_current: f64,
    pub resistance: f64,
    pub temperature: f64,
    pub v_read: f64,
    /// Largest KCL imbalance over interior nodes, in amps.
    pub kcl_residual: f64,
}

impl SolveResult {
    pub fn potential(&self, row: usize, col: usize) -> f64 {
        self.potentials[row * self.cols + col]
    }

    pub fn conductance(&self) -> f64 {
        1.0 / self.resistance
    }

    /// Power dissipated in each bond, `g dv^2`.
    pub fn bond_powers(&self) -> Vec<f64> {
        self.bond_currents
            .iter()
            .zip(&self.bond_conductances)
            .map(|(i, g)| i * i / g)
            .collect()
    }

    /// Dissipated power attributed to each site: half of every incident bond.
    pub fn site_powers(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.rows * self.cols];
        for (bond, power) in self.bonds.iter().zip(self.bond_powers()) {
            p[bond.a.row * self.cols + bond.a.col] += 0.5 * power;
            p[bond.b.row * self.cols + bond.b.col] += 0.5 * power;
        }
        p
    }

    /// Writes the per-bond table used for current-density plots.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let norm = current_density_map(self)?;
        writeln!(out, "bond_row_a,col_a,row_b,col_b,kind,conductance_S,current_A,normalized_current")?;
        for (k, bond) in self.bonds.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                bond.a.row,
                bond.a.col,
                bond.b.row,
                bond.b.col,
                bond.kind,
                self.bond_conductances[k],
                self.bond_currents[k],
                norm[k]
            )?;
        }
        Ok(())
    }
}

pub fn solve_network(
    grid: &VacancyGrid,
    model: &ConductanceModel,
    temperature: f64,
    v_read: f64,
) -> Result<SolveResult> {
    let bonds = classify_bonds(grid);
    let mut g = Vec::with_capacity(bonds.len());
    for b in &bonds {
        g.push(bond_conductance(b.kind, temperature, model)?);
    }
    solve_bonds(grid.rows(), grid.cols(), bonds, g, temperature, v_read)
}

/// Solves a lattice network with explicit per-bond conductances.
pub fn solve_bonds(
    rows: usize,
    cols: usize,
    bonds: Vec<Bond>,
    conductances: Vec<f64>,
    temperature: f64,
    v_read: f64,
) -> Result<SolveResult> {
    if !(v_read > 0.0 && v_read.is_finite()) {
        return Err(Error::config(format!("v_read must be positive, got {v_read}")));
    }
    if rows < 2 || cols < 1 {
        return Err(Error::config(format!("network must be at least 2x1, got {rows}x{cols}")));
    }
    if bonds.len() != conductances.len() {
        return Err(Error::Dimension {
            expected: bonds.len(),
            got: conductances.len(),
        });
    }
    if let Some(bad) = conductances.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(Error::config(format!("bond conductance must be positive, got {bad}")));
    }

    let n_interior = (rows - 2) * cols;
    let unknown = |row: usize, col: usize| -> Option<usize> {
        (row > 0 && row + 1 < rows).then(|| (row - 1) * cols + col)
    };
    let fixed = |row: usize| if row == 0 { v_read } else { 0.0 };

    let bw = cols;
    let mut band = BandMatrix::new(n_interior, bw);
    let mut rhs = vec![0.0; n_interior];
    for (bond, &g) in bonds.iter().zip(&conductances) {
        match (unknown(bond.a.row, bond.a.col), unknown(bond.b.row, bond.b.col)) {
            (Some(p), Some(q)) => {
                band.add(p, p, g);
                band.add(q, q, g);
                band.add(p.max(q), p.min(q), -g);
            }
            (Some(p), None) => {
                band.add(p, p, g);
                rhs[p] += g * fixed(bond.b.row);
            }
            (None, Some(q)) => {
                band.add(q, q, g);
                rhs[q] += g * fixed(bond.a.row);
            }
            (None, None) => {}
        }
    }

    let idx = |r: usize, c: usize| r * cols + c;
    // Potentials are carried as `hi + lo`; currents take differences of each part
    // separately so metallic clusters keep their sub-ulp voltage drops.
    let mut hi = vec![0.0; rows * cols];
    let mut lo = vec![0.0; rows * cols];
    hi[..cols].iter_mut().for_each(|v| *v = v_read);
    let currents = |hi: &[f64], lo: &[f64]| -> Vec<f64> {
        bonds
            .iter()
            .zip(&conductances)
            .map(|(b, g)| {
                let (p, q) = (idx(b.a.row, b.a.col), idx(b.b.row, b.b.col));
                g * ((hi[p] - hi[q]) + (lo[p] - lo[q]))
            })
            .collect()
    };
    let inflow = |i: &[f64]| -> Vec<f64> {
        let mut net = vec![0.0; rows * cols];
        for (b, &c) in bonds.iter().zip(i) {
            net[idx(b.a.row, b.a.col)] -= c;
            net[idx(b.b.row, b.b.col)] += c;
        }
        net
    };

    if n_interior > 0 {
        let factor = band.cholesky().ok_or_else(|| Error::Solver {
            reason: "Laplacian is not positive definite".into(),
            residual: f64::NAN,
        })?;
        let x = factor.solve(&rhs);
        hi[cols..(rows - 1) * cols].copy_from_slice(&x);
        let mut last = f64::INFINITY;
        for _ in 0..4 {
            let net = inflow(&currents(&hi, &lo));
            let r = &net[cols..(rows - 1) * cols];
            let size = norm(r);
            if size == 0.0 || size > 0.5 * last {
                break;
            }
            last = size;
            let dx = factor.solve(r);
            lo[cols..(rows - 1) * cols].iter_mut().zip(&dx).for_each(|(l, d)| *l += d);
        }
    }

    let potentials: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h + l).collect();
    let bond_currents = currents(&hi, &lo);

    let mut total_current = 0.0;
    let mut net = vec![0.0; rows * cols];
    for (b, &i) in bonds.iter().zip(&bond_currents) {
        net[idx(b.a.row, b.a.col)] -= i;
        net[idx(b.b.row, b.b.col)] += i;
        if b.b.row == rows - 1 && b.a.row == rows - 2 {
            total_current += i;
        }
    }
    if rows == 2 {
        total_current = bonds
            .iter()
            .zip(&bond_currents)
            .filter(|(b, _)| b.is_vertical())
            .map(|(_, i)| i)
            .sum();
    }
    let kcl_residual = net[cols..(rows - 1) * cols]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    if !(total_current > 0.0 && total_current.is_finite()) {
        return Err(Error::Solver {
            reason: format!("non-positive total current {total_current}"),
            residual: kcl_residual,
        });
    }
    if kcl_residual > KCL_TOL * total_current {
        return Err(Error::Solver {
            reason: "KCL residual above tolerance".into(),
            residual: kcl_residual / total_current,
        });
    }

    Ok(SolveResult {
        rows,
        cols,
        potentials,
        bonds,
        bond_conductances: conductances,
        bond_currents,
        total_current,
        resistance: v_read / total_current,
        temperature,
        v_read,
        kcl_residual,
    })
}

/// Per-bond |current| normalized by the largest bond |current|.
pub fn current_density_map(result: &SolveResult) -> Result<Vec<f64>> {
    if !(result.total_current > 0.0) {
        return Err(Error::DegenerateMap);
    }
    let max = result.bond_currents.iter().fold(0.0f64, |m, i| m.max(i.abs()));
    if max == 0.0 {
        return Err(Error::DegenerateMap);
    }
    Ok(result.bond_currents.iter().map(|i| i.abs() / max).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Symmetric band matrix, lower triangle stored row by row:
/// `data[i * (bw + 1) + (j + bw - i)]` holds `A[i][j]` for `i - bw <= j <= i`.
#[derive(Clone, Debug)]
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn new(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.slot(i, j)]
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    /// In-place banded Cholesky `A = L L^T`; `None` if not positive definite.
    fn cholesky(mut self) -> Option<Self> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = self.get(i, j);
                for k in klo..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                if i == j {
                    if !(s > 0.0) {
                        return None;
                    }
                    let v = s.sqrt();
                    let slot = self.slot(i, i);
                    self.data[slot] = v;
                } else {
                    let v = s / self.get(j, j);
                    let slot = self.slot(i, j);
                    self.data[slot] = v;
                }
            }
        }
        Some(self)
    }

    /// Solves with a factor produced by [`BandMatrix::cholesky`].
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.get(i, k) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.get(k, i) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        y
    }
}
