//! Oxygen-vacancy occupancy lattice of the filament region.
//!
//! The region is a `rows x cols` square lattice of oxygen sites. Each site is
//! either an oxygen vacancy (V_O) or a lattice oxygen ion (O2-). Nearest
//! neighbors (4-adjacency, coordination number 4) are joined by bonds whose
//! kind follows from the occupancy of their endpoints.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Coordination number of the square lattice.
pub const COORDINATION: usize = 4;

pub const DEFAULT_ROWS: usize = 40;
pub const DEFAULT_COLS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub row: usize,
    pub col: usize,
}

impl Site {
    pub const fn new(row: usize, col: usize) -> Self {
        Site { row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondType {
    /// V_O - V_O
    Metallic,
    /// V_O - O2-
    Semiconducting,
    /// O2- - O2-
    Insulating,
}

impl BondType {
    pub fn from_endpoints(a: bool, b: bool) -> Self {
        match (a, b) {
            (true, true) => BondType::Metallic,
            (false, false) => BondType::Insulating,
            _ => BondType::Semiconducting,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BondType::Metallic => "metallic",
            BondType::Semiconducting => "semiconducting",
            BondType::Insulating => "insulating",
        }
    }
}

impl fmt::Display for BondType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An undirected nearest-neighbor bond. `a` is always the lexicographically
/// smaller endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub a: Site,
    pub b: Site,
    pub kind: BondType,
}

impl Bond {
    pub fn is_vertical(&self) -> bool {
        self.a.col == self.b.col
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VacancyGrid {
    rows: usize,
    cols: usize,
    occupied: Vec<bool>,
    /// Generation seed, carried for serialization only.
    seed: u64,
}

impl VacancyGrid {
    /// Builds a grid from a row-major occupancy vector.
    pub fn from_occupancy(rows: usize, cols: usize, occupied: Vec<bool>, seed: u64) -> Result<Self> {
        check_dims(rows, cols)?;
        if occupied.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: occupied.len(),
            });
        }
        Ok(VacancyGrid {
            rows,
            cols,
            occupied,
            seed,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Result<Self> {
        Self::from_occupancy(rows, cols, vec![value; rows * cols], 0)
    }

    /// Builds a grid from text rows of 'V' and 'O'.
    pub fn from_rows(rows: &[&str]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut occ = Vec::with_capacity(rows.len() * cols);
        for (i, line) in rows.iter().enumerate() {
            if line.len() != cols {
                return Err(Error::config(format!("row {i} has length {} (expected {cols})", line.len())));
            }
            for ch in line.chars() {
                occ.push(parse_site(ch)?);
            }
        }
        Self::from_occupancy(rows.len(), cols, occ, 0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_sites(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, site: Site) -> usize {
        site.row * self.cols + site.col
    }

    #[inline]
    pub fn site(&self, index: usize) -> Site {
        Site::new(index / self.cols, index % self.cols)
    }

    #[inline]
    pub fn is_occupied(&self, site: Site) -> bool {
        self.occupied[self.index(site)]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupied
    }

    pub fn set(&mut self, site: Site, value: bool) {
        let i = self.index(site);
        self.occupied[i] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&v| v).count()
    }

    /// Actual V_O concentration.
    pub fn c_v(&self) -> f64 {
        self.occupied_count() as f64 / self.n_sites() as f64
    }

    /// 4-neighbors of `site` inside the lattice.
    pub fn neighbors(&self, site: Site) -> impl Iterator<Item = Site> + '_ {
        let Site { row, col } = site;
        let up = (row > 0).then(|| Site::new(row - 1, col));
        let down = (row + 1 < self.rows).then(|| Site::new(row + 1, col));
        let left = (col > 0).then(|| Site::new(row, col - 1));
        let right = (col + 1 < self.cols).then(|| Site::new(row, col + 1));
        [up, down, left, right].into_iter().flatten()
    }

    /// Number of undirected nearest-neighbor bonds.
    pub fn bond_count(&self) -> usize {
        self.rows * (self.cols - 1) + (self.rows - 1) * self.cols
    }

    /// Writes the grid as a header line `rows cols c_v seed` followed by one
    /// line of 'V'/'O' characters per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {} {}\n", self.rows, self.cols, self.c_v(), self.seed);
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_occupied(Site::new(r, c)) { 'V' } else { 'O' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for VacancyGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for VacancyGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| Error::config("empty grid text"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::config(format!("grid header needs 4 fields, got {}", fields.len())));
        }
        let bad = |name: &str| Error::config(format!("grid header: bad {name}"));
        let rows: usize = fields[0].parse().map_err(|_| bad("rows"))?;
        let cols: usize = fields[1].parse().map_err(|_| bad("cols"))?;
        let c_v: f64 = fields[2].parse().map_err(|_| bad("c_v"))?;
        let seed: u64 = fields[3].parse().map_err(|_| bad("seed"))?;
        let body: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
        if body.len() != rows {
            return Err(Error::config(format!("grid has {} rows, header says {rows}", body.len())));
        }
        let mut grid = VacancyGrid::from_rows(&body)?;
        if grid.cols != cols {
            return Err(Error::config(format!("grid has {} cols, header says {cols}", grid.cols)));
        }
        if (grid.c_v() - c_v).abs() > 1e-12 {
            return Err(Error::config(format!("header c_v {c_v} disagrees with body {}", grid.c_v())));
        }
        grid.seed = seed;
        Ok(grid)
    }
}

fn parse_site(ch: char) -> Result<bool> {
    match ch {
        'V' => Ok(true),
        'O' => Ok(false),
        other => Err(Error::config(format!("unexpected site character {other:?}"))),
    }
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows < 2 || cols < 1 {
        return Err(Error::config(format!("grid must be at least 2x1, got {rows}x{cols}")));
    }
    Ok(())
}

/// Number of vacancies for concentration `c_v` on `n` sites, rounding half to even.
pub fn vacancy_count(c_v: f64, n: usize) -> usize {
    (c_v * n as f64).round_ties_even() as usize
}

/// Places exactly `round(c_v * rows * cols)` vacancies uniformly at random
/// without replacement.
pub fn generate_grid(rows: usize, cols: usize, c_v: f64, seed: u64) -> Result<VacancyGrid> {
    check_dims(rows, cols)?;
    if !(0.0..=1.0).contains(&c_v) {
        return Err(Error::config(format!("c_v must lie in [0, 1], got {c_v}")));
    }
    let n = rows * cols;
    let k = vacancy_count(c_v, n);
    let mut rng = rng_from_seed(seed);
    let mut occupied = vec![false; n];
    for i in sample(&mut rng, n, k) {
        occupied[i] = true;
    }
    VacancyGrid::from_occupancy(rows, cols, occupied, seed)
}

/// All horizontal then all vertical bonds, in row-major order of their first endpoint.
pub fn classify_bonds(grid: &VacancyGrid) -> Vec<Bond> {
    let mut bonds = Vec::with_capacity(grid.bond_count());
    for r in 0..grid.rows {
        for c in 0..grid.cols - 1 {
            let (a, b) = (Site::new(r, c), Site::new(r, c + 1));
            bonds.push(Bond {
                a,
                b,
                kind: BondType::from_endpoints(grid.is_occupied(a), grid.is_occupied(b)),
            });
        }
    }
    for r in 0..grid.rows - 1 {
        for c in 0..grid.cols {
            let (a, b) = (Site::new(r, c), Site::new(r + 1, c));
            bonds.push(Bond {
                a,
                b,
                kind: BondType::from_endpoints(grid.is_occupied(a), grid.is_occupied(b)),
            });
        }
    }
    bonds
}

/// Number of V_O - V_O bonds.
pub fn metallic_bond_count(grid: &VacancyGrid) -> usize {
    let occ = |r: usize, c: usize| grid.occupied[r * grid.cols + c];
    let mut n = 0;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if !occ(r, c) {
                continue;
            }
            if c + 1 < grid.cols && occ(r, c + 1) {
                n += 1;
            }
            if r + 1 < grid.rows && occ(r + 1, c) {
                n += 1;
            }
        }
    }
    n
}

/// Vacancy order parameter `O_V = 2 N_VV / (z C_V N)`.
///
/// Uses the raw V_O - V_O bond count without edge correction, so a fully
/// occupied finite lattice scores slightly below one.
pub fn order_parameter(grid: &VacancyGrid) -> Result<f64> {
    let n = grid.n_sites() as f64;
    let c_v = grid.c_v();
    if c_v == 0.0 {
        return Err(Error::UndefinedOrderParameter);
    }
    let n_vv = metallic_bond_count(grid) as f64;
    Ok(2.0 * n_vv / (COORDINATION as f64 * c_v * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(rows: usize, cols: usize) -> VacancyGrid {
        let occ = (0..rows * cols).map(|i| (i / cols + i % cols).is_multiple_of(2)).collect();
        VacancyGrid::from_occupancy(rows, cols, occ, 0).unwrap()
    }

    #[test]
    fn generate_exact_counts() {
        assert_eq!(generate_grid(40, 32, 0.50, 1).unwrap().occupied_count(), 640);
        assert_eq!(generate_grid(40, 32, 0.0, 1).unwrap().occupied_count(), 0);
        assert_eq!(generate_grid(40, 32, 1.0, 1).unwrap().occupied_count(), 1280);
        assert_eq!(generate_grid(40, 32, 0.55, 1).unwrap().occupied_count(), 704);
        assert_eq!(generate_grid(40, 32, 0.58, 1).unwrap().occupied_count(), 742);
    }

    #[test]
    fn rounding_is_half_to_even() {
        // 0.5 * 5 = 2.5 -> 2, 0.5 * 7 = 3.5 -> 4
        assert_eq!(vacancy_count(0.5, 5), 2);
        assert_eq!(vacancy_count(0.5, 7), 4);
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate_grid(40, 32, 0.55, 99).unwrap();
        let b = generate_grid(40, 32, 0.55, 99).unwrap();
        let c = generate_grid(40, 32, 0.55, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generate_rejects_bad_config() {
        assert!(matches!(generate_grid(1, 32, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(generate_grid(40, 0, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(generate_grid(40, 32, 1.5, 0), Err(Error::Config(_))));
        assert!(matches!(generate_grid(40, 32, -0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn bonds_of_full_2x2() {
        let g = VacancyGrid::filled(2, 2, true).unwrap();
        let bonds = classify_bonds(&g);
        assert_eq!(bonds.len(), 4);
        assert!(bonds.iter().all(|b| b.kind == BondType::Metallic));
    }

    #[test]
    fn checkerboard_is_all_semiconducting() {
        let g = checkerboard(6, 5);
        assert!(classify_bonds(&g).iter().all(|b| b.kind == BondType::Semiconducting));
        assert_eq!(order_parameter(&g).unwrap(), 0.0);
    }

    #[test]
    fn bond_count_matches_enumeration() {
        for rows in 2..7 {
            for cols in 1..7 {
                let g = VacancyGrid::filled(rows, cols, false).unwrap();
                // brute force: every ordered pair of sites at Manhattan distance 1, halved
                let n = rows * cols;
                let mut pairs = 0;
                for i in 0..n {
                    for j in 0..n {
                        let (a, b) = (g.site(i), g.site(j));
                        if a.row.abs_diff(b.row) + a.col.abs_diff(b.col) == 1 {
                            pairs += 1;
                        }
                    }
                }
                assert_eq!(classify_bonds(&g).len(), pairs / 2);
                assert_eq!(g.bond_count(), pairs / 2);
            }
        }
        assert_eq!(VacancyGrid::filled(40, 32, false).unwrap().bond_count(), 2488);
    }

    #[test]
    fn bonds_are_unique_and_adjacent() {
        let g = generate_grid(7, 5, 0.5, 3).unwrap();
        let bonds = classify_bonds(&g);
        let mut keys: Vec<_> = bonds.iter().map(|b| (b.a, b.b)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), bonds.len());
        for b in &bonds {
            assert!(b.a < b.b);
            assert_eq!(b.a.row.abs_diff(b.b.row) + b.a.col.abs_diff(b.b.col), 1);
            let expected = BondType::from_endpoints(g.is_occupied(b.a), g.is_occupied(b.b));
            assert_eq!(b.kind, expected);
            assert_eq!(expected, BondType::from_endpoints(g.is_occupied(b.b), g.is_occupied(b.a)));
        }
        assert_eq!(bonds, classify_bonds(&g));
    }

    #[test]
    fn order_parameter_of_full_grid() {
        let g = VacancyGrid::filled(40, 32, true).unwrap();
        let ov = order_parameter(&g).unwrap();
        assert!((ov - 2.0 * 2488.0 / (4.0 * 1280.0)).abs() < 1e-15);
        assert!((ov - 0.971875).abs() < 1e-12);
    }

    #[test]
    fn order_parameter_edge_cases() {
        let mut g = VacancyGrid::filled(5, 5, false).unwrap();
        assert!(matches!(order_parameter(&g), Err(Error::UndefinedOrderParameter)));
        g.set(Site::new(2, 2), true);
        assert_eq!(order_parameter(&g).unwrap(), 0.0);
    }

    #[test]
    fn moving_isolated_vacancy_next_to_another_raises_order() {
        let mut g = VacancyGrid::filled(6, 6, false).unwrap();
        g.set(Site::new(1, 1), true);
        g.set(Site::new(4, 4), true);
        let before = order_parameter(&g).unwrap();
        g.set(Site::new(4, 4), false);
        g.set(Site::new(1, 2), true);
        let after = order_parameter(&g).unwrap();
        assert!(after > before);
    }

    #[test]
    fn text_round_trip() {
        let g = generate_grid(9, 7, 0.55, 42).unwrap();
        let text = g.to_text();
        assert!(text.starts_with("9 7 "));
        assert!(text.lines().next().unwrap().ends_with(" 42"));
        let back: VacancyGrid = text.parse().unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!("2 2 0.5 1\nVX\nOO\n".parse::<VacancyGrid>().is_err());
        assert!("3 2 0.5 1\nVO\nOV\n".parse::<VacancyGrid>().is_err());
        assert!("".parse::<VacancyGrid>().is_err());
    }
}
