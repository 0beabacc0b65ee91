//! Quantized weights on differential conductance pairs, with per-cell thermal drift and
//! output-current compensation.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::mlp::{affine, argmax, Mlp};
use crate::seed::{derive_seed, rng_from_seed, tag};
use crate::stats;
use crate::tcoeff::ThermalStats;
use crate::{Error, Result};

pub const DEVICE_G_MIN: f64 = 12.5e-6;
pub const DEVICE_G_MAX: f64 = 100e-6;
pub const DEFAULT_LEVELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
    /// Signed magnitude level per weight, row-major `[rows x cols]`.
    pub level_index: Vec<i8>,
    pub w_max: f64,
}

impl QuantizedLayer {
    pub fn weight(&self, k: usize) -> f64 {
        if self.w_max == 0.0 {
            return 0.0;
        }
        self.level_index[k] as f64 / (self.levels - 1) as f64 * self.w_max
    }

    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.level_index.len()).map(|k| self.weight(k)).collect()
    }
}

/// Symmetric uniform quantization of one weight matrix to `levels` magnitude levels.
pub fn quantize_matrix(w: &[f64], rows: usize, cols: usize, levels: usize) -> Result<QuantizedLayer> {
    if !(2..=128).contains(&levels) {
        return Err(Error::config(format!("levels must be in [2, 128], got {levels}")));
    }
    if w.len() != rows * cols {
        return Err(Error::Dimension {
            expected: rows * cols,
            got: w.len(),
        });
    }
    let w_max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let top = (levels - 1) as f64;
    let level_index = w
        .iter()
        .map(|&v| {
            if w_max == 0.0 {
                0
            } else {
                let l = (v.abs() / w_max * top).round().min(top) as i8;
                if v < 0.0 {
                    -l
                } else {
                    l
                }
            }
        })
        .collect();
    Ok(QuantizedLayer {
        rows,
        cols,
        levels,
        level_index,
        w_max,
    })
}

/// Quantizes both weight matrices; biases stay digital.
pub fn quantize_weights(mlp: &Mlp, levels: usize) -> Result<[QuantizedLayer; 2]> {
    Ok([
        quantize_matrix(&mlp.w1, mlp.inputs, mlp.hidden, levels)?,
        quantize_matrix(&mlp.w2, mlp.hidden, mlp.outputs, levels)?,
    ])
}

/// The network with weights replaced by their dequantized values.
pub fn dequantized_mlp(mlp: &Mlp, q: &[QuantizedLayer; 2]) -> Mlp {
    Mlp {
        w1: q[0].dequantize(),
        w2: q[1].dequantize(),
        ..mlp.clone()
    }
}

/// A named mapping window `[g_min, g_max]` in siemens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GRange {
    pub name: String,
    pub g_min: f64,
    pub g_max: f64,
}

impl GRange {
    pub fn new(name: &str, g_min: f64, g_max: f64) -> Self {
        GRange {
            name: name.to_string(),
            g_min,
            g_max,
        }
    }

    pub fn full() -> Self {
        GRange::new("full", DEVICE_G_MIN, DEVICE_G_MAX)
    }

    /// `full`, `low`, `middle` or `high`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(GRange::full()),
            "low" => Ok(GRange::new("low", 12.5e-6, 25e-6)),
            "middle" => Ok(GRange::new("middle", 25e-6, 50e-6)),
            "high" => Ok(GRange::new("high", 50e-6, 100e-6)),
            _ => Err(Error::config(format!("unknown conductance range {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tol = 1e-15;
        if !(self.g_min >= DEVICE_G_MIN - tol && self.g_max <= DEVICE_G_MAX + tol && self.g_max > self.g_min) {
            return Err(Error::config(format!(
                "range {} [{:e}, {:e}] S outside device limits [{DEVICE_G_MIN:e}, {DEVICE_G_MAX:e}]",
                self.name, self.g_min, self.g_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossbarArray {
    pub rows: usize,
    pub cols: usize,
    pub g_plus: Vec<f64>,
    pub g_minus: Vec<f64>,
    pub t_alpha_plus: Vec<f64>,
    pub t_alpha_minus: Vec<f64>,
    pub range: GRange,
    pub t0: f64,
    pub levels: usize,
    pub w_max: f64,
}

impl CrossbarArray {
    /// Weight per siemens of differential conductance.
    pub fn weight_per_siemens(&self) -> f64 {
        self.w_max / (self.range.g_max - self.range.g_min)
    }

    /// `g_plus - g_minus` per cell after drift to `temperature`.
    pub fn differential_at(&self, temperature: f64) -> Result<Vec<f64>> {
        let mut d = Vec::with_capacity(self.g_plus.len());
        for k in 0..self.g_plus.len() {
            let gp = drift_conductance(self.g_plus[k], self.t_alpha_plus[k], temperature, self.t0)?;
            let gm = drift_conductance(self.g_minus[k], self.t_alpha_minus[k], temperature, self.t0)?;
            d.push(gp - gm);
        }
        Ok(d)
    }

    pub fn cell_count(&self) -> usize {
        2 * self.g_plus.len()
    }
}

/// One-sided differential mapping: the sign picks which cell of the pair is programmed.
pub fn map_to_conductance(q: &QuantizedLayer, range: &GRange, t0: f64) -> Result<CrossbarArray> {
    range.validate()?;
    let step = (range.g_max - range.g_min) / (q.levels - 1) as f64;
    let n = q.level_index.len();
    let mut g_plus = vec![range.g_min; n];
    let mut g_minus = vec![range.g_min; n];
    for (k, &l) in q.level_index.iter().enumerate() {
        let g = if l.unsigned_abs() as usize == q.levels - 1 {
            range.g_max
        } else {
            range.g_min + l.unsigned_abs() as f64 * step
        };
        if l > 0 {
            g_plus[k] = g;
        } else if l < 0 {
            g_minus[k] = g;
        }
    }
    Ok(CrossbarArray {
        rows: q.rows,
        cols: q.cols,
        g_plus,
        g_minus,
        t_alpha_plus: vec![0.0; n],
        t_alpha_minus: vec![0.0; n],
        range: range.clone(),
        t0,
        levels: q.levels,
        w_max: q.w_max,
    })
}

/// Fallback when no ensemble statistics exist: mean linear in `ln g`, constant spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricTalpha {
    pub g_ref: f64,
    pub mean_at_ref: f64,
    pub slope_per_ln_g: f64,
    pub sigma: f64,
}

impl Default for ParametricTalpha {
    fn default() -> Self {
        ParametricTalpha {
            g_ref: 12.5e-6,
            mean_at_ref: -0.0045,
            slope_per_ln_g: 0.0021,
            sigma: 0.0004,
        }
    }
}

impl ParametricTalpha {
    pub fn mean(&self, g: f64) -> f64 {
        self.mean_at_ref + self.slope_per_ln_g * (g / self.g_ref).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TalphaSource {
    Stats(ThermalStats),
    Parametric(ParametricTalpha),
}

impl TalphaSource {
    /// Normal parameters for a cell at conductance `g`.
    pub fn distribution(&self, g: f64) -> Result<(f64, f64)> {
        match self {
            TalphaSource::Stats(s) => {
                let i = s.locate(g).ok_or(Error::Uncovered(g))?;
                let st = &s.stats[i];
                match (st.mean_t_alpha, st.sigma_t_alpha) {
                    (Some(m), Some(sd)) => Ok((m, sd)),
                    _ => Err(Error::Uncovered(g)),
                }
            }
            TalphaSource::Parametric(p) => {
                if !(g > 0.0) {
                    return Err(Error::Uncovered(g));
                }
                Ok((p.mean(g), p.sigma))
            }
        }
    }
}

/// Independent Normal draw per cell (all `g_plus` cells row-major, then all `g_minus`).
pub fn assign_talpha(crossbar: &CrossbarArray, source: &TalphaSource, seed: u64) -> Result<CrossbarArray> {
    let mut rng = rng_from_seed(seed);
    let mut out = crossbar.clone();
    let mut draw = |g: f64| -> Result<f64> {
        let (m, sd) = source.distribution(g)?;
        let n = Normal::new(m, sd).map_err(|e| Error::config(e.to_string()))?;
        Ok(n.sample(&mut rng))
    };
    for k in 0..crossbar.g_plus.len() {
        out.t_alpha_plus[k] = draw(crossbar.g_plus[k])?;
    }
    for k in 0..crossbar.g_minus.len() {
        out.t_alpha_minus[k] = draw(crossbar.g_minus[k])?;
    }
    Ok(out)
}

/// Every cell gets the same coefficient.
pub fn uniform_talpha(crossbar: &CrossbarArray, t_alpha: f64) -> CrossbarArray {
    let mut out = crossbar.clone();
    out.t_alpha_plus.iter_mut().for_each(|a| *a = t_alpha);
    out.t_alpha_minus.iter_mut().for_each(|a| *a = t_alpha);
    out
}

pub fn drift_conductance(g0: f64, t_alpha: f64, temperature: f64, t0: f64) -> Result<f64> {
    let den = 1.0 + t_alpha * (temperature - t0);
    if !(den > 0.0) {
        return Err(Error::DriftRange(den));
    }
    Ok(g0 / den)
}

/// Column currents `I_j = sum_i (G+_ij - G-_ij)(T) * V_i`.
pub fn crossbar_matvec(crossbar: &CrossbarArray, input: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if input.len() != crossbar.rows {
        return Err(Error::Dimension {
            expected: crossbar.rows,
            got: input.len(),
        });
    }
    let d = crossbar.differential_at(temperature)?;
    let mut out = vec![0.0; crossbar.cols];
    affine(input, &d, &vec![0.0; crossbar.cols], &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompensationConfig {
    pub assumed_t_alpha: f64,
    pub enabled: bool,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        CompensationConfig {
            assumed_t_alpha: -0.004,
            enabled: true,
        }
    }
}

impl CompensationConfig {
    pub fn factor(&self, temperature: f64, t0: f64) -> Result<f64> {
        if !self.enabled {
            return Ok(1.0);
        }
        let f = 1.0 + self.assumed_t_alpha * (temperature - t0);
        if !(f > 0.0) {
            return Err(Error::DriftRange(f));
        }
        Ok(f)
    }
}

/// Adds `dI = t_alpha * dT * I_T` to each measured current, restoring the reference-temperature output.
pub fn compensate(measured: &[f64], cfg: &CompensationConfig, temperature: f64, t0: f64) -> Result<Vec<f64>> {
    let f = cfg.factor(temperature, t0)?;
    Ok(measured.iter().map(|i| i * f).collect())
}

/// Crossbars for both layers plus the digital biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossbarNetwork {
    pub layers: Vec<CrossbarArray>,
    pub biases: Vec<Vec<f64>>,
}

pub fn map_network(mlp: &Mlp, q: &[QuantizedLayer; 2], range: &GRange, t0: f64) -> Result<CrossbarNetwork> {
    Ok(CrossbarNetwork {
        layers: vec![map_to_conductance(&q[0], range, t0)?, map_to_conductance(&q[1], range, t0)?],
        biases: vec![mlp.b1.clone(), mlp.b2.clone()],
    })
}

impl CrossbarNetwork {
    pub fn assign_talpha(&self, source: &TalphaSource, seed: u64) -> Result<CrossbarNetwork> {
        let mut out = self.clone();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            *layer = assign_talpha(layer, source, derive_seed(seed, tag::CHIP, l as u64))?;
        }
        Ok(out)
    }

    /// Frozen per-layer weights at one temperature, in weight units.
    fn effective(&self, temperature: f64, comp: &CompensationConfig) -> Result<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|c| {
                let f = comp.factor(temperature, c.t0)? * c.weight_per_siemens();
                Ok(c.differential_at(temperature)?.into_iter().map(|d| d * f).collect())
            })
            .collect()
    }

    /// Forward pass returning logits; column currents are read back in weight units.
    pub fn logits(&self, x: &[f64], temperature: f64, comp: &CompensationConfig) -> Result<Vec<f64>> {
        let eff = self.effective(temperature, comp)?;
        Ok(self.logits_with(&eff, x))
    }

    fn logits_with(&self, eff: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, (w, b)) in eff.iter().zip(&self.biases).enumerate() {
            let mut out = vec![0.0; b.len()];
            affine(&a, w, b, &mut out);
            if l + 1 < eff.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = out;
        }
        a
    }
}

/// Top-1 accuracy of the crossbar network at `temperature`.
pub fn infer(net: &CrossbarNetwork, data: &Dataset, temperature: f64, comp: &CompensationConfig) -> Result<f64> {
    let first = net.layers.first().ok_or_else(|| Error::config("network has no layers"))?;
    if data.dim != first.rows {
        return Err(Error::Dimension {
            expected: first.rows,
            got: data.dim,
        });
    }
    if data.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let eff = net.effective(temperature, comp)?;
    let hits = (0..data.len())
        .filter(|&i| argmax(&net.logits_with(&eff, data.image(i))) == data.labels[i] as usize)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccuracySweepConfig {
    pub temps: Vec<f64>,
    pub n_chips: usize,
    pub ranges: Vec<String>,
    pub compensation: CompensationConfig,
    /// Evaluate both with and without compensation.
    pub both_modes: bool,
    pub master_seed: u64,
    pub t0: f64,
}

impl Default for AccuracySweepConfig {
    fn default() -> Self {
        AccuracySweepConfig {
            temps: crate::tcoeff::DEFAULT_TEMPS.to_vec(),
            n_chips: 10,
            ranges: vec!["full".into(), "low".into()],
            compensation: CompensationConfig::default(),
            both_modes: true,
            master_seed: 0,
            t0: 300.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub chip_id: usize,
    pub range_name: String,
    pub compensated: bool,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub temperature: f64,
    pub range_name: String,
    pub compensated: bool,
    pub mean: f64,
    pub min: f64,
    pub p5: f64,
}

pub fn chip_seed(master_seed: u64, chip_id: usize) -> u64 {
    derive_seed(master_seed, tag::CHIP, chip_id as u64)
}

/// Per-chip Tα draws shared across temperatures and compensation modes; rows ordered by
/// range, chip, temperature, mode.
pub fn accuracy_vs_temperature(
    mlp: &Mlp,
    q: &[QuantizedLayer; 2],
    source: &TalphaSource,
    data: &Dataset,
    cfg: &AccuracySweepConfig,
) -> Result<Vec<SweepRow>> {
    if cfg.n_chips == 0 {
        return Err(Error::config("n_chips must be at least 1"));
    }
    let modes: Vec<bool> = if cfg.both_modes {
        vec![false, true]
    } else {
        vec![cfg.compensation.enabled]
    };
    let mut rows = Vec::new();
    for name in &cfg.ranges {
        let base = map_network(mlp, q, &GRange::named(name)?, cfg.t0)?;
        let per_chip: Vec<Result<Vec<SweepRow>>> = (0..cfg.n_chips)
            .into_par_iter()
            .map(|chip| {
                let net = base.assign_talpha(source, chip_seed(cfg.master_seed, chip))?;
                let mut out = Vec::new();
                for &t in &cfg.temps {
                    for &on in &modes {
                        let comp = CompensationConfig {
                            enabled: on,
                            ..cfg.compensation.clone()
                        };
                        out.push(SweepRow {
                            temperature: t,
                            chip_id: chip,
                            range_name: name.clone(),
                            compensated: on,
                            accuracy: infer(&net, data, t, &comp)?,
                        });
                    }
                }
                Ok(out)
            })
            .collect();
        for r in per_chip {
            rows.extend(r?);
        }
    }
    Ok(rows)
}

/// Mean, minimum and 5th percentile per (range, temperature, mode), in first-seen order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(String, u64, bool)> = Vec::new();
    for r in rows {
        let k = (r.range_name.clone(), r.temperature.to_bits(), r.compensated);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(name, tb, on)| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|r| r.range_name == name && r.temperature.to_bits() == tb && r.compensated == on)
                .map(|r| r.accuracy)
                .collect();
            SweepSummary {
                temperature: f64::from_bits(tb),
                range_name: name,
                compensated: on,
                mean: stats::mean(&acc),
                min: acc.iter().cloned().fold(f64::INFINITY, f64::min),
                p5: stats::percentile(&acc, 5.0),
            }
        })
        .collect()
}

pub fn find_summary<'a>(s: &'a [SweepSummary], range: &str, temperature: f64, compensated: bool) -> Option<&'a SweepSummary> {
    s.iter()
        .find(|x| x.range_name == range && x.temperature == temperature && x.compensated == compensated)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "temperature_K,chip_id,range_name,compensated_flag,accuracy")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.temperature, r.chip_id, r.range_name, r.compensated as u8, r.accuracy
        )?;
    }
    Ok(())
}
