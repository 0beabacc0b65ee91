use std::sync::OnceLock;

use proptest::prelude::*;
use rayon::ThreadPoolBuilder;

use rram_tc::network::ConductanceModel;
use rram_tc::stats::{mean, spearman};
use rram_tc::tcoeff::{
    bin_talpha_stats, default_ranges, fit_talpha, locate_range, run_ensemble, simulate_cell, EnsembleRecord,
    SweepConfig, ThermalStats,
};
use rram_tc::Error;

const CONCENTRATIONS: [f64; 3] = [0.50, 0.55, 0.58];

proptest! {
    #[test]
    fn exact_lines_are_recovered(
        r0 in 1e3f64..1e7, ta in -0.01f64..0.005, t0 in 250.0f64..350.0,
        temps in prop::collection::btree_set(250u32..=450, 3..8),
    ) {
        let temps: Vec<f64> = temps.into_iter().map(f64::from).collect();
        prop_assume!(temps[temps.len() - 1] - temps[0] >= 50.0);
        let pts: Vec<(f64, f64)> = temps.iter().map(|&t| (t, r0 * (1.0 + ta * (t - t0)))).collect();
        prop_assume!(pts.iter().all(|p| p.1 > 0.0));
        let fit = fit_talpha(&pts, t0).unwrap();
        prop_assert!((fit.r0 - r0).abs() / r0 < 1e-10);
        prop_assert!((fit.t_alpha - ta).abs() < 1e-12);
        prop_assert!(fit.rms_residual < 1e-9 * r0);
    }

    #[test]
    fn coefficient_ignores_resistance_scale(
        rs in prop::collection::vec(1e4f64..1e6, 5), k in 1e-3f64..1e3,
    ) {
        let temps = [300.0, 325.0, 350.0, 375.0, 400.0];
        let pts: Vec<(f64, f64)> = temps.iter().copied().zip(rs.iter().copied()).collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(t, r)| (t, r * k)).collect();
        let a = fit_talpha(&pts, 300.0);
        // steep random points can extrapolate to a negative R0, which is rejected
        prop_assume!(a.is_ok());
        let (a, b) = (a.unwrap(), fit_talpha(&scaled, 300.0).unwrap());
        prop_assert!((a.t_alpha - b.t_alpha).abs() <= 1e-12 * a.t_alpha.abs().max(1e-6));
        prop_assert!((b.r0 / a.r0 - k).abs() < 1e-10 * k);
    }
}

#[test]
fn constant_resistance_has_zero_coefficient() {
    let pts: Vec<(f64, f64)> = [300.0, 325.0, 350.0, 375.0, 400.0].iter().map(|&t| (t, 5e4)).collect();
    let fit = fit_talpha(&pts, 300.0).unwrap();
    assert_eq!(fit.t_alpha, 0.0);
    assert_eq!(fit.r0, 5e4);
}

#[test]
fn all_metallic_cell_takes_the_bond_coefficient() {
    let model = ConductanceModel::default();
    let rec = simulate_cell(1.0, &SweepConfig::default(), 3, &model).unwrap();
    assert!((rec.t_alpha - model.alpha_metal).abs() < 1e-12 * model.alpha_metal.abs());
    assert_eq!(rec.order_param, order_parameter_full(40, 32));
}

fn order_parameter_full(rows: usize, cols: usize) -> f64 {
    let n_vv = rows * (cols - 1) + (rows - 1) * cols;
    2.0 * n_vv as f64 / (4.0 * (rows * cols) as f64)
}

#[test]
fn empty_cell_is_rejected() {
    let err = simulate_cell(0.0, &SweepConfig::default(), 3, &ConductanceModel::default()).unwrap_err();
    match err {
        Error::Trial { source, c_v, .. } => {
            assert_eq!(c_v, 0.0);
            assert!(matches!(*source, Error::UndefinedOrderParameter), "{source}");
        }
        other => panic!("expected a trial error, got {other}"),
    }
}

#[test]
fn ensemble_ignores_thread_count() {
    let run = |threads: usize| {
        ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            run_ensemble(&CONCENTRATIONS, 20, &SweepConfig::default(), 17, &ConductanceModel::default())
                .unwrap()
                .records()
        })
    };
    let serial = run(1);
    assert_eq!(serial.len(), 60);
    for threads in [2, 8] {
        let other = run(threads);
        assert!(serial.iter().zip(&other).all(|(a, b)| a.r0.to_bits() == b.r0.to_bits()
            && a.t_alpha.to_bits() == b.t_alpha.to_bits()
            && a.seed == b.seed));
    }
}

#[test]
fn single_trial_ensemble_is_one_cell() {
    let sweep = SweepConfig::default();
    let model = ConductanceModel::default();
    let run = run_ensemble(&[0.55], 1, &sweep, 4, &model).unwrap();
    let rec = run.records()[0];
    assert_eq!(rec, simulate_cell(0.55, &sweep, rec.seed, &model).unwrap());
}

/// Welford mean and population variance, independent of the library's two-pass helpers.
fn welford(xs: &[f64]) -> (f64, f64) {
    let (mut m, mut s) = (0.0, 0.0);
    for (k, &x) in xs.iter().enumerate() {
        let d = x - m;
        m += d / (k + 1) as f64;
        s += d * (x - m);
    }
    (m, s / xs.len() as f64)
}

fn check_cv_identity(records: &[EnsembleRecord], stats: &ThermalStats) {
    let ranges = default_ranges();
    for (i, s) in stats.stats.iter().enumerate() {
        let samples: Vec<f64> = records
            .iter()
            .filter(|r| locate_range(&ranges, r.g0()) == Some(i))
            .map(|r| r.t_alpha)
            .collect();
        assert_eq!(samples.len(), s.sample_count);
        if samples.len() >= 2 {
            let (m, v) = welford(&samples);
            let cv = v.sqrt() / m.abs() * 100.0;
            let got = s.cv_percent.unwrap();
            assert!((got - cv).abs() <= 1e-12 * cv, "range {i}: {got} vs {cv}");
        }
    }
}

fn ensemble() -> &'static [EnsembleRecord] {
    static RECORDS: OnceLock<Vec<EnsembleRecord>> = OnceLock::new();
    RECORDS.get_or_init(|| {
        let run = run_ensemble(&CONCENTRATIONS, 300, &SweepConfig::default(), 2024, &ConductanceModel::default()).unwrap();
        assert!(run.failures.is_empty());
        run.records()
    })
}

fn at(c: f64) -> Vec<EnsembleRecord> {
    ensemble().iter().filter(|r| r.c_v == c).copied().collect()
}

#[test]
fn positive_fraction_grows_with_concentration() {
    let fracs: Vec<f64> = CONCENTRATIONS
        .iter()
        .map(|&c| at(c).iter().filter(|r| r.t_alpha > 0.0).count() as f64 / 300.0)
        .collect();
    assert!(fracs.windows(2).all(|w| w[0] <= w[1]), "{fracs:?}");
    assert!(fracs[2] > fracs[0], "{fracs:?}");
}

#[test]
fn higher_resistance_means_lower_coefficient() {
    for c in CONCENTRATIONS {
        let group = at(c);
        let r: Vec<f64> = group.iter().map(|x| x.r0).collect();
        let t: Vec<f64> = group.iter().map(|x| x.t_alpha).collect();
        let rho = spearman(&r, &t);
        assert!(rho < 0.0, "c_v {c}: spearman {rho}");
    }
}

/// (shared deciles, deciles where the sparser cells are more ordered)
fn decile_order_comparison() -> (usize, usize) {
    let mut r_all: Vec<f64> = ensemble().iter().map(|x| x.r0).collect();
    r_all.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..10).map(|k| r_all[k * r_all.len() / 10]).collect();
    let decile = |r: f64| edges.iter().filter(|&&e| r >= e).count();
    let (mut compared, mut held) = (0, 0);
    for pair in CONCENTRATIONS.windows(2) {
        for d in 0..10 {
            let ov = |c: f64| at(c).iter().filter(|x| decile(x.r0) == d).map(|x| x.order_param).collect::<Vec<_>>();
            let (sparse, dense) = (ov(pair[0]), ov(pair[1]));
            if sparse.len() >= 5 && dense.len() >= 5 {
                compared += 1;
                if mean(&sparse) > mean(&dense) {
                    held += 1;
                }
            }
        }
    }
    (compared, held)
}

#[test]
#[ignore = "not reproduced: at equal resistance O_V stays at its random-placement value, about 0.97 c_v"]
fn sparse_cells_more_ordered_at_equal_resistance() {
    let (compared, held) = decile_order_comparison();
    assert!(compared >= 2, "too few shared deciles");
    assert_eq!(held, compared, "ordering held in {held} of {compared} shared deciles");
}

#[test]
fn order_parameter_follows_random_placement() {
    // E[O_V] = 2 E[N_VV] / (z c N) with E[N_VV] = bonds c (cN - 1) / (N - 1)
    let (rows, cols) = (40.0, 32.0);
    let n = rows * cols;
    let bonds = rows * (cols - 1.0) + (rows - 1.0) * cols;
    for c in CONCENTRATIONS {
        let k = (c * n).round();
        let expected = 2.0 * bonds * (k / n) * (k - 1.0) / (n - 1.0) / (4.0 * k / n * n);
        let got = mean(&at(c).iter().map(|x| x.order_param).collect::<Vec<_>>());
        assert!((got - expected).abs() < 0.005, "c_v {c}: {got} vs {expected}");
    }
}

#[test]
fn thermal_statistics_match_raw_samples() {
    let records = ensemble();
    let stats = bin_talpha_stats(records, &default_ranges()).unwrap();
    check_cv_identity(records, &stats);
    let cvs: Vec<f64> = stats.stats.iter().map(|s| s.cv_percent.unwrap()).collect();
    assert!(cvs.windows(2).all(|w| w[0] < w[1]), "{cvs:?}");
    let low = stats.get("low").unwrap().mean_t_alpha.unwrap();
    assert!((low + 0.004).abs() <= 0.3 * 0.004, "low-range mean {low}");
}

#[test]
fn two_record_range_statistics() {
    let rec = |t_alpha: f64| EnsembleRecord {
        trial_id: 0,
        c_v: 0.5,
        r0: 1.0 / 20e-6,
        t_alpha,
        order_param: 0.5,
        seed: 0,
    };
    let stats = bin_talpha_stats(&[rec(-0.004), rec(-0.0044)], &default_ranges()).unwrap();
    let low = stats.get("low").unwrap();
    assert!((low.mean_t_alpha.unwrap() + 0.0042).abs() < 1e-15);
    assert!((low.sigma_t_alpha.unwrap() - 0.0002).abs() < 1e-15);
    assert!((low.cv_percent.unwrap() - 4.761904761904762).abs() < 1e-9);
    assert!(stats.get("middle").unwrap().insufficient);
}
