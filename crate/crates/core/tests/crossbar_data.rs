use proptest::prelude::*;

use rram_tc::crossbar::{
    compensate, crossbar_matvec, drift_conductance, map_network, map_to_conductance, quantize_matrix,
    quantize_weights, uniform_talpha, CompensationConfig, GRange,
};
use rram_tc::data::{load_idx, synthetic_digits, to_idx};
use rram_tc::mlp::{argmax, Mlp};
use rram_tc::Error;

fn weights(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
}

fn ranges() -> impl Strategy<Value = GRange> {
    prop_oneof![
        Just(GRange::named("full").unwrap()),
        Just(GRange::named("low").unwrap()),
        Just(GRange::named("middle").unwrap()),
        Just(GRange::named("high").unwrap()),
    ]
}

proptest! {
    #[test]
    fn quantization_error_is_half_a_step(w in weights(7, 5), levels in 2usize..=32) {
        let q = quantize_matrix(&w, 7, 5, levels).unwrap();
        let step = q.w_max / (levels - 1) as f64;
        for (a, b) in w.iter().zip(q.dequantize()) {
            prop_assert!((a - b).abs() <= 0.5 * step * (1.0 + 1e-12));
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn mapping_reproduces_levels_at_reference(w in weights(6, 4), levels in 2usize..=16, range in ranges()) {
        let q = quantize_matrix(&w, 6, 4, levels).unwrap();
        let cb = map_to_conductance(&q, &range, 300.0).unwrap();
        let d = cb.differential_at(300.0).unwrap();
        for (k, dk) in d.iter().enumerate() {
            prop_assert!((dk * cb.weight_per_siemens() - q.weight(k)).abs() <= 1e-12 * q.w_max);
        }
        for g in cb.g_plus.iter().chain(&cb.g_minus) {
            prop_assert!(*g >= range.g_min && *g <= range.g_max);
        }
    }

    #[test]
    fn drift_is_reversible(g0 in 1e-6f64..1e-3, ta in -0.006f64..0.004, t in 250.0f64..=400.0) {
        let g = drift_conductance(g0, ta, t, 300.0).unwrap();
        prop_assert!((g * (1.0 + ta * (t - 300.0)) - g0).abs() <= 1e-14 * g0);
        prop_assert_eq!(drift_conductance(g0, ta, 300.0, 300.0).unwrap(), g0);
    }

    #[test]
    fn compensation_cancels_uniform_drift(
        w in weights(8, 3), x in prop::collection::vec(0.0f64..1.0, 8),
        ta in -0.006f64..0.004, t in 250.0f64..=400.0, range in ranges(),
    ) {
        let q = quantize_matrix(&w, 8, 3, 8).unwrap();
        let cb = uniform_talpha(&map_to_conductance(&q, &range, 300.0).unwrap(), ta);
        let comp = CompensationConfig { assumed_t_alpha: ta, enabled: true };
        let y0 = crossbar_matvec(&cb, &x, 300.0).unwrap();
        let yc = compensate(&crossbar_matvec(&cb, &x, t).unwrap(), &comp, t, 300.0).unwrap();
        let scale = y0.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for (a, b) in y0.iter().zip(&yc) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn compensated_network_predicts_like_reference(
        seed in any::<u64>(), ta in -0.006f64..-0.001, t in 300.0f64..=400.0,
        x in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let mlp = Mlp::init(12, 6, 4, seed).unwrap();
        let q = quantize_weights(&mlp, 8).unwrap();
        let mut net = map_network(&mlp, &q, &GRange::full(), 300.0).unwrap();
        net.layers = net.layers.iter().map(|l| uniform_talpha(l, ta)).collect();
        let comp = CompensationConfig { assumed_t_alpha: ta, enabled: true };
        let off = CompensationConfig { enabled: false, ..comp.clone() };
        let reference = net.logits(&x, 300.0, &off).unwrap();
        let hot = net.logits(&x, t, &comp).unwrap();
        for (a, b) in reference.iter().zip(&hot) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert_eq!(argmax(&reference), argmax(&hot));
    }
}

#[test]
fn idx_files_round_trip() {
    let data = synthetic_digits(3, 0.2, 8).unwrap();
    let (images, labels) = to_idx(&data, 28, 28).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images.idx3-ubyte"), dir.path().join("labels.idx1-ubyte"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let back = load_idx(&ip, &lp).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.dim, 784);
    for (a, b) in back.images.iter().zip(&data.images) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }

    std::fs::write(&ip, &images[..images.len() - 10]).unwrap();
    match load_idx(&ip, &lp) {
        Err(Error::Parse { field, reason, .. }) => {
            assert!(field.contains("images"), "{field}");
            assert!(reason.contains("truncated"), "{reason}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(load_idx(&dir.path().join("missing"), &lp).is_err());
}
