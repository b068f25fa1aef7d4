use ffp8_core::refnet::{
    self, accuracy, argmax, forward, make_dataset, train_baseline, Matrix, Mode, ToyDataset, TrainConfig,
};
use ffp8_core::search::{compare_candidates, select_by, select_format_values};
use ffp8_core::{
    bias_star, candidate_formats, elide_sign, error_metrics_values, layerwise_optimize, range_window, Calibration,
    FormatSpec, ModelBundle, SearchConfig, TensorStats,
};
use proptest::prelude::*;

fn small_model(seed: u64) -> (ToyDataset, ModelBundle) {
    let ds = make_dataset(seed, 300, 6, 3).unwrap();
    let cfg = TrainConfig {
        hidden: vec![8, 8],
        epochs: 5,
        seed,
        ..TrainConfig::default()
    };
    let model = train_baseline(&ds, &cfg).unwrap();
    (ds, model)
}

fn calibration(ds: &ToyDataset) -> Calibration {
    let (inputs, labels) = ds.train();
    Calibration {
        inputs,
        labels: labels.to_vec(),
    }
}

fn values() -> impl Strategy<Value = Vec<f32>> {
    (-20.0..20.0f64, prop::collection::vec((-6.0..0.0f64, any::<bool>()), 1..200)).prop_map(|(scale, parts)| {
        parts
            .into_iter()
            .map(|(e, neg)| {
                let v = (scale + e).exp2() as f32;
                if neg {
                    -v
                } else {
                    v
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn bias_star_is_tight(y in 1..=6u8, z in 0..=9u8, e in -140.0..180.0f64) {
        prop_assume!(1 + y + z >= 4);
        let max = e.exp2();
        let star = bias_star(y, z, max).unwrap();
        let window = |b| range_window(FormatSpec::from_fields(1, y, z, b).unwrap()).max;
        if !star.clamped {
            prop_assert!(window(star.bias) >= max);
            if star.bias < 127 {
                prop_assert!(window(star.bias + 1) < max);
            }
        } else if star.bias == 127 {
            prop_assert!(window(127) >= max);
        } else {
            prop_assert!(window(-128) < max);
        }
    }

    #[test]
    fn selected_window_keeps_the_max(values in values()) {
        let cfg = SearchConfig::default();
        let stats = TensorStats::from_values(&values).unwrap();
        let candidates = candidate_formats(&stats, &cfg);
        let (best, report) = select_format_values(&values, &cfg).unwrap();
        let max = f64::from(stats.max_mag);
        if candidates.iter().any(|&f| range_window(f).max >= max) {
            prop_assert!(range_window(best).max >= max);
            prop_assert_eq!(report.above_window_count, 0);
        }
        prop_assert_eq!(select_format_values(&values, &cfg).unwrap().0, best);
    }

    #[test]
    fn nonnegative_data_selects_unsigned(values in values()) {
        let values: Vec<f32> = values.iter().map(|v| v.abs()).collect();
        let cfg = SearchConfig::default();
        let (best, report) = select_format_values(&values, &cfg).unwrap();
        prop_assert!(!best.is_signed());
        let signed_cfg = SearchConfig { allow_unsigned: false, ..cfg };
        let (_, signed) = select_format_values(&values, &signed_cfg).unwrap();
        prop_assert!(report.sqnr_db >= signed.sqnr_db);
    }

    #[test]
    fn more_candidates_never_worse(values in values(), split in any::<prop::sample::Index>()) {
        let stats = TensorStats::from_values(&values).unwrap();
        let all = candidate_formats(&stats, &SearchConfig::default());
        let k = 1 + split.index(all.len());
        let score = |f| Ok(error_metrics_values(&values, f).unwrap().sqnr_db);
        let (_, part) = select_by(&all[..k], score).unwrap();
        let (_, full) = select_by(&all, score).unwrap();
        prop_assert!(full >= part);
    }

    #[test]
    fn selection_ignores_candidate_order(values in values(), seed in any::<u64>()) {
        let stats = TensorStats::from_values(&values).unwrap();
        let mut candidates = candidate_formats(&stats, &SearchConfig::default());
        let score = |f| Ok(error_metrics_values(&values, f).unwrap().sqnr_db);
        let first = select_by(&candidates, score).unwrap();
        let n = candidates.len();
        candidates.rotate_left((seed as usize) % n);
        candidates.reverse();
        let second = select_by(&candidates, score).unwrap();
        prop_assert_eq!(first.0, second.0);
    }

    #[test]
    fn tie_break_is_a_total_order(a in 0..=1u8, b in 1..=6u8, c in -10..10i32, d in 0..=1u8, e in 1..=6u8, f in -10..10i32) {
        let p = FormatSpec::from_fields(a, b, 8 - a - b, c).unwrap();
        let q = FormatSpec::from_fields(d, e, 8 - d - e, f).unwrap();
        let ord = compare_candidates((p, 1.0), (q, 1.0));
        prop_assert_eq!(ord.reverse(), compare_candidates((q, 1.0), (p, 1.0)));
        prop_assert_eq!(ord == std::cmp::Ordering::Equal, p == q);
    }

    #[test]
    fn argmax_survives_order_preserving_maps(logits in prop::collection::vec(-100.0..100.0f32, 1..10), shift in -50.0..50.0f32, scale in 0.01..10.0f32) {
        let mapped: Vec<f32> = logits.iter().map(|v| v * scale + shift).collect();
        let order_kept = logits.iter().zip(&mapped).all(|(a, ma)| {
            logits.iter().zip(&mapped).all(|(b, mb)| a.partial_cmp(b) == ma.partial_cmp(mb))
        });
        prop_assume!(order_kept);
        prop_assert_eq!(argmax(&logits), argmax(&mapped));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn refinement_never_raises_layer_mse(seed in 0..1000u64) {
        let (ds, model) = small_model(seed);
        let calib = calibration(&ds);
        let a = layerwise_optimize(&model, &calib, &SearchConfig::default()).unwrap();
        let gw = a.global_weight.unwrap();
        let ga = a.global_activation.unwrap();
        let acts = refnet::capture_activations(&model, &calib.inputs).unwrap();
        for (lf, (_, act)) in a.layers.iter().zip(&acts) {
            let w = refnet::layer_weights(&model, &lf.layer).unwrap();
            let w = w.as_fp32().unwrap();
            prop_assert!(error_metrics_values(w, lf.weight).unwrap().mse <= error_metrics_values(w, gw).unwrap().mse);
            prop_assert!(error_metrics_values(act, lf.activation).unwrap().mse <= error_metrics_values(act, ga).unwrap().mse);
        }
    }

    #[test]
    fn optimize_is_deterministic(seed in 0..1000u64) {
        let (ds, model) = small_model(seed);
        let calib = calibration(&ds);
        let cfg = SearchConfig::default();
        prop_assert_eq!(layerwise_optimize(&model, &calib, &cfg).unwrap(), layerwise_optimize(&model, &calib, &cfg).unwrap());
    }

    #[test]
    fn relu_outputs_are_nonnegative(seed in 0..1000u64) {
        let (ds, model) = small_model(seed);
        let (_, trace) = forward(&model, &ds.inputs, Mode::Fp32).unwrap();
        for l in &trace.layers[..trace.layers.len() - 1] {
            prop_assert!(l.post_activation.data.iter().all(|&v| v >= 0.0));
        }
        let stats = refnet::collect_activation_stats(&model, &ds.inputs).unwrap();
        prop_assert!(!elide_sign(&stats[0].1));
        for (_, s) in &stats[1..] {
            prop_assert!(elide_sign(s));
        }
    }

    #[test]
    fn forward_is_reproducible(seed in 0..1000u64) {
        let (ds, model) = small_model(seed);
        let (a, _) = forward(&model, &ds.inputs, Mode::Fp32).unwrap();
        let (b, _) = forward(&model, &ds.inputs, Mode::Fp32).unwrap();
        prop_assert_eq!(a, b);
        let (inputs, labels) = ds.validation();
        prop_assert_eq!(
            accuracy(&model, Mode::Fp32, &inputs, labels).unwrap(),
            accuracy(&model, Mode::Fp32, &inputs, labels).unwrap()
        );
    }
}

#[test]
fn identical_layers_share_the_global_bias() {
    let (ds, mut model) = small_model(3);
    // give the middle layer the first layer's weight magnitudes
    let names = refnet::dense_layer_names(&model);
    let w1 = refnet::layer_weights(&model, &names[0]).unwrap();
    let max1 = TensorStats::from_values(w1.as_fp32().unwrap()).unwrap().max_mag;
    for name in &names {
        let t = model.tensor_mut(&format!("{}.weight", name)).unwrap();
        if let ffp8_core::Payload::Fp32(v) = &mut t.payload {
            let m = v.iter().fold(0f32, |a, x| a.max(x.abs()));
            v.iter_mut().for_each(|x| *x *= max1 / m);
        }
    }
    let a = layerwise_optimize(&model, &calibration(&ds), &SearchConfig::default()).unwrap();
    let gw = a.global_weight.unwrap();
    for lf in &a.layers {
        assert_eq!(lf.weight.bias(), gw.bias(), "{}", lf.layer);
    }
}

#[test]
fn zero_batch_gives_the_bias_row() {
    let (_, model) = small_model(5);
    let batch = Matrix::zeros(2, 6);
    let (_, trace) = forward(&model, &batch, Mode::Fp32).unwrap();
    let bias = model.tensor("fc1.bias").unwrap().as_fp32().unwrap();
    assert_eq!(trace.layers[0].pre_activation.row(0), bias);
}
