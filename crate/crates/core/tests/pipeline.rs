use ndarray::{Array1, Array2};

use prunekit::compensator::bias_delta;
use prunekit::criteria::{score_stade, score_wanda};
use prunekit::harness::{gen_toy_mlp, NormKind, ToyConfig};
use prunekit::mask_builder::build_mask;
use prunekit::oracle::{brute_force_single_prune, gen_instance, single_prune_objective, trial_rng, InstanceFamily};
use prunekit::pruner::{prune_container, prune_layer, reconstruction_mse, BiasUpdate, CALIB_SUFFIX};
use prunekit::{CalibrationBatch, ColumnStats, Criterion, PruneMask, PruneOptions, SparsitySpec, TensorContainer, WeightLayer};

fn toy(seed: u64, norm: NormKind) -> (TensorContainer, TensorContainer) {
    gen_toy_mlp(
        seed,
        &ToyConfig {
            dims: [16, 32, 8],
            norm,
            samples: 256,
        },
    )
    .unwrap()
}

fn half() -> SparsitySpec {
    SparsitySpec::unstructured(0.5).unwrap()
}

#[test]
fn zero_sparsity_leaves_layers_untouched() {
    let (model, calib) = toy(1, NormKind::None);
    for criterion in [Criterion::Magnitude, Criterion::Wanda, Criterion::Stade] {
        let opts = PruneOptions::new(criterion, SparsitySpec::unstructured(0.0).unwrap());
        let (out, report) = prune_container(&model, &calib, &opts).unwrap();
        for name in model.layer_names() {
            assert_eq!(out.layer(&name).unwrap(), model.layer(&name).unwrap());
            let r = report.get(&name).unwrap();
            assert_eq!(r.mse, 0.0);
            assert_eq!(r.achieved_sparsity, 0.0);
            assert_eq!(r.bias_delta_norm, 0.0);
        }
    }
}

#[test]
fn stade_w_follows_the_centering_flag() {
    let (model, calib) = toy(2, NormKind::LayerNorm);
    let opts = PruneOptions::new(Criterion::StadeW, half());
    let (out, report) = prune_container(&model, &calib, &opts).unwrap();
    assert_eq!(report.get("fc1").unwrap().criterion, "wanda");
    assert_eq!(report.get("fc2").unwrap().criterion, "stade");
    assert!(!report.get("fc1").unwrap().bias_update);
    assert!(report.get("fc2").unwrap().bias_update);

    let (wanda_out, _) = prune_container(&model, &calib, &PruneOptions::new(Criterion::Wanda, half())).unwrap();
    assert_eq!(
        PruneMask::read_from(&out, "fc1").unwrap(),
        PruneMask::read_from(&wanda_out, "fc1").unwrap()
    );
}

#[test]
fn achieved_sparsity_is_exact() {
    let (model, calib) = toy(3, NormKind::RmsNorm);
    for p in [0.25, 0.5, 0.7] {
        let (_, report) =
            prune_container(&model, &calib, &PruneOptions::new(Criterion::Stade, SparsitySpec::unstructured(p).unwrap()))
                .unwrap();
        for r in &report.layers {
            let rows = model.layer(&r.layer).unwrap().inputs();
            let expected = (p * rows as f64 + 1e-9).floor() / rows as f64;
            assert!((r.achieved_sparsity - expected).abs() < 1e-12, "{}: {}", r.layer, r.achieved_sparsity);
        }
    }
    let (_, report) = prune_container(
        &model,
        &calib,
        &PruneOptions::new(Criterion::Wanda, SparsitySpec::structured(2, 4).unwrap()),
    )
    .unwrap();
    assert!(report.layers.iter().all(|r| r.achieved_sparsity == 0.5));
}

#[test]
fn layers_prune_independently_of_order_and_threads() {
    let (model, calib) = toy(4, NormKind::None);
    let opts = PruneOptions::new(Criterion::Stade, half());
    let (whole, _) = prune_container(&model, &calib, &opts).unwrap();

    for name in ["fc2", "fc1"] {
        let rows = CalibrationBatch::from_f32(&calib.matrix(&format!("{name}{CALIB_SUFFIX}")).unwrap()).unwrap();
        let single = prune_layer(name, &model.layer(name).unwrap(), &rows, &opts).unwrap();
        assert_eq!(single.layer, whole.layer(name).unwrap());
    }
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let (out, _) = pool.install(|| prune_container(&model, &calib, &opts)).unwrap();
        assert_eq!(out.to_bytes().unwrap(), whole.to_bytes().unwrap());
    }
}

#[test]
fn stade_never_loses_to_wanda_on_single_prunes() {
    for trial in 0..200 {
        let inst = gen_instance(InstanceFamily::Uncentered, &mut trial_rng(11, trial));
        let batch = inst.batch();
        let stats = ColumnStats::from_batch(&batch).unwrap();
        let layer = inst.layer();
        let w = inst.weights_f64();
        let pick = |s: prunekit::ScoreMatrix| s.argmin_in_column(0);
        let stade = single_prune_objective(&w, f64::from(inst.bias), &batch, pick(score_stade(layer.weights(), &stats).unwrap()), true)
            .unwrap();
        let wanda = single_prune_objective(&w, f64::from(inst.bias), &batch, pick(score_wanda(layer.weights(), &stats).unwrap()), true)
            .unwrap();
        assert!(stade.objective <= wanda.objective * (1.0 + 1e-9) + 1e-9, "trial {trial}");
    }
}

#[test]
fn wanda_and_stade_agree_on_centered_data() {
    for trial in 0..200 {
        let inst = gen_instance(InstanceFamily::Centered, &mut trial_rng(12, trial));
        let stats = ColumnStats::from_batch(&inst.batch()).unwrap();
        let layer = inst.layer();
        let a = score_wanda(layer.weights(), &stats).unwrap();
        let b = score_stade(layer.weights(), &stats).unwrap();
        assert_eq!(a.argmin_in_column(0), b.argmin_in_column(0), "trial {trial}");
    }
}

#[test]
fn oracle_objective_matches_reconstruction_mse() {
    for trial in 0..100 {
        let inst = gen_instance(InstanceFamily::Uncentered, &mut trial_rng(13, trial));
        let batch = inst.batch();
        let stats = ColumnStats::from_batch(&batch).unwrap();
        let w = inst.weights_f64();
        let best = brute_force_single_prune(&w, f64::from(inst.bias), &batch, true).unwrap();

        let layer = inst.layer();
        let mut m = Array2::from_elem((w.len(), 1), false);
        m[[best.index, 0]] = true;
        let mask = PruneMask::new(m);
        let delta = bias_delta(&layer, &mask, &stats).unwrap();
        assert!((f64::from(inst.bias) + delta[0] - best.bias).abs() <= 1e-9 * (1.0 + best.bias.abs()));

        // Residual MSE in f64 so no f32 bias rounding enters the comparison.
        let dropped = Array2::from_shape_fn((w.len(), 1), |(j, _)| if j == best.index { 0.0 } else { w[j] });
        let full = Array2::from_shape_fn((w.len(), 1), |(j, _)| w[j]);
        let out_full = batch.rows().dot(&full).mapv(|v| v + f64::from(inst.bias));
        let out_pruned = batch.rows().dot(&dropped).mapv(|v| v + best.bias);
        let mse = (&out_full - &out_pruned).mapv(|d| d * d).sum() / batch.len() as f64;
        assert!((best.objective - mse).abs() <= 1e-9 * (1.0 + mse), "trial {trial}");

        // With the optimal bias the error is the pruned input's variance times W^2.
        let var = stats.population_var()[best.index];
        assert!((mse - var * w[best.index].powi(2)).abs() <= 1e-6 * (1.0 + mse));
    }
}

#[test]
fn pruned_model_error_matches_report() {
    let (model, calib) = toy(5, NormKind::None);
    let mut opts = PruneOptions::new(Criterion::Stade, half());
    opts.holdout_fraction = 0.0;
    let (out, report) = prune_container(&model, &calib, &opts).unwrap();
    for r in &report.layers {
        assert_eq!(r.mse_split, "calibration");
        let rows = CalibrationBatch::from_f32(&calib.matrix(&format!("{}{CALIB_SUFFIX}", r.layer)).unwrap()).unwrap();
        let mse = reconstruction_mse(&model.layer(&r.layer).unwrap(), &out.layer(&r.layer).unwrap(), &rows).unwrap();
        assert_eq!(mse, r.mse);
    }
}

#[test]
fn bias_update_can_be_forced_off() {
    let (model, calib) = toy(6, NormKind::None);
    let mut opts = PruneOptions::new(Criterion::Stade, half());
    opts.bias_update = BiasUpdate::Off;
    let (out, report) = prune_container(&model, &calib, &opts).unwrap();
    for name in model.layer_names() {
        assert_eq!(out.layer(&name).unwrap().bias(), model.layer(&name).unwrap().bias());
        assert_eq!(report.get(&name).unwrap().bias_delta_norm, 0.0);
    }
}

#[test]
fn missing_bias_is_created_only_when_needed() {
    let w = Array2::from_shape_vec((2, 1), vec![2.0f32, 1.0]).unwrap();
    let layer = WeightLayer::new(w, None, false).unwrap();
    let calib = CalibrationBatch::new(ndarray::array![[1.0, 3.0], [1.0, 5.0], [1.0, 4.0], [1.0, 6.0]]).unwrap();
    let mut opts = PruneOptions::new(Criterion::Stade, SparsitySpec::unstructured(0.5).unwrap());
    opts.holdout_fraction = 0.0;
    let r = prune_layer("l", &layer, &calib, &opts).unwrap();
    assert!(r.report.bias_added);
    assert_eq!(r.layer.bias(), Some(&Array1::from_vec(vec![2.0f32])));
    assert!(r.report.mse < 1e-12);
}

#[test]
fn mismatched_centering_flag_is_reported() {
    let (model, calib) = toy(7, NormKind::None);
    let mut flagged = model.clone();
    let fc1 = model.layer("fc1").unwrap();
    flagged
        .insert_layer("fc1", &WeightLayer::new(fc1.weights().clone(), fc1.bias().cloned(), true).unwrap())
        .unwrap();
    let (_, report) = prune_container(&flagged, &calib, &PruneOptions::new(Criterion::StadeW, half())).unwrap();
    let r = report.get("fc1").unwrap();
    assert_eq!(r.classified_centered, Some(false));
    assert!(r.warning.is_some());
    assert_eq!(r.criterion, "wanda");
}

#[test]
fn missing_calibration_is_an_error() {
    let (model, mut calib) = toy(8, NormKind::None);
    calib.remove("fc2.calib");
    let err = prune_container(&model, &calib, &PruneOptions::new(Criterion::Wanda, half())).unwrap_err();
    assert!(err.to_string().contains("fc2"));
}

#[test]
fn masks_follow_scores() {
    let (model, calib) = toy(9, NormKind::None);
    let (out, _) = prune_container(&model, &calib, &PruneOptions::new(Criterion::Magnitude, half())).unwrap();
    let fc2 = model.layer("fc2").unwrap();
    let expected = build_mask(&prunekit::criteria::score_magnitude(fc2.weights()).unwrap(), half()).unwrap();
    assert_eq!(PruneMask::read_from(&out, "fc2").unwrap(), expected);
}
