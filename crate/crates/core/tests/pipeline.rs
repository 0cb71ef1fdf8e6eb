mod common;

use common::{net, random_stack, uniform_points, GridCdf, Part};
use dif_core::dif::{DifLayer, DifStack, Model, SavedModel, StackBuilder};
use dif_core::diffable::{ParameterStore, Tensor};
use dif_core::rng::stream;
use dif_core::targets::{
    load_csv_dataset, load_image_density, write_csv_dataset, write_pgm, GaussianMixture, TargetSpec,
};
use dif_core::train::{
    fit, fit_conditional, gem_step, gmm_em_fit, init_locations_from_data, warm_start_from_gmm, GemMode, Objective,
    TrainConfig, TrainData,
};
use dif_core::dif::ConditionalDifLayer;
use proptest::prelude::*;
use tempfile::TempDir;

fn mean_ll(stack: &DifStack, store: &ParameterStore, x: &Tensor) -> f64 {
    stack.log_density_batch(store, x).unwrap().iter().sum::<f64>() / x.rows() as f64
}

#[test]
fn gem_after_warm_start_never_drops_below_the_mixture() {
    let x = GaussianMixture::five_modes_1d().sample(800, &mut stream(1, 0));
    let gmm = gmm_em_fit(&x, 4, 300, 1).unwrap();
    let mut store = ParameterStore::new();
    let layer = DifLayer::location_scale("l0", 1, 4, &net(&[16, 16]), &mut store, &mut stream(1, 1)).unwrap();
    warm_start_from_gmm(&layer, &mut store, &gmm).unwrap();
    let stack = DifStack::single(layer);
    let start = mean_ll(&stack, &store, &x);
    assert!((start - gmm.final_log_likelihood()).abs() <= 1e-12 * start.abs());
    let mut cfg = TrainConfig::new(Objective::Gem);
    cfg.steps = 60;
    cfg.learning_rate = 0.01;
    let trace = fit(&stack, &mut store, TrainData::Samples(&x), &cfg).unwrap();
    let end = mean_ll(&stack, &store, &x);
    assert!(end > gmm.final_log_likelihood(), "{end} vs {}", gmm.final_log_likelihood());
    for w in trace.objectives().windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
    }
}

#[test]
fn cascaded_gem_steps_are_monotone_too() {
    let (stack, mut store) = random_stack(1, &[Part::Dif(2), Part::Dif(3)], 2, 0.2);
    let x = GaussianMixture::five_modes_1d().sample(300, &mut stream(2, 0));
    let mut prev = mean_ll(&stack, &store, &x);
    for _ in 0..20 {
        gem_step(&stack, &mut store, &x, 0.01, true, GemMode::Cascade).unwrap();
        let now = mean_ll(&stack, &store, &x);
        assert!(now >= prev - 1e-9 * prev.abs());
        prev = now;
    }
}

#[test]
fn saved_models_reload_with_identical_densities_and_samples() {
    let dir = TempDir::new().unwrap();
    let (stack, store) = random_stack(2, &[Part::Coupling, Part::Dif(3), Part::Coupling], 3, 0.3);
    let path = dir.path().join("m.json");
    let model = Model { stack, params: store };
    model.save(&path).unwrap();
    let SavedModel::Unconditional(back) = SavedModel::load(&path).unwrap() else {
        panic!("expected an unconditional model");
    };
    let pts = uniform_points(50, 2, 4.0, 3);
    let a = model.stack.log_density_batch(&model.params, &pts).unwrap();
    let b = back.stack.log_density_batch(&back.params, &pts).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
    }
    let s1 = model.stack.sample_backward(&model.params, 20, 9, true).unwrap();
    let s2 = back.stack.sample_backward(&back.params, 20, 9, true).unwrap();
    assert_eq!(s1.paths, s2.paths);
    for (u, v) in s1.points.data().iter().zip(s2.points.data()) {
        assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
    }
}

#[test]
fn image_file_to_fitted_model() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("img.pgm");
    let mut px = vec![0u16; 16 * 16];
    for r in 4..12 {
        for c in 2..7 {
            px[r * 16 + c] = 200;
        }
        for c in 10..14 {
            px[r * 16 + c] = 100;
        }
    }
    write_pgm(&path, 16, 16, &px).unwrap();
    let spec: TargetSpec = serde_json::from_value(serde_json::json!({"kind": "image_density", "path": "img.pgm"})).unwrap();
    let target = spec.load(dir.path()).unwrap();
    let x = target.sample(2000, 4).unwrap();
    let img = load_image_density(&path).unwrap();
    assert!(x.iter_rows().all(|p| img.pdf(p) > 0.0));
    let gmm = gmm_em_fit(&x, 2, 200, 4).unwrap();
    let mut means: Vec<f64> = gmm.means.iter().map(|m| m[0]).collect();
    means.sort_by(f64::total_cmp);
    assert!((means[0] - 4.5 / 16.0).abs() < 0.03, "{means:?}");
    assert!((means[1] - 12.0 / 16.0).abs() < 0.03, "{means:?}");
}

#[test]
fn csv_dataset_drives_a_conditional_fit() {
    let dir = TempDir::new().unwrap();
    let n = 2000;
    let mut rng = stream(5, 0);
    let omega = dif_core::rng::standard_normal(&mut rng, n, 1);
    let noise = dif_core::rng::standard_normal(&mut rng, n, 1);
    let x = Tensor::new(n, 1, omega.data().iter().zip(noise.data()).map(|(w, e)| 3.0 * w + 0.5 * e).collect());
    let path = dir.path().join("d.csv");
    write_csv_dataset(&path, &x, Some(&omega)).unwrap();
    let data = load_csv_dataset(&path).unwrap();
    assert_eq!(data.x, x);
    let mut store = ParameterStore::new();
    let layer = ConditionalDifLayer::new("c", 1, 1, 2, &net(&[8]), &[16], &mut store, &mut stream(5, 1)).unwrap();
    let mut cfg = TrainConfig::new(Objective::ConditionalMle);
    cfg.steps = 400;
    cfg.batch_size = Some(256);
    cfg.learning_rate = 0.01;
    let trace = fit_conditional(&layer, &mut store, &data.x, data.omega.as_ref().unwrap(), &cfg).unwrap();
    let first = trace.entries[0].objective;
    let last = trace.entries.last().unwrap().objective;
    // entropy of N(0, 0.25) is about -0.27; the unconditional spread is ~3
    assert!(last > first + 1.0, "{first} -> {last}");
}

#[test]
fn trained_one_dimensional_stack_stays_normalized() {
    let x = GaussianMixture::five_modes_1d().sample(600, &mut stream(6, 0));
    let mut store = ParameterStore::new();
    let mut rng = stream(6, 1);
    let stack = StackBuilder::new(1, &mut store, &mut rng)
        .dif(3, &net(&[8, 8]))
        .unwrap()
        .dif(2, &net(&[8]))
        .unwrap()
        .build()
        .unwrap();
    init_locations_from_data(stack.layers[0].as_dif().unwrap(), &mut store, &x).unwrap();
    let mut cfg = TrainConfig::new(Objective::Mle);
    cfg.steps = 150;
    cfg.learning_rate = 0.01;
    fit(&stack, &mut store, TrainData::Samples(&x), &cfg).unwrap();
    let cdf = GridCdf::new(&stack, &store, -30.0, 30.0, 60_001);
    assert!((cdf.total() - 1.0).abs() < 1e-6, "{}", cdf.total());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_stacks_give_finite_densities_and_valid_paths(
        seed in 0u64..10_000,
        k0 in 1usize..5,
        k1 in 1usize..4,
        with_coupling in any::<bool>(),
    ) {
        let mut parts = vec![Part::Dif(k0)];
        if with_coupling {
            parts.push(Part::Coupling);
        }
        parts.push(Part::Dif(k1));
        let (stack, store) = random_stack(2, &parts, seed, 0.3);
        let pts = uniform_points(20, 2, 6.0, seed);
        let ll = stack.log_density_batch(&store, &pts).unwrap();
        prop_assert!(ll.iter().all(|v| v.is_finite()));
        let out = stack.sample_backward(&store, 30, seed, true).unwrap();
        prop_assert!(out.points.all_finite());
        let ks: Vec<usize> = parts.iter().map(|p| match p { Part::Dif(k) => *k, Part::Coupling => 1 }).collect();
        for path in out.paths.unwrap() {
            prop_assert_eq!(path.len(), ks.len());
            for (u, k) in path.iter().zip(&ks) {
                prop_assert!(u < k);
            }
        }
        for p in pts.iter_rows() {
            let v: f64 = stack.forward_log_weights_at(&store, p).unwrap().iter().map(|l| l.exp()).sum();
            prop_assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn warm_start_matches_em_on_any_data(seed in 0u64..10_000, k in 1usize..5) {
        let x = uniform_points(60, 2, 3.0, seed);
        let gmm = gmm_em_fit(&x, k, 30, seed).unwrap();
        let mut store = ParameterStore::new();
        let layer = DifLayer::location_scale("l0", 2, k, &net(&[4]), &mut store, &mut stream(seed, 1)).unwrap();
        warm_start_from_gmm(&layer, &mut store, &gmm).unwrap();
        let stack = DifStack::single(layer);
        for p in uniform_points(10, 2, 5.0, seed + 1).iter_rows() {
            let a = stack.log_density_at(&store, p).unwrap();
            let b = gmm.log_pdf(p);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
