use super::*;
use crate::diffable::logsumexp;
use crate::nn::Activation;
use crate::rng::{standard_normal, stream};
use proptest::prelude::*;
use rand::Rng;

fn small_cfg() -> WeightNetConfig {
    WeightNetConfig {
        hidden: vec![8, 8],
        activation: Activation::Tanh,
    }
}

/// Random location-scale layer with a random weight network.
fn random_layer(
    prefix: &str,
    dim: usize,
    k: usize,
    seed: u64,
    store: &mut ParameterStore,
) -> DifLayer {
    let mut rng = stream(seed, 1);
    let layer = DifLayer::location_scale(prefix, dim, k, &small_cfg(), store, &mut rng).unwrap();
    for m in layer.affine_maps().unwrap() {
        let loc: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.7..0.5)).collect();
        m.set(store, &loc, &ls).unwrap();
    }
    layer
}

fn random_points(n: usize, d: usize, seed: u64, half: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 7);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-half..half)).collect())
        .collect()
}

fn grid_1d(lo: f64, hi: f64, n: usize) -> (Tensor, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    (Tensor::column(&xs), h)
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

fn normal_log_pdf(x: f64, mu: f64, s: f64) -> f64 {
    let z = (x - mu) / s;
    -0.5 * z * z - s.ln() - 0.5 * LN_2PI
}

/// A 1-D Gaussian mixture recorded on the tape.
struct Mixture1d {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl LogDensity for Mixture1d {
    fn dim(&self) -> usize {
        1
    }

    fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let cols: Vec<Var<'a>> = (0..self.weights.len())
            .map(|k| {
                let z = x.add_scalar(-self.means[k]).scale(1.0 / self.sds[k]);
                z.square()
                    .scale(-0.5)
                    .add_scalar(self.weights[k].ln() - self.sds[k].ln() - 0.5 * LN_2PI)
            })
            .collect();
        Ok(bind.tape().concat_cols(&cols).logsumexp_rows())
    }
}

#[test]
fn single_identity_layer_is_the_standard_normal() {
    let mut store = ParameterStore::new();
    let mut rng = stream(0, 0);
    let layer = DifLayer::location_scale("l0", 1, 1, &small_cfg(), &mut store, &mut rng).unwrap();
    let stack = DifStack::single(layer);
    let v = stack.log_density_at(&store, &[0.0]).unwrap();
    assert!((v + 0.918939).abs() < 1e-6);
    assert_eq!(v, -0.5 * LN_2PI);
}

#[test]
fn constant_weights_give_the_gaussian_mixture_density() {
    for seed in 0..20 {
        let mut store = ParameterStore::new();
        let layer = random_layer("l0", 2, 3, seed, &mut store);
        let alpha = [0.2, 0.5, 0.3];
        layer.weightnet.init_for_mixture(&mut store, &alpha).unwrap();
        let comps: Vec<(Vec<f64>, Vec<f64>)> = layer
            .affine_maps()
            .unwrap()
            .iter()
            .map(|m| (m.loc(&store).unwrap().to_vec(), m.log_scale(&store).unwrap().to_vec()))
            .collect();
        let stack = DifStack::single(layer);
        let pts = random_points(100, 2, seed, 6.0);
        let got = stack.log_density_batch(&store, &Tensor::from_points(&pts, 2)).unwrap();
        for (p, g) in pts.iter().zip(got) {
            let terms: Vec<f64> = comps
                .iter()
                .zip(alpha)
                .map(|((mu, ls), a)| {
                    a.ln() + (0..2).map(|j| normal_log_pdf(p[j], mu[j], ls[j].exp())).sum::<f64>()
                })
                .collect();
            let want = logsumexp(&terms);
            assert!((g - want).abs() <= 1e-12 * want.abs().max(1.0), "{g} vs {want}");
        }
    }
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let mut store = ParameterStore::new();
    let stack = DifStack::single(random_layer("l0", 1, 4, 3, &mut store));
    let (grid, h) = grid_1d(-30.0, 30.0, 60001);
    let lp = stack.log_density_batch(&store, &grid).unwrap();
    let dens: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let total = trapezoid(&dens, h);
    assert!((total - 1.0).abs() <= 1e-6, "integral {total}");
}

#[test]
fn forward_weights_are_normalized_numerator_terms() {
    let mut store = ParameterStore::new();
    let layer = random_layer("l0", 2, 4, 5, &mut store);
    let stack = DifStack::single(layer.clone());
    for p in random_points(50, 2, 5, 5.0) {
        let lv = stack.forward_log_weights_at(&store, &p).unwrap();
        let s: f64 = lv.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-12);
        let log_psi = stack.log_density_at(&store, &p).unwrap();
        for (k, m) in layer.maps.iter().enumerate() {
            let z = m.forward_point(&store, &p).unwrap();
            let ld = m.log_abs_det_jacobian(&store, &p).unwrap();
            let lw = layer.weightnet.log_weights_at(&store, &z, None).unwrap()[k];
            let numerator = lw + standard_normal_log_pdf_point(&z) + ld;
            assert!((log_psi + lv[k] - numerator).abs() <= 1e-12);
        }
    }
    let mut store = ParameterStore::new();
    let single = DifStack::single(random_layer("s", 2, 1, 6, &mut store));
    assert_eq!(single.forward_log_weights_at(&store, &[0.3, 9.0]).unwrap(), vec![0.0]);
}

#[test]
fn identity_stack_returns_prior_draws() {
    let mut store = ParameterStore::new();
    let mut rng = stream(0, 0);
    let layer = DifLayer::location_scale("l0", 3, 1, &small_cfg(), &mut store, &mut rng).unwrap();
    let stack = DifStack::single(layer);
    let out = stack.sample_backward(&store, 5000, 42, true).unwrap();
    let direct = standard_normal(&mut stream(42, 0), 5000, 3);
    assert_eq!(out.points, direct);
    assert!(out.paths.unwrap().iter().all(|p| p == &vec![0]));
}

#[test]
fn mixture_regime_occupancy_matches_alpha() {
    let mut store = ParameterStore::new();
    let layer = random_layer("l0", 2, 3, 8, &mut store);
    let alpha = [0.15, 0.6, 0.25];
    layer.weightnet.init_for_mixture(&mut store, &alpha).unwrap();
    let n = 100_000;
    let out = DifStack::single(layer).sample_backward(&store, n, 9, true).unwrap();
    let mut counts = [0usize; 3];
    for p in out.paths.unwrap() {
        counts[p[0]] += 1;
    }
    for (c, a) in counts.iter().zip(alpha) {
        let sd = (n as f64 * a * (1.0 - a)).sqrt();
        assert!((*c as f64 - n as f64 * a).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn backward_samples_follow_the_density() {
    let mut store = ParameterStore::new();
    let stack = DifStack::single(random_layer("l0", 1, 4, 11, &mut store));
    let (grid, h) = grid_1d(-30.0, 30.0, 60001);
    let dens: Vec<f64> = stack
        .log_density_batch(&store, &grid)
        .unwrap()
        .iter()
        .map(|l| l.exp())
        .collect();
    let mut cdf = vec![0.0; dens.len()];
    for i in 1..dens.len() {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
    }
    let n = 100_000;
    let mut xs = stack.sample_backward(&store, n, 12, false).unwrap().points.into_data();
    xs.sort_by(f64::total_cmp);
    let mut ks: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let t = ((x + 30.0) / h).clamp(0.0, (cdf.len() - 1) as f64);
        let j = (t.floor() as usize).min(cdf.len() - 2);
        let f = cdf[j] + (t - j as f64) * (cdf[j + 1] - cdf[j]);
        ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
    }
    assert!(ks <= 0.006, "KS = {ks}");
}

#[test]
fn forward_sampling_support_and_frequencies() {
    let mut store = ParameterStore::new();
    let layer = random_layer("l0", 2, 3, 13, &mut store);
    let stack = DifStack::single(layer.clone());
    let x = [0.4, -0.8];
    let images: Vec<Vec<f64>> = layer.maps.iter().map(|m| m.forward_point(&store, &x).unwrap()).collect();
    let v: Vec<f64> = stack
        .forward_log_weights_at(&store, &x)
        .unwrap()
        .iter()
        .map(|l| l.exp())
        .collect();
    let n = 100_000;
    let batch = Tensor::from_points(&vec![x.to_vec(); n], 2);
    let (z, us) = stack.sample_forward_batch(&store, &batch, &mut stream(14, 0)).unwrap();
    let mut counts = [0usize; 3];
    for (i, u) in us.iter().enumerate() {
        counts[*u] += 1;
        assert_eq!(z.row_slice(i), images[*u].as_slice());
    }
    for (c, p) in counts.iter().zip(&v) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{counts:?} vs {v:?}");
    }

    let mut store = ParameterStore::new();
    let single = random_layer("s", 2, 1, 15, &mut store);
    let want = single.maps[0].forward_point(&store, &x).unwrap();
    let stack = DifStack::single(single);
    for seed in 0..5 {
        let (z, u) = stack.sample_forward(&store, &x, &mut stream(seed, 0)).unwrap();
        assert_eq!((z, u), (want.clone(), 0));
    }
}

#[test]
fn phi_special_cases() {
    let std = Mixture1d {
        weights: vec![1.0],
        means: vec![0.0],
        sds: vec![1.0],
    };
    let mut store = ParameterStore::new();
    let mut rng = stream(0, 0);
    let id = DifStack::single(DifLayer::location_scale("i", 1, 1, &small_cfg(), &mut store, &mut rng).unwrap());
    let v = id.phi_log_density_at(&store, &std, &[0.0]).unwrap();
    assert!((v + 0.5 * LN_2PI).abs() <= 1e-15);

    let p = Mixture1d {
        weights: vec![0.3, 0.7],
        means: vec![-1.0, 2.0],
        sds: vec![0.5, 1.5],
    };
    let mut store = ParameterStore::new();
    let layer = random_layer("a", 1, 1, 16, &mut store);
    let map = layer.maps[0].clone();
    let stack = DifStack::single(layer);
    for z in [-3.0, -0.2, 0.0, 1.7, 4.0] {
        let (x, ld) = map.inverse_batch(&store, &Tensor::row(&[z])).unwrap();
        let want = log_density_points(&p, &x).unwrap()[0] + ld[0];
        let got = stack.phi_log_density_at(&store, &p, &[z]).unwrap();
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn phi_integrates_to_one() {
    let p = Mixture1d {
        weights: vec![0.25, 0.75],
        means: vec![-2.0, 1.0],
        sds: vec![0.6, 1.1],
    };
    let mut store = ParameterStore::new();
    let stack = DifStack::single(random_layer("l0", 1, 3, 17, &mut store));
    let (grid, h) = grid_1d(-30.0, 30.0, 60001);
    let mut vals = Vec::with_capacity(grid.rows());
    for start in (0..grid.rows()).step_by(4000) {
        let rows: Vec<usize> = (start..(start + 4000).min(grid.rows())).collect();
        let chunk = grid.select_rows(&rows);
        vals.extend(
            with_bind(&store, |b| {
                Ok(stack.phi_log_density(b, &p, b.constant(chunk))?.to_tensor().into_data())
            })
            .unwrap(),
        );
    }
    let dens: Vec<f64> = vals.iter().map(|l| l.exp()).collect();
    let total = trapezoid(&dens, h);
    assert!((total - 1.0).abs() <= 1e-6, "integral {total}");
}

fn two_layer_stack(k0: usize, k1: usize, seed: u64) -> (DifStack, ParameterStore) {
    let mut store = ParameterStore::new();
    let l0 = random_layer("l0", 2, k0, seed, &mut store);
    let l1 = random_layer("l1", 2, k1, seed + 1000, &mut store);
    let stack = DifStack::new(2, vec![Layer::Dif(l0), Layer::Dif(l1)]).unwrap();
    (stack, store)
}

#[test]
fn cascade_of_single_maps_is_a_flow_composition() {
    let (stack, store) = two_layer_stack(1, 1, 21);
    let expanded = expand_cascade(&stack).unwrap();
    let maps = expanded.maps();
    assert_eq!(maps.len(), 1);
    for p in random_points(100, 2, 21, 5.0) {
        let z = maps[0].forward_point(&store, &p).unwrap();
        let want = standard_normal_log_pdf_point(&z) + maps[0].log_abs_det_jacobian(&store, &p).unwrap();
        let a = stack.log_density_at(&store, &p).unwrap();
        let b = expanded.log_density_at(&store, &p).unwrap();
        assert!((a - want).abs() <= 1e-12);
        assert!((b - want).abs() <= 1e-12);
    }
}

/// Direct sum over every `(k0, k1)` pair using the composed maps and the
/// weight definition through the inverse of the inner map.
fn brute_force_cascade(stack: &DifStack, store: &ParameterStore, x: &[f64]) -> f64 {
    let l0 = stack.layers[0].as_dif().unwrap();
    let l1 = stack.layers[1].as_dif().unwrap();
    let mut terms = Vec::new();
    for (k0, m0) in l0.maps.iter().enumerate() {
        for (k1, m1) in l1.maps.iter().enumerate() {
            let y = m0.forward_point(store, x).unwrap();
            let z = m1.forward_point(store, &y).unwrap();
            let ld = m0.log_abs_det_jacobian(store, x).unwrap() + m1.log_abs_det_jacobian(store, &y).unwrap();
            let back = m1.inverse_point(store, &z).unwrap();
            let w0 = l0.weightnet.log_weights_at(store, &back, None).unwrap()[k0];
            let w1 = l1.weightnet.log_weights_at(store, &z, None).unwrap()[k1];
            terms.push(w0 + w1 + standard_normal_log_pdf_point(&z) + ld);
        }
    }
    logsumexp(&terms)
}

#[test]
fn cascade_expansion_matches_the_stack() {
    for seed in 0..20 {
        let (stack, store) = two_layer_stack(2, 3, 100 + seed);
        let expanded = expand_cascade(&stack).unwrap();
        assert_eq!(expanded.k(), 6);
        let pts = random_points(100, 2, seed, 5.0);
        let rec = stack.log_density_batch(&store, &Tensor::from_points(&pts, 2)).unwrap();
        for (p, r) in pts.iter().zip(rec) {
            let e = expanded.log_density_at(&store, p).unwrap();
            let b = brute_force_cascade(&stack, &store, p);
            assert!((r - e).abs() <= 1e-10, "{r} vs {e}");
            assert!((r - b).abs() <= 1e-10, "{r} vs {b}");
        }
    }
}

#[test]
fn expanded_weights_and_maps_follow_the_definitions() {
    let (stack, store) = two_layer_stack(2, 3, 31);
    let expanded = expand_cascade(&stack).unwrap();
    let maps = expanded.maps();
    let l0 = stack.layers[0].as_dif().unwrap();
    let l1 = stack.layers[1].as_dif().unwrap();
    for z in random_points(30, 2, 31, 4.0) {
        let lw = expanded.log_weights_at(&store, &z).unwrap();
        let s: f64 = lw.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-12);
        for k0 in 0..2 {
            for k1 in 0..3 {
                let p = k0 * 3 + k1;
                let back = l1.maps[k1].inverse_point(&store, &z).unwrap();
                let want = l0.weightnet.log_weights_at(&store, &back, None).unwrap()[k0]
                    + l1.weightnet.log_weights_at(&store, &z, None).unwrap()[k1];
                assert!((lw[p] - want).abs() <= 1e-12);
                let x = maps[p].inverse_point(&store, &z).unwrap();
                let direct = l0.maps[k0].inverse_point(&store, &back).unwrap();
                for (a, b) in x.iter().zip(&direct) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn cascade_needs_two_layers() {
    let mut store = ParameterStore::new();
    let stack = DifStack::single(random_layer("l0", 2, 2, 1, &mut store));
    assert!(expand_cascade(&stack).is_err());
}

fn conditional(k: usize, hidden: &[usize], seed: u64, store: &mut ParameterStore) -> ConditionalDifLayer {
    let mut rng = stream(seed, 0);
    let layer = ConditionalDifLayer::new("c", 1, 2, k, &small_cfg(), hidden, store, &mut rng).unwrap();
    store.jitter(&mut rng, 0.4);
    layer
}

#[test]
fn conditional_density_integrates_for_each_covariate() {
    let mut store = ParameterStore::new();
    let layer = conditional(3, &[6], 40, &mut store);
    let (grid, h) = grid_1d(-30.0, 30.0, 60001);
    for omega in [[0.0, 0.0], [1.5, -2.0], [-3.0, 0.7]] {
        let om = Tensor::from_points(&vec![omega.to_vec(); grid.rows()], 2);
        let lp = layer.log_density_batch(&store, &grid, &om).unwrap();
        let dens: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let total = trapezoid(&dens, h);
        assert!((total - 1.0).abs() <= 1e-6, "integral {total} at {omega:?}");
    }
}

#[test]
fn conditional_shifted_normal() {
    let mut store = ParameterStore::new();
    let mut rng = stream(0, 0);
    let layer = ConditionalDifLayer::new("c", 1, 1, 1, &small_cfg(), &[], &mut store, &mut rng).unwrap();
    store.set(&layer.covariate_net.weight_name(0), &[1.0, 0.0]).unwrap();
    store.set(&layer.covariate_net.bias_name(0), &[0.0, 0.0]).unwrap();
    for w in [-2.0, 0.0, 3.5] {
        let v = layer.log_density_at(&store, &[w], &[w]).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() <= 1e-14);
        let off = layer.log_density_at(&store, &[w + 1.0], &[w]).unwrap();
        assert!((off - normal_log_pdf(w + 1.0, w, 1.0)).abs() <= 1e-14);
    }
}

#[test]
fn conditional_ignoring_covariates_is_unconditional() {
    let mut store = ParameterStore::new();
    let cond = conditional(3, &[5], 41, &mut store);
    let mut rng = stream(41, 1);
    let plain = DifLayer::location_scale("p", 1, 3, &small_cfg(), &mut store, &mut rng).unwrap();
    // covariate net: zero every weight so the output is its last bias
    let net = &cond.covariate_net;
    for l in 0..net.n_layers() {
        let n = store.get(&net.weight_name(l)).unwrap().len();
        store.set(&net.weight_name(l), &vec![0.0; n]).unwrap();
    }
    let out = store.get(&net.bias_name(net.n_layers() - 1)).unwrap().to_vec();
    for (k, m) in plain.affine_maps().unwrap().iter().enumerate() {
        m.set(&mut store, &[out[k]], &[out[3 + k]]).unwrap();
    }
    // weight net: copy z-columns, zero covariate columns
    let (cn, pn) = (cond.weightnet.net.as_ref().unwrap(), plain.weightnet.net.as_ref().unwrap());
    let w = store.get(&cn.weight_name(0)).unwrap().to_vec();
    let rows = w.len() / 3;
    let mut w_cond = w.clone();
    let mut w_plain = Vec::new();
    for r in 0..rows {
        w_plain.push(w[r * 3]);
        w_cond[r * 3 + 1] = 0.0;
        w_cond[r * 3 + 2] = 0.0;
    }
    store.set(&cn.weight_name(0), &w_cond).unwrap();
    store.set(&pn.weight_name(0), &w_plain).unwrap();
    for l in 0..cn.n_layers() {
        if l > 0 {
            let v = store.get(&cn.weight_name(l)).unwrap().to_vec();
            store.set(&pn.weight_name(l), &v).unwrap();
        }
        let v = store.get(&cn.bias_name(l)).unwrap().to_vec();
        store.set(&pn.bias_name(l), &v).unwrap();
    }
    let stack = DifStack::single(plain);
    for (i, x) in random_points(30, 1, 41, 6.0).iter().enumerate() {
        let omega = [i as f64 - 10.0, 0.1 * i as f64];
        let a = cond.log_density_at(&store, x, &omega).unwrap();
        let b = stack.log_density_at(&store, x).unwrap();
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conditional_samples_are_finite_and_shaped() {
    let mut store = ParameterStore::new();
    let layer = conditional(2, &[4], 42, &mut store);
    let omega = Tensor::from_points(&random_points(50, 2, 1, 2.0), 2);
    let x = layer.sample(&store, &omega, &mut stream(1, 0)).unwrap();
    assert_eq!(x.shape(), (50, 1));
    assert!(x.all_finite());
}

#[test]
fn model_file_round_trip() {
    let mut store = ParameterStore::new();
    let mut rng = stream(50, 0);
    let stack = StackBuilder::new(2, &mut store, &mut rng)
        .coupling(Some(&[6]))
        .unwrap()
        .dif(2, &small_cfg())
        .unwrap()
        .coupling(Some(&[6]))
        .unwrap()
        .build()
        .unwrap();
    store.jitter(&mut rng, 0.2);
    let model = Model { stack, params: store };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.stack, model.stack);
    let pts = Tensor::from_points(&random_points(20, 2, 50, 3.0), 2);
    let a = back.stack.log_density_batch(&back.params, &pts).unwrap();
    let b = model.stack.log_density_batch(&model.params, &pts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["version"], MODEL_VERSION);
    assert_eq!(v["layers"][1]["kind"], "dif");
    assert_eq!(v["layers"][0]["kind"], "coupling");
    assert!(ConditionalModel::load(&path).is_err());

    let mut bad = v.clone();
    bad["version"] = "dif-lab/model/v0".into();
    std::fs::write(&path, bad.to_string()).unwrap();
    assert!(matches!(Model::load(&path), Err(DifError::Version(_))));
}

#[test]
fn coupling_stack_normalizes_in_two_dimensions() {
    let mut store = ParameterStore::new();
    let mut rng = stream(60, 0);
    let stack = StackBuilder::new(2, &mut store, &mut rng)
        .coupling(Some(&[8]))
        .unwrap()
        .dif(2, &small_cfg())
        .unwrap()
        .build()
        .unwrap();
    store.jitter(&mut rng, 0.3);
    let n = 300;
    let half = 9.0;
    let h = 2.0 * half / (n - 1) as f64;
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pts.push(vec![-half + h * i as f64, -half + h * j as f64]);
        }
    }
    let lp = stack.log_density_batch(&store, &Tensor::from_points(&pts, 2)).unwrap();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            total += wi * wj * lp[i * n + j].exp();
        }
    }
    total *= h * h;
    assert!((total - 1.0).abs() <= 1e-3, "integral {total}");
}

#[test]
fn rejects_bad_inputs() {
    let mut store = ParameterStore::new();
    let stack = DifStack::single(random_layer("l0", 2, 2, 70, &mut store));
    assert!(matches!(
        stack.log_density_at(&store, &[f64::NAN, 0.0]),
        Err(DifError::NonFinite(_))
    ));
    assert!(matches!(
        stack.log_density_at(&store, &[0.0]),
        Err(DifError::DimensionMismatch { .. })
    ));
    assert!(stack.sample_backward(&store, 0, 1, false).is_err());
}

#[test]
fn far_tails_underflow_to_negative_infinity_without_error() {
    let mut store = ParameterStore::new();
    let stack = DifStack::single(random_layer("l0", 1, 2, 71, &mut store));
    let v = stack.log_density_at(&store, &[1e200]).unwrap();
    assert!(v == f64::NEG_INFINITY || v < -1e300);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_and_backward_weights_lie_on_the_simplex(
        seed in 0u64..1000,
        x0 in -8.0f64..8.0,
        x1 in -8.0f64..8.0,
    ) {
        let mut store = ParameterStore::new();
        let layer = random_layer("l0", 2, 5, seed, &mut store);
        let w: f64 = layer.weightnet.log_weights_at(&store, &[x0, x1], None).unwrap().iter().map(|l| l.exp()).sum();
        let stack = DifStack::single(layer);
        let v: f64 = stack.forward_log_weights_at(&store, &[x0, x1]).unwrap().iter().map(|l| l.exp()).sum();
        prop_assert!((w - 1.0).abs() <= 1e-12);
        prop_assert!((v - 1.0).abs() <= 1e-12);
    }
}
