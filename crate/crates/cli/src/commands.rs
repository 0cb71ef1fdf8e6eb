//! Subcommand implementations.
//!
//! Each fitting command loads and checks its whole config, materializes the
//! data and the initial model, and only then trains. Outputs are written
//! once everything has succeeded, so a failed run leaves nothing behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::seq::SliceRandom;
use serde_json::{json, Value};

use dif_core::dif::{ConditionalDifLayer, ConditionalModel, DifStack, Model, SavedModel, StackBuilder};
use dif_core::diffable::{ParameterStore, Tensor};
use dif_core::rng::stream;
use dif_core::targets::{load_csv_dataset, write_csv_dataset, Axis, Dataset, DensityGrid, Target, TargetSpec};
use dif_core::train::{
    fit, fit_conditional, gmm_em_fit, init_locations_from_data, init_locations_from_prior, sir_resample,
    warm_start_from_gmm, GmmFit, Objective, TraceRecord, TrainData,
};

use crate::config::{self, check_layers, config_error, DifInit, LayerConfig, LoadedConfig, Overrides, RunConfig};
use crate::error::{CliError, CliResult, Context};

/// Fraction of the points held out for evaluation.
const HELD_OUT_FRACTION: f64 = 0.1;

/// Independent seeds for the separate random stages of a run.
fn subseed(seed: u64, stage: u64) -> u64 {
    seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const STAGE_DATA: u64 = 1;
const STAGE_SIR: u64 = 2;
const STAGE_EM: u64 = 3;
const STAGE_PRIOR_INIT: u64 = 4;

/// Seeded shuffle, then the first tenth (at least one point) is held out.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 21));
    let held = ((n as f64 * HELD_OUT_FRACTION).round() as usize).clamp(1, n - 1);
    let (h, t) = idx.split_at(held);
    (t.to_vec(), h.to_vec())
}

fn build_stack(layers: &[LayerConfig], dim: usize, store: &mut ParameterStore, seed: u64) -> CliResult<DifStack> {
    let mut rng = stream(seed, 22);
    let mut b = StackBuilder::new(dim, store, &mut rng);
    for (i, layer) in layers.iter().enumerate() {
        let at = format!("model.layers[{i}]");
        b = match layer {
            LayerConfig::Dif { k, weightnet, .. } => b.dif(*k, weightnet).at(&at)?,
            LayerConfig::Coupling { hidden } => b.coupling(hidden.as_deref()).at(&at)?,
            LayerConfig::ConditionalDif { .. } => return Err(config_error(format!("{at}: not allowed in a stack"))),
        };
    }
    b.build().at("model")
}

/// Applies each DIF layer's `init`; returns the EM fit behind a warm start.
fn initialize(
    stack: &DifStack,
    store: &mut ParameterStore,
    layers: &[LayerConfig],
    x: Option<&Tensor>,
    seed: u64,
) -> CliResult<Option<GmmFit>> {
    let mut gmm = None;
    for (i, (layer, lc)) in stack.layers.iter().zip(layers).enumerate() {
        let (LayerConfig::Dif { init, em_iters, k, .. }, Some(dif)) = (lc, layer.as_dif()) else {
            continue;
        };
        let at = format!("model.layers[{i}].init");
        let data = || x.ok_or_else(|| config_error(format!("{at}: needs samples")));
        match init {
            DifInit::Identity => {}
            DifInit::Data => init_locations_from_data(dif, store, data()?).at(&at)?,
            DifInit::Gmm => {
                let fit = gmm_em_fit(data()?, *k, *em_iters, subseed(seed, STAGE_EM)).at(&at)?;
                warm_start_from_gmm(dif, store, &fit).at(&at)?;
                gmm = Some(fit);
            }
            DifInit::Prior => init_locations_from_prior(dif, store, subseed(seed, STAGE_PRIOR_INIT + i as u64)).at(&at)?,
        }
    }
    Ok(gmm)
}

fn mean_log_likelihood(stack: &DifStack, store: &ParameterStore, x: &Tensor, what: &str) -> CliResult<f64> {
    let ll = stack.log_density_batch(store, x).at(what)?;
    finite_mean(&ll, what)
}

fn finite_mean(values: &[f64], what: &str) -> CliResult<f64> {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    if m.is_finite() {
        Ok(m)
    } else {
        Err(CliError::Numeric(anyhow!("{what}: mean log-likelihood is {m}")))
    }
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    x.select_rows(idx)
}

fn ensure_output_dir_usable(dir: &Path) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(config_error(format!("output_dir: {} exists and is not a directory", dir.display())));
    }
    Ok(())
}

fn objective_name(o: Objective) -> Value {
    serde_json::to_value(o).expect("objective serializes")
}

fn trace_summary(trace: &TraceRecord) -> Value {
    let obj = trace.objectives();
    json!({
        "steps_completed": trace.len(),
        "converged": trace.converged,
        "initial_objective": obj.first(),
        "final_objective": obj.last(),
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(a), Value::Object(b)) = (&mut base, extra) {
        a.extend(b);
    }
    base
}

fn header(command: &str, lc: &LoadedConfig) -> Value {
    json!({
        "command": command,
        "seed": lc.run.seed,
        "config_hash": lc.hash,
        "target": lc.run.target.kind(),
        "objective": objective_name(lc.run.train.objective),
    })
}

struct Outputs<'a> {
    dir: &'a Path,
    trace: &'a TraceRecord,
    summary: &'a Value,
}

impl Outputs<'_> {
    fn write(&self, save_model: impl FnOnce(&Path) -> dif_core::Result<()>) -> CliResult<()> {
        std::fs::create_dir_all(self.dir).output("creating output_dir")?;
        save_model(&self.dir.join("model.json")).output("writing model.json")?;
        self.trace.save_csv(&self.dir.join("trace.csv")).output("writing trace.csv")?;
        write_json(&self.dir.join("summary.json"), self.summary)
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes") + "\n";
    std::fs::write(path, text).output(&format!("writing {}", path.display()))
}

fn load_target(run: &RunConfig, base: &Path) -> CliResult<Target> {
    run.target.load(base).at("target")
}

/// Density estimation from samples with `mle` or `gem`.
pub fn fit_vde(path: &Path, overrides: &Overrides) -> CliResult<Value> {
    let lc = config::load(path, overrides)?;
    let run = &lc.run;
    if !matches!(run.train.objective, Objective::Mle | Objective::Gem) {
        return Err(config_error("train.objective: fit-vde trains with `mle` or `gem`"));
    }
    check_layers(run, "fit-vde", true)?;
    let target = load_target(run, &lc.base_dir)?;
    let x = match &target {
        Target::Dataset(d) if d.covariate_dim() > 0 => {
            return Err(config_error("target: dataset has covariate columns; use fit-conditional"))
        }
        Target::Dataset(d) => d.x.clone(),
        t => t.sample(run.n_samples, subseed(run.seed, STAGE_DATA)).at("target")?,
    };
    if x.rows() < 2 {
        return Err(config_error("target: at least two points are needed for the held-out split"));
    }
    let (train_idx, held_idx) = split_indices(x.rows(), run.seed);
    let (x_train, x_held) = (rows(&x, &train_idx), rows(&x, &held_idx));
    if let LayerConfig::Dif { k, init: DifInit::Gmm, .. } = &run.model.layers[0] {
        if *k > x_train.rows() {
            return Err(config_error(format!(
                "model.layers[0].K: EM needs at least K={k} training points, got {}",
                x_train.rows()
            )));
        }
    }
    let mut store = ParameterStore::new();
    let stack = build_stack(&run.model.layers, x.cols(), &mut store, run.seed)?;
    ensure_output_dir_usable(&lc.output_dir)?;

    let gmm = initialize(&stack, &mut store, &run.model.layers, Some(&x_train), run.seed)?;
    let trace = fit(&stack, &mut store, TrainData::Samples(&x_train), &run.train).at("training")?;
    let train_ll = mean_log_likelihood(&stack, &store, &x_train, "training split")?;
    let held_ll = mean_log_likelihood(&stack, &store, &x_held, "held-out split")?;
    let baseline = gmm.as_ref().map(|g| {
        json!({
            "K": g.k(),
            "em_iterations": g.loglik_trace.len() - 1,
            "train_mean_log_likelihood": g.final_log_likelihood(),
            "heldout_mean_log_likelihood": g.mean_log_likelihood(&x_held),
        })
    });
    let summary = merge(
        merge(header("fit-vde", &lc), trace_summary(&trace)),
        json!({
            "dim": x.cols(),
            "n_parameters": store.len(),
            "n_train": x_train.rows(),
            "n_heldout": x_held.rows(),
            "train_mean_log_likelihood": train_ll,
            "heldout_mean_log_likelihood": held_ll,
            "gmm_baseline": baseline,
        }),
    );
    let model = Model { stack, params: store };
    Outputs {
        dir: &lc.output_dir,
        trace: &trace,
        summary: &summary,
    }
    .write(|p| model.save(p))?;
    Ok(summary)
}

fn quartile_means(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let q = values.len() / 4;
    if q == 0 {
        return (None, None);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (Some(mean(&values[..q])), Some(mean(&values[values.len() - q..])))
}

/// Variational inference with the Rao-Blackwellized reverse-KL objective.
pub fn fit_vi(path: &Path, overrides: &Overrides) -> CliResult<Value> {
    let lc = config::load(path, overrides)?;
    let run = &lc.run;
    if run.train.objective != Objective::RbKl {
        return Err(config_error("train.objective: fit-vi trains with `rb_kl`"));
    }
    check_layers(run, "fit-vi", false)?;
    let target = load_target(run, &lc.base_dir)?;
    if !target.can_eval_unnorm_logpdf() {
        return Err(config_error(format!(
            "target: `{}` has no evaluable density, which fit-vi needs",
            target.name()
        )));
    }
    let mut store = ParameterStore::new();
    let stack = build_stack(&run.model.layers, target.dim(), &mut store, run.seed)?;
    ensure_output_dir_usable(&lc.output_dir)?;

    initialize(&stack, &mut store, &run.model.layers, None, run.seed)?;
    let trace = fit(&stack, &mut store, TrainData::Target(&target), &run.train).at("training")?;
    let sir = sir_resample(
        &stack,
        &store,
        &target,
        run.sir.n_proposals,
        run.sir.n_out,
        subseed(run.seed, STAGE_SIR),
    )
    .at("importance resampling")?;
    let (first_q, last_q) = quartile_means(&trace.objectives());
    let n_dif = stack.layers.iter().filter(|l| l.as_dif().is_some()).count();
    let estimator = if n_dif == 2 && stack.layers.len() == 2 { "cascaded" } else { "rao_blackwellized" };
    let summary = merge(
        merge(header("fit-vi", &lc), trace_summary(&trace)),
        json!({
            "dim": target.dim(),
            "n_parameters": store.len(),
            "estimator": estimator,
            "first_quartile_mean_objective": first_q,
            "last_quartile_mean_objective": last_q,
            "normalizing_constant": {
                "estimate": sir.z_estimate,
                "std_error": sir.z_std_error,
                "n_proposals": run.sir.n_proposals,
                "effective_sample_size": sir.effective_sample_size,
            },
        }),
    );
    let model = Model { stack, params: store };
    let outputs = Outputs {
        dir: &lc.output_dir,
        trace: &trace,
        summary: &summary,
    };
    outputs.write(|p| model.save(p))?;
    write_csv_dataset(&lc.output_dir.join("sir_samples.csv"), &sir.resampled, None).output("writing sir_samples.csv")?;
    Ok(summary)
}

/// Conditional density estimation from a dataset with covariate columns.
pub fn fit_conditional_cmd(path: &Path, overrides: &Overrides) -> CliResult<Value> {
    let lc = config::load(path, overrides)?;
    let run = &lc.run;
    if run.train.objective != Objective::ConditionalMle {
        return Err(config_error("train.objective: fit-conditional trains with `conditional_mle`"));
    }
    let [LayerConfig::ConditionalDif {
        k,
        weightnet,
        covariate_hidden,
    }] = run.model.layers.as_slice()
    else {
        return Err(config_error("model.layers: fit-conditional takes exactly one `conditional_dif` layer"));
    };
    if !matches!(run.target, TargetSpec::CsvDataset { .. }) {
        return Err(config_error("target.kind: fit-conditional reads a `csv_dataset`"));
    }
    let Target::Dataset(data) = load_target(run, &lc.base_dir)? else {
        unreachable!("csv_dataset loads as a dataset")
    };
    if data.covariate_dim() == 0 {
        return Err(config_error("target: dataset has no covariate columns (names starting with `w_`)"));
    }
    if data.len() < 2 {
        return Err(config_error("target: at least two rows are needed for the held-out split"));
    }
    let (train_idx, held_idx) = split_indices(data.len(), run.seed);
    let (train, held) = (data.select(&train_idx), data.select(&held_idx));
    let mut store = ParameterStore::new();
    let layer = ConditionalDifLayer::new(
        "l0",
        data.x.cols(),
        data.covariate_dim(),
        *k,
        weightnet,
        covariate_hidden,
        &mut store,
        &mut stream(run.seed, 22),
    )
    .at("model.layers[0]")?;
    ensure_output_dir_usable(&lc.output_dir)?;

    let trace = fit_conditional(&layer, &mut store, &train.x, covariates(&train), &run.train).at("training")?;
    let cond_ll = |d: &Dataset, what: &str| -> CliResult<f64> {
        let ll = layer.log_density_batch(&store, &d.x, covariates(d)).at(what)?;
        finite_mean(&ll, what)
    };
    let summary = merge(
        merge(header("fit-conditional", &lc), trace_summary(&trace)),
        json!({
            "dim": data.x.cols(),
            "covariate_dim": data.covariate_dim(),
            "n_parameters": store.len(),
            "n_train": train.len(),
            "n_heldout": held.len(),
            "train_mean_conditional_log_likelihood": cond_ll(&train, "training split")?,
            "heldout_mean_conditional_log_likelihood": cond_ll(&held, "held-out split")?,
        }),
    );
    let model = ConditionalModel { layer, params: store };
    Outputs {
        dir: &lc.output_dir,
        trace: &trace,
        summary: &summary,
    }
    .write(|p| model.save(p))?;
    Ok(summary)
}

/// Covariate block of a dataset already checked to have one.
fn covariates(d: &Dataset) -> &Tensor {
    d.omega.as_ref().expect("covariate columns checked")
}

fn load_model(path: &Path) -> CliResult<SavedModel> {
    SavedModel::load(path).at(&format!("model {}", path.display()))
}

pub struct SampleArgs {
    pub model: PathBuf,
    pub n: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub paths: bool,
    pub covariates: Option<PathBuf>,
}

/// Draws from a saved model into a CSV file.
pub fn sample(args: &SampleArgs) -> CliResult<Value> {
    match load_model(&args.model)? {
        SavedModel::Unconditional(m) => {
            if args.covariates.is_some() {
                return Err(config_error("--covariates: the model is unconditional"));
            }
            let n = args.n.ok_or_else(|| config_error("--n: required for unconditional models"))?;
            let d = m.stack.dim;
            let n_layers = m.stack.layers.len();
            let mut text = String::new();
            let mut cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
            if args.paths {
                cols.extend((0..n_layers).map(|l| format!("u_layer{l}")));
            }
            text.push_str(&cols.join(","));
            text.push('\n');
            if n > 0 {
                let out = m.stack.sample_backward(&m.params, n, args.seed, args.paths).at("sampling")?;
                if !out.points.all_finite() {
                    return Err(CliError::Numeric(anyhow!("sampling produced non-finite points")));
                }
                for (i, row) in out.points.iter_rows().enumerate() {
                    let mut fields: Vec<String> = row.iter().map(f64::to_string).collect();
                    if let Some(paths) = &out.paths {
                        fields.extend(paths[i].iter().map(usize::to_string));
                    }
                    let _ = writeln!(text, "{}", fields.join(","));
                }
            }
            std::fs::write(&args.out, text).output(&format!("writing {}", args.out.display()))?;
            Ok(json!({"command": "sample", "seed": args.seed, "n": n, "dim": d}))
        }
        SavedModel::Conditional(m) => {
            if args.paths {
                return Err(config_error("--paths: not available for conditional models"));
            }
            let cov_path = args
                .covariates
                .as_ref()
                .ok_or_else(|| config_error("--covariates: required for conditional models"))?;
            let data = load_csv_dataset(cov_path).at("--covariates")?;
            if data.covariate_dim() != m.layer.covariate_dim {
                return Err(config_error(format!(
                    "--covariates: model expects {} covariate columns, file has {}",
                    m.layer.covariate_dim,
                    data.covariate_dim()
                )));
            }
            if args.n.is_some_and(|n| n != data.len()) {
                return Err(config_error("--n: conditional sampling draws one point per covariate row"));
            }
            let x = m.layer.sample(&m.params, covariates(&data), &mut stream(args.seed, 0)).at("sampling")?;
            write_csv_dataset(&args.out, &x, Some(covariates(&data))).output(&format!("writing {}", args.out.display()))?;
            Ok(json!({"command": "sample", "seed": args.seed, "n": x.rows(), "dim": m.layer.dim}))
        }
    }
}

/// Parses `min:max:n_points`.
pub fn parse_axis(s: &str) -> Result<Axis, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [min, max, n] = parts.as_slice() else {
        return Err(format!("expected min:max:n_points, got `{s}`"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let n = n.trim().parse::<usize>().map_err(|e| format!("`{n}`: {e}"))?;
    Ok(Axis::new(num(min)?, num(max)?, n))
}

/// Evaluates the density of a 1-D or 2-D model on a grid.
pub fn density_grid(model: &Path, axes: &[Axis], out: &Path, summary_path: Option<&Path>) -> CliResult<Value> {
    let SavedModel::Unconditional(m) = load_model(model)? else {
        return Err(config_error("--model: density grids need an unconditional model"));
    };
    let d = m.stack.dim;
    if !(1..=2).contains(&d) {
        return Err(config_error(format!("--model: density grids support dimension 1 or 2, model has {d}")));
    }
    if axes.len() != d {
        return Err(config_error(format!("--axis: model has dimension {d}, got {} axes", axes.len())));
    }
    let grid = DensityGrid::new(axes.to_vec()).at("--axis")?;
    let values: Vec<f64> = m
        .stack
        .log_density_batch(&m.params, &grid.points())
        .at("density evaluation")?
        .iter()
        .map(|l| l.exp())
        .collect();
    let integral = grid.integrate(&values).at("quadrature")?;
    grid.write_csv(out, &values, "density").output(&format!("writing {}", out.display()))?;
    let summary = json!({
        "command": "density-grid",
        "dim": d,
        "axes": axes,
        "n_points": grid.len(),
        "integral": integral,
    });
    let summary_path = summary_path.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("summary.json"));
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

/// Mean log-likelihood of a dataset under a saved model.
pub fn loglik(model: &Path, data_path: &Path, out: Option<&Path>) -> CliResult<Value> {
    let data = load_csv_dataset(data_path).at("--data")?;
    if data.is_empty() {
        return Err(config_error("--data: dataset has no rows"));
    }
    let values = match load_model(model)? {
        SavedModel::Unconditional(m) => {
            if data.covariate_dim() > 0 {
                return Err(config_error("--data: covariate columns given for an unconditional model"));
            }
            if data.x.cols() != m.stack.dim {
                return Err(config_error(format!(
                    "--data: model has dimension {}, data has {}",
                    m.stack.dim,
                    data.x.cols()
                )));
            }
            m.stack.log_density_batch(&m.params, &data.x).at("density evaluation")?
        }
        SavedModel::Conditional(m) => {
            if data.covariate_dim() != m.layer.covariate_dim || data.x.cols() != m.layer.dim {
                return Err(config_error(format!(
                    "--data: model expects {} covariate and {} data columns, file has {} and {}",
                    m.layer.covariate_dim,
                    m.layer.dim,
                    data.covariate_dim(),
                    data.x.cols()
                )));
            }
            m.layer
                .log_density_batch(&m.params, &data.x, covariates(&data))
                .at("density evaluation")?
        }
    };
    if let Some(out) = out {
        let mut text = String::from("log_density\n");
        for v in &values {
            let _ = writeln!(text, "{v}");
        }
        std::fs::write(out, text).output(&format!("writing {}", out.display()))?;
    }
    let mean = finite_mean(&values, "--data")?;
    Ok(json!({"command": "loglik", "n": values.len(), "mean_log_likelihood": mean}))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_ninety_ten_and_disjoint() {
        let (t, h) = split_indices(1000, 3);
        assert_eq!((t.len(), h.len()), (900, 100));
        let mut all: Vec<usize> = t.iter().chain(&h).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 3), (t, h));
        assert_ne!(split_indices(1000, 4).1, split_indices(1000, 3).1);
        assert_eq!(split_indices(2, 0).1.len(), 1);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(parse_axis("-5:5:101").unwrap(), Axis::new(-5.0, 5.0, 101));
        assert!(parse_axis("0:1").is_err());
        assert!(parse_axis("0:1:x").is_err());
    }

    #[test]
    fn subseeds_differ_by_stage() {
        assert_ne!(subseed(0, STAGE_DATA), subseed(0, STAGE_SIR));
        assert_eq!(subseed(7, 0), 7);
    }

    #[test]
    fn quartiles() {
        let (a, b) = quartile_means(&[4.0, 3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0]);
        assert_eq!((a, b), (Some(3.5), Some(-2.5)));
        assert_eq!(quartile_means(&[1.0]), (None, None));
    }
}
