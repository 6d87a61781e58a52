//! Scenario orchestration: building simulator configs from a [`RunSpec`],
//! running them and writing traces, plot projections and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use claeo_core::history::HistoryStack;
use claeo_core::learner::{Basis, Grid, LearnerConfig, LearnerState};
use claeo_core::observer::{companion_eigenvalues, ObserverConfig, ObserverState};
use claeo_core::plant::benchmark::{self, Variant};
use claeo_core::plant::hjb_residual;
use claeo_core::simulator::{
    self, ControllerMode, LearningSetup, ObserverVariant, SimConfig, SimFailure, SimOutcome,
    SimTrace, STABILITY_FACTOR,
};

use crate::config::{ControllerKind, ObserverKind, RunSpec, Scenario};
use crate::error::{CliError, ConfigError};
use crate::manifest::{ErrorInfo, RunManifest};
use crate::trace_csv::write_trace;

pub type RunResult = Result<SimOutcome, SimFailure>;

/// Everything a scenario produced, in memory.
#[derive(Debug)]
pub struct RunReport {
    pub manifest: RunManifest,
    /// One entry per simulation, in the order they ran.
    pub runs: Vec<RunResult>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.runs.iter().any(|r| r.is_err()) {
            3
        } else {
            0
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.manifest.metrics.get(name).copied()
    }
}

fn require(ok: bool, key: &str, message: impl Into<String>) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, message))
    }
}

fn observer_config(spec: &RunSpec) -> Result<ObserverConfig, ConfigError> {
    let n1 = spec.gains.len();
    require(n1 == 3, "observer.gains", format!("expected 3 entries, got {n1}"))?;
    require(
        spec.gains.iter().all(|g| g.is_finite()),
        "observer.gains",
        "entries must be finite",
    )?;
    let eig = companion_eigenvalues(&DVector::from_row_slice(&spec.gains));
    if let Some(z) = eig.iter().find(|z| !(z.re < 0.0)) {
        return Err(ConfigError::new(
            "observer.gains",
            format!("E not Hurwitz: eigenvalue {:.6}{:+.6}i has non-negative real part", z.re, z.im),
        ));
    }
    require(
        spec.epsilon > 0.0 && spec.epsilon < 1.0,
        "observer.epsilon",
        format!("must lie in (0, 1), got {}", spec.epsilon),
    )?;
    require(
        spec.sat_bounds.len() == n1 && spec.sat_bounds.iter().all(|b| *b > 0.0 && b.is_finite()),
        "observer.sat_bounds",
        format!("expected {n1} positive entries"),
    )?;
    require(
        spec.learning_rate.len() == 2 && spec.learning_rate.iter().all(|g| *g > 0.0 && g.is_finite()),
        "observer.learning_rate",
        "expected 2 positive entries",
    )?;
    require(
        spec.stack_capacity >= 2 && spec.stack_capacity <= 4096,
        "observer.stack_capacity",
        "must lie in [m, 4096] with m = 2",
    )?;
    require(spec.iota > 0.0 && spec.iota < 1.0, "observer.iota", "must lie in (0, 1)")?;
    require(
        spec.full_state_gain > 0.0 && spec.full_state_gain.is_finite(),
        "observer.full_state_gain",
        "must be positive",
    )?;
    let mut cfg = ObserverConfig::new(
        DVector::from_row_slice(&spec.gains),
        spec.epsilon,
        DVector::from_row_slice(&spec.sat_bounds),
        DMatrix::from_diagonal(&DVector::from_row_slice(&spec.learning_rate)),
        spec.stack_capacity,
    )
    .map_err(|e| ConfigError::new("observer", e.to_string()))?;
    cfg.iota = spec.iota;
    cfg.full_state_gain = spec.full_state_gain;
    cfg.validate().map_err(|e| ConfigError::new("observer", e.to_string()))?;
    Ok(cfg)
}

fn learning_setup(spec: &RunSpec) -> Result<LearningSetup, ConfigError> {
    for (key, v) in [
        ("learner.k_c1", spec.k_c1),
        ("learner.k_a1", spec.k_a1),
        ("learner.k_a2", spec.k_a2),
        ("learner.gamma", spec.gamma),
        ("learner.beta", spec.beta),
        ("learner.gamma_bar", spec.gamma_bar),
    ] {
        require(v > 0.0 && v.is_finite(), key, format!("must be positive, got {v}"))?;
    }
    require(spec.k_c2 >= 0.0 && spec.k_c2.is_finite(), "learner.k_c2", "must be non-negative")?;
    for (key, v) in [
        ("learner.gain0", &spec.gain0),
        ("learner.theta_c0", &spec.theta_c0),
        ("learner.theta_a0", &spec.theta_a0),
    ] {
        require(v.len() == 3, key, format!("expected 3 entries, got {}", v.len()))?;
        require(v.iter().all(|a| a.is_finite()), key, "entries must be finite")?;
    }
    require(spec.gain0.iter().all(|g| *g > 0.0), "learner.gain0", "entries must be positive")?;
    require(
        spec.gain0.iter().all(|g| *g <= spec.gamma_bar),
        "learner.gain0",
        format!("‖Γ(0)‖ must not exceed gamma_bar = {}", spec.gamma_bar),
    )?;
    require(
        (2..=1000).contains(&spec.grid_count),
        "learner.grid_count",
        format!("must lie in [2, 1000], got {}", spec.grid_count),
    )?;
    let grid = Grid::uniform(&[
        (spec.grid_min, spec.grid_max, spec.grid_count),
        (spec.grid_min, spec.grid_max, spec.grid_count),
    ])
    .map_err(|e| ConfigError::new("learner.grid_count", e.to_string()))?;
    let config = LearnerConfig {
        k_c1: spec.k_c1,
        k_c2: spec.k_c2,
        k_a1: spec.k_a1,
        k_a2: spec.k_a2,
        gamma: spec.gamma,
        beta: spec.beta,
        gamma_bar: spec.gamma_bar,
        grid,
        cost: benchmark::cost(),
    };
    config.validate().map_err(|e| ConfigError::new("learner", e.to_string()))?;
    let initial = LearnerState::new(
        DVector::from_row_slice(&spec.theta_c0),
        DVector::from_row_slice(&spec.theta_a0),
        DMatrix::from_diagonal(&DVector::from_row_slice(&spec.gain0)),
    )
    .map_err(|e| ConfigError::new("learner", e.to_string()))?;
    Ok(LearningSetup { basis: Basis::quadratic_2d(), config, initial })
}

/// Resolves a spec into a simulator config. `initial_stack` replaces the
/// empty starting stack.
pub fn build_sim_config(spec: &RunSpec, initial_stack: Option<HistoryStack>) -> Result<SimConfig, ConfigError> {
    let observer = observer_config(spec)?;
    require(
        spec.step_h > 0.0 && spec.step_h.is_finite(),
        "sim.step_h",
        format!("must be positive, got {}", spec.step_h),
    )?;
    let cap = STABILITY_FACTOR * spec.epsilon / observer.fastest_mode_rate();
    require(
        spec.step_h <= cap * (1.0 + 1e-12),
        "sim.step_h",
        format!("{} exceeds the stability cap 2.5·ε/|Re λ(E)| = {cap:.6}", spec.step_h),
    )?;
    require(spec.x0.len() == 2, "sim.x0", "expected 2 entries")?;
    require(spec.xhat0.len() == 2, "observer.xhat0", "expected 2 entries")?;
    require(spec.what0.len() == 2, "observer.what0", "expected 2 entries")?;
    require(spec.log_decimation >= 1, "sim.log_decimation", "must be at least 1")?;
    let learning = if spec.learner_enabled { Some(learning_setup(spec)?) } else { None };
    let controller = match spec.controller {
        ControllerKind::U1 => ControllerMode::ScenarioU1,
        ControllerKind::U2 => ControllerMode::ScenarioU2,
        ControllerKind::RlPolicy => {
            require(learning.is_some(), "sim.controller", "rl_policy needs learner.enabled = true")?;
            ControllerMode::RlPolicy
        }
    };
    let cfg = SimConfig {
        plant: benchmark::plant(spec.plant_variant),
        observer,
        observer_variant: match spec.observer_kind {
            ObserverKind::Output => ObserverVariant::OutputFeedback,
            ObserverKind::FullState => ObserverVariant::FullState,
        },
        ideal_theta: learning.as_ref().map(|_| DVector::from_row_slice(&benchmark::OPTIMAL_THETA)),
        learning,
        controller,
        step_h: spec.step_h,
        t_end: spec.t_end,
        record_period: spec.record_period,
        warmup: spec.warmup,
        log_decimation: spec.log_decimation,
        concurrent_learning: spec.concurrent_learning,
        x0: DVector::from_row_slice(&spec.x0),
        observer_init: ObserverState {
            xhat: DVector::from_row_slice(&spec.xhat0),
            xhat_ext: spec.xhat_ext0,
            what: DVector::from_row_slice(&spec.what0),
            aux_theta: 0.0,
        },
        initial_stack,
        error_window: spec.error_window,
        passage_threshold: spec.passage_threshold,
        a1_floor: spec.a1_floor,
    };
    cfg.validate().map_err(|e| ConfigError::new(sim_key(&e.to_string()), e.to_string()))?;
    Ok(cfg)
}

fn sim_key(message: &str) -> &'static str {
    const HINTS: [(&str, &str); 7] = [
        ("t_end", "sim.t_end"),
        ("record_period", "sim.record_period"),
        ("warmup", "sim.warmup"),
        ("window", "sim.error_window"),
        ("passage", "sim.passage_threshold"),
        ("x0", "sim.x0"),
        ("initial stack", "stack.init_path"),
    ];
    HINTS
        .iter()
        .find(|(needle, _)| message.contains(needle))
        .map_or("sim", |(_, key)| key)
}

/// Checks that a spec resolves into a runnable configuration.
pub fn validate(spec: &RunSpec) -> Result<(), ConfigError> {
    match spec.scenario {
        Scenario::HjbValidate => {
            require(spec.hjb_points >= 1 && spec.hjb_points <= 10_000_000, "hjb.points", "must lie in [1, 1e7]")?;
            require(spec.hjb_range > 0.0 && spec.hjb_range.is_finite(), "hjb.range", "must be positive")?;
            Ok(())
        }
        Scenario::EpsScaling => {
            require(!spec.eps_values.is_empty(), "eps.values", "needs at least one value")?;
            for e in &spec.eps_values {
                let mut s = spec.clone();
                s.epsilon = *e;
                s.warmup = SimConfig::default_warmup(*e);
                build_sim_config(&s, None).map_err(|err| {
                    ConfigError::new("eps.values", format!("epsilon = {e}: {err}"))
                })?;
            }
            Ok(())
        }
        _ => build_sim_config(spec, None).map(|_| ()),
    }
}

/// Stack used to start a run: from `stack.init_path` when set, otherwise
/// from a fresh `fig2` run for the learning scenarios.
pub fn initial_stack(spec: &RunSpec) -> Result<Option<HistoryStack>, CliError> {
    let source = if !spec.stack_init_path.is_empty() {
        let path = PathBuf::from(&spec.stack_init_path);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        HistoryStack::from_csv(&text, Some(spec.stack_capacity)).map_err(|e| {
            ConfigError::new("stack.init_path", format!("{}: {e}", path.display()))
        })?
    } else if spec.learner_enabled {
        warm_start_stack(spec.stack_capacity, spec.plant_variant)?
    } else {
        return Ok(None);
    };
    Ok(Some(source.truncated(spec.stack_init_records)))
}

/// Final history stack of the default `fig2` run on the given plant.
pub fn warm_start_stack(capacity: usize, variant: Variant) -> Result<HistoryStack, CliError> {
    let mut spec = RunSpec::preset(Scenario::Fig2);
    spec.stack_capacity = capacity;
    spec.plant_variant = variant;
    let cfg = build_sim_config(&spec, None)?;
    match simulator::run(&cfg) {
        Ok(out) => Ok(out.final_state.stack),
        Err(f) => Err(f.error.into()),
    }
}

fn summary_metrics(prefix: &str, run: &RunResult, metrics: &mut BTreeMap<String, f64>) {
    let (summary, final_sv) = match run {
        Ok(out) => (&out.summary, Some(out.final_state.stack.min_singular_value())),
        Err(f) => (&f.summary, None),
    };
    let mut put = |k: &str, v: f64| {
        metrics.insert(format!("{prefix}{k}"), v);
    };
    put("steps", summary.steps as f64);
    put("final_time", summary.final_time);
    put("final_weight_error", summary.final_weight_error);
    put("final_state_norm", summary.final_state_norm);
    put("sup_state_error", summary.sup_state_error);
    put("total_cost", summary.total_cost);
    put("stack_offers", summary.offers as f64);
    put("stack_offers_accepted", summary.offers_accepted as f64);
    put("gain_cap_activations", summary.gain_cap_activations as f64);
    let optional = [
        ("final_theta_error", summary.final_theta_error),
        ("state_error_passage", summary.state_error_passage),
        ("weight_error_passage", summary.weight_error_passage),
        ("min_a1_metric", summary.min_a1_metric),
        ("min_gain_eig", summary.min_gain_eig),
        ("max_gain_eig", summary.max_gain_eig),
        ("max_mu_rho_norm", summary.max_mu_rho_norm),
        ("final_stack_min_sv", final_sv),
    ];
    for (k, v) in optional {
        if let Some(v) = v {
            put(k, v);
        }
    }
}

struct Writer {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl Writer {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { dir, outputs: BTreeMap::new() })
    }

    fn write(&mut self, label: &str, file: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(file);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.outputs.insert(label.to_string(), path.display().to_string());
        Ok(())
    }

    fn projection(
        &mut self,
        label: &str,
        file: &str,
        columns: &[String],
        rows: impl Iterator<Item = Vec<f64>>,
    ) -> Result<(), CliError> {
        let mut text = columns.join(",");
        text.push('\n');
        for row in rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        self.write(label, file, &text)
    }
}

fn names(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn write_plots(w: &mut Writer, scenario: Scenario, trace: &SimTrace, variant: Variant) -> Result<(), CliError> {
    let plant = benchmark::plant(variant);
    let theta = benchmark::OPTIMAL_THETA;
    let weights = benchmark::WEIGHTS;
    let rows = &trace.rows;
    match scenario {
        Scenario::Fig2 | Scenario::Fig3a | Scenario::Fig3b | Scenario::EpsScaling => {
            let tag = scenario.id().replace('-', "_");
            w.projection(
                "plot_states",
                &format!("{tag}_states.csv"),
                &names(&["t", "x_1", "x_2", "xhat_1", "xhat_2", "x_ext", "xhat_ext"]),
                rows.iter().map(|r| {
                    vec![r.t, r.x[0], r.x[1], r.xhat[0], r.xhat[1], plant.extended_state(&r.x), r.xhat_ext]
                }),
            )?;
            w.projection(
                "plot_weights",
                &format!("{tag}_weights.csv"),
                &names(&["t", "what_1", "what_2", "w_1", "w_2"]),
                rows.iter().map(|r| vec![r.t, r.what[0], r.what[1], weights[0], weights[1]]),
            )?;
        }
        Scenario::Fig4To7 | Scenario::Fig8 => {
            let theta_cols = names(&["t", "theta_1", "theta_2", "theta_3", "ref_1", "ref_2", "ref_3"]);
            let theta_rows = |pick: fn(&claeo_core::simulator::TraceRow) -> &Vec<f64>| {
                rows.iter().map(move |r| {
                    let v = pick(r);
                    vec![r.t, v[0], v[1], v[2], theta[0], theta[1], theta[2]]
                })
            };
            if scenario == Scenario::Fig8 {
                w.projection("plot_actor", "fig8_actor.csv", &theta_cols, theta_rows(|r| &r.theta_a))?;
                return Ok(());
            }
            w.projection(
                "plot_fig4",
                "fig4_states.csv",
                &names(&["t", "x_1", "x_2", "xhat_1", "xhat_2", "u"]),
                rows.iter().map(|r| vec![r.t, r.x[0], r.x[1], r.xhat[0], r.xhat[1], r.u]),
            )?;
            w.projection("plot_fig5", "fig5_actor.csv", &theta_cols, theta_rows(|r| &r.theta_a))?;
            w.projection("plot_fig6", "fig6_critic.csv", &theta_cols, theta_rows(|r| &r.theta_c))?;
            w.projection(
                "plot_fig7",
                "fig7_a1_metric.csv",
                &names(&["t", "a1_metric", "what_1", "what_2"]),
                rows.iter().map(|r| vec![r.t, r.a1_metric, r.what[0], r.what[1]]),
            )?;
        }
        Scenario::HjbValidate => {}
    }
    Ok(())
}

fn failure_info(run: &RunResult) -> Option<ErrorInfo> {
    run.as_ref().err().map(|f| ErrorInfo::from_core(&f.error))
}

/// Maximum HJB residual of the analytic solution over `points` uniform
/// random states in `[−range, range]²`.
pub fn hjb_sweep(variant: Variant, points: usize, range: f64, seed: u64) -> Result<f64, CliError> {
    let plant = benchmark::plant(variant);
    let cost = benchmark::cost();
    let sol = benchmark::analytic(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut grad = [0.0; 2];
    for _ in 0..points {
        let x = [rng.gen_range(-range..=range), rng.gen_range(-range..=range)];
        (sol.value_gradient)(&x, &mut grad);
        let res = hjb_residual(&plant, &cost, &grad, (sol.policy)(&x), &x)?;
        worst = worst.max(res.abs());
    }
    Ok(worst)
}

/// Runs `spec`, writing its files under `out_dir/<scenario>/`. A diverged
/// simulation still produces a manifest; check [`RunReport::exit_code`].
pub fn execute(spec: &RunSpec, out_dir: &Path) -> Result<RunReport, CliError> {
    validate(spec)?;
    let mut w = Writer::new(out_dir.join(spec.scenario.id()))?;
    let echo = spec.echo();
    w.write("config", "config.txt", &echo)?;
    let mut metrics = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    let mut error = None;

    match spec.scenario {
        Scenario::HjbValidate => {
            let mut text = String::from("variant,points,max_abs_residual\n");
            let mut overall: f64 = 0.0;
            for v in Variant::ALL {
                let worst = hjb_sweep(v, spec.hjb_points, spec.hjb_range, spec.hjb_seed)?;
                overall = overall.max(worst);
                metrics.insert(format!("max_residual_{}", v.id()), worst);
                text.push_str(&format!("{},{},{worst:.16e}\n", v.id(), spec.hjb_points));
            }
            metrics.insert("max_residual".into(), overall);
            w.write("plot_hjb", "hjb_validate.csv", &text)?;
        }
        Scenario::EpsScaling => {
            let mut text = String::from("epsilon,sup_state_error\n");
            let mut sups = Vec::new();
            for (i, e) in spec.eps_values.iter().enumerate() {
                let mut s = spec.clone();
                s.epsilon = *e;
                s.warmup = SimConfig::default_warmup(*e);
                let cfg = build_sim_config(&s, None)?;
                let run = simulator::run(&cfg);
                let prefix = format!("eps{}_", i + 1);
                summary_metrics(&prefix, &run, &mut metrics);
                metrics.insert(format!("{prefix}epsilon"), *e);
                let trace = match &run {
                    Ok(o) => &o.trace,
                    Err(f) => &f.trace,
                };
                w.write(&format!("trace_eps{}", i + 1), &format!("trace_eps{}.csv", i + 1), &write_trace(trace))?;
                if let Ok(o) = &run {
                    sups.push(o.summary.sup_state_error);
                    text.push_str(&format!("{e:.16e},{:.16e}\n", o.summary.sup_state_error));
                    warnings.extend(o.warnings.iter().map(|x| format!("eps = {e}: {x}")));
                }
                error = error.or_else(|| failure_info(&run));
                runs.push(run);
            }
            if sups.len() == spec.eps_values.len() && sups.len() >= 2 && sups[0] > 0.0 {
                metrics.insert("sup_error_ratio".into(), sups[sups.len() - 1] / sups[0]);
            }
            w.write("plot_eps", "eps_scaling.csv", &text)?;
        }
        _ => {
            let stack = initial_stack(spec)?;
            if let Some(st) = &stack {
                w.write("initial_stack", "initial_stack.csv", &st.to_csv())?;
            }
            let cfg = build_sim_config(spec, stack)?;
            let run = simulator::run(&cfg);
            summary_metrics("", &run, &mut metrics);
            let (trace, warn) = match &run {
                Ok(o) => (&o.trace, &o.warnings),
                Err(f) => (&f.trace, &f.warnings),
            };
            warnings.extend(warn.iter().map(|x| x.to_string()));
            w.write("trace", "trace.csv", &write_trace(trace))?;
            write_plots(&mut w, spec.scenario, trace, spec.plant_variant)?;
            if let Ok(o) = &run {
                w.write("final_stack", "final_stack.csv", &o.final_state.stack.to_csv())?;
            }
            error = failure_info(&run);
            runs.push(run);
        }
    }

    let manifest_path = w.dir.join("manifest.json");
    w.outputs.insert("manifest".into(), manifest_path.display().to_string());
    let manifest = RunManifest {
        scenario: spec.scenario.id().to_string(),
        config: echo,
        outputs: w.outputs,
        metrics,
        warnings,
        error,
    };
    manifest.write(&manifest_path)?;
    Ok(RunReport { manifest, runs })
}

/// Runs a named scenario with its default settings.
pub fn run_scenario(name: &str, out_dir: &Path) -> Result<RunReport, CliError> {
    let scenario = Scenario::from_id(name)
        .ok_or_else(|| ConfigError::new("scenario", format!("unknown scenario {name:?}")))?;
    execute(&RunSpec::preset(scenario), out_dir)
}
