//! Flat `key=value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Lists are comma
//! separated and may be wrapped in brackets. The `scenario` key picks the
//! preset every other key overrides, so it is applied first regardless of
//! where it appears in the file.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use claeo_core::plant::benchmark::Variant;
use claeo_core::simulator::{SimConfig, DEFAULT_A1_FLOOR};

use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Fig2,
    Fig3a,
    Fig3b,
    Fig4To7,
    Fig8,
    HjbValidate,
    EpsScaling,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Fig2,
        Scenario::Fig3a,
        Scenario::Fig3b,
        Scenario::Fig4To7,
        Scenario::Fig8,
        Scenario::HjbValidate,
        Scenario::EpsScaling,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scenario::Fig2 => "fig2",
            Scenario::Fig3a => "fig3a",
            Scenario::Fig3b => "fig3b",
            Scenario::Fig4To7 => "fig4-7",
            Scenario::Fig8 => "fig8",
            Scenario::HjbValidate => "hjb-validate",
            Scenario::EpsScaling => "eps-scaling",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    pub fn description(self) -> &'static str {
        match self {
            Scenario::Fig2 => "CL-AEO under the transient probing input u1",
            Scenario::Fig3a => "observer without the history stack under u1",
            Scenario::Fig3b => "observer without the history stack under persistent probing u2",
            Scenario::Fig4To7 => "closed-loop actor-critic with Bellman-error extrapolation",
            Scenario::Fig8 => "closed-loop actor-critic with trajectory-only Bellman error",
            Scenario::HjbValidate => "HJB residual sweep of the analytic benchmark solution",
            Scenario::EpsScaling => "state-estimation error at two observer time scales",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    U1,
    U2,
    RlPolicy,
}

impl ControllerKind {
    fn id(self) -> &'static str {
        match self {
            ControllerKind::U1 => "u1",
            ControllerKind::U2 => "u2",
            ControllerKind::RlPolicy => "rl_policy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverKind {
    Output,
    FullState,
}

impl ObserverKind {
    fn id(self) -> &'static str {
        match self {
            ObserverKind::Output => "output",
            ObserverKind::FullState => "full_state",
        }
    }
}

/// Every tunable of a run, with scenario defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub plant_variant: Variant,

    pub observer_kind: ObserverKind,
    pub gains: Vec<f64>,
    pub epsilon: f64,
    pub sat_bounds: Vec<f64>,
    /// Diagonal of `Γ₃`.
    pub learning_rate: Vec<f64>,
    pub stack_capacity: usize,
    pub iota: f64,
    pub full_state_gain: f64,
    pub concurrent_learning: bool,
    pub xhat0: Vec<f64>,
    pub xhat_ext0: f64,
    pub what0: Vec<f64>,

    pub step_h: f64,
    pub t_end: f64,
    pub record_period: f64,
    pub warmup: f64,
    pub log_decimation: usize,
    pub x0: Vec<f64>,
    pub controller: ControllerKind,
    pub error_window: (f64, f64),
    pub passage_threshold: f64,
    pub a1_floor: f64,

    pub learner_enabled: bool,
    pub k_c1: f64,
    pub k_c2: f64,
    pub k_a1: f64,
    pub k_a2: f64,
    pub gamma: f64,
    pub beta: f64,
    pub gamma_bar: f64,
    /// Diagonal of `Γ(0)`.
    pub gain0: Vec<f64>,
    pub theta_c0: Vec<f64>,
    pub theta_a0: Vec<f64>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_count: usize,

    /// Stack CSV to start from; empty means an empty stack, or for the RL
    /// scenarios a stack produced by running `fig2` first.
    pub stack_init_path: String,
    /// Number of leading records kept from the initial stack.
    pub stack_init_records: usize,

    pub hjb_points: usize,
    pub hjb_seed: u64,
    pub hjb_range: f64,

    pub eps_values: Vec<f64>,
}

const KEYS: &[&str] = &[
    "scenario",
    "plant.variant",
    "observer.kind",
    "observer.gains",
    "observer.epsilon",
    "observer.sat_bounds",
    "observer.learning_rate",
    "observer.stack_capacity",
    "observer.iota",
    "observer.full_state_gain",
    "observer.concurrent_learning",
    "observer.xhat0",
    "observer.xhat_ext0",
    "observer.what0",
    "sim.step_h",
    "sim.t_end",
    "sim.record_period",
    "sim.warmup",
    "sim.log_decimation",
    "sim.x0",
    "sim.controller",
    "sim.error_window",
    "sim.passage_threshold",
    "sim.a1_floor",
    "learner.enabled",
    "learner.k_c1",
    "learner.k_c2",
    "learner.k_a1",
    "learner.k_a2",
    "learner.gamma",
    "learner.beta",
    "learner.gamma_bar",
    "learner.gain0",
    "learner.theta_c0",
    "learner.theta_a0",
    "learner.grid_min",
    "learner.grid_max",
    "learner.grid_count",
    "stack.init_path",
    "stack.init_records",
    "hjb.points",
    "hjb.seed",
    "hjb.range",
    "eps.values",
];

impl RunSpec {
    /// Defaults for `scenario`.
    pub fn preset(scenario: Scenario) -> Self {
        let epsilon = 1e-3;
        let mut spec = RunSpec {
            scenario,
            plant_variant: Variant::Sin,
            observer_kind: ObserverKind::Output,
            gains: vec![3.0, 3.0, 1.0],
            epsilon,
            sat_bounds: vec![5.0, 12.0, 30.0],
            learning_rate: vec![0.4, 0.4],
            stack_capacity: 5,
            iota: 0.01,
            full_state_gain: 1.0,
            concurrent_learning: true,
            xhat0: vec![0.0, 0.0],
            xhat_ext0: 0.0,
            what0: vec![0.0, 0.0],
            step_h: 1e-4,
            t_end: 15.0,
            record_period: 0.05,
            warmup: SimConfig::default_warmup(epsilon),
            log_decimation: 10,
            x0: vec![1.0, 1.0],
            controller: ControllerKind::U1,
            error_window: (1.0, 15.0),
            passage_threshold: 0.1,
            a1_floor: DEFAULT_A1_FLOOR,
            learner_enabled: false,
            k_c1: 1.0,
            k_c2: 5.0,
            k_a1: 80.0,
            k_a2: 0.1,
            gamma: 0.5,
            beta: 100.0,
            gamma_bar: 1000.0,
            gain0: vec![100.0; 3],
            theta_c0: vec![0.0; 3],
            theta_a0: vec![0.0; 3],
            grid_min: -10.0,
            grid_max: 10.0,
            grid_count: 11,
            stack_init_path: String::new(),
            stack_init_records: 3,
            hjb_points: 10_000,
            hjb_seed: 0,
            hjb_range: 10.0,
            eps_values: vec![1e-3, 2e-3],
        };
        match scenario {
            Scenario::Fig2 | Scenario::HjbValidate => {}
            Scenario::Fig3a => spec.concurrent_learning = false,
            Scenario::Fig3b => {
                spec.concurrent_learning = false;
                spec.controller = ControllerKind::U2;
                // Without the stack the weights need a long excitation window.
                spec.t_end = 300.0;
                spec.error_window = (1.0, 300.0);
                spec.log_decimation = 200;
            }
            Scenario::Fig4To7 | Scenario::Fig8 => {
                spec.sat_bounds = vec![10.0, 10.0, 100.0];
                spec.x0 = vec![4.0, 4.0];
                spec.controller = ControllerKind::RlPolicy;
                spec.learner_enabled = true;
                spec.t_end = 20.0;
                spec.error_window = (1.0, 20.0);
                if scenario == Scenario::Fig8 {
                    spec.k_c2 = 0.0;
                }
            }
            Scenario::EpsScaling => {
                spec.controller = ControllerKind::U2;
                spec.t_end = 5.0;
                spec.error_window = (1.0, 5.0);
            }
        }
        spec
    }

    /// Parses config text. Unknown keys, duplicate keys and malformed
    /// values are rejected with the offending key.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::new(
                    format!("line {}", lineno + 1),
                    format!("expected key=value, got {line:?}"),
                ));
            };
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::new(key, "unknown key"));
            }
            if entries.iter().any(|(k, _, _)| k == key) {
                return Err(ConfigError::new(key, "key given more than once"));
            }
            entries.push((key.to_string(), value.trim().to_string(), lineno + 1));
        }
        let scenario = match entries.iter().find(|(k, _, _)| k == "scenario") {
            Some((_, v, _)) => Scenario::from_id(v)
                .ok_or_else(|| ConfigError::new("scenario", format!("unknown scenario {v:?}")))?,
            None => Scenario::Fig2,
        };
        let mut spec = RunSpec::preset(scenario);
        let mut warmup_set = false;
        let mut window_set = false;
        for (key, value, _) in &entries {
            spec.set(key, value)?;
            warmup_set |= key == "sim.warmup";
            window_set |= key == "sim.error_window";
        }
        // derived defaults follow their inputs unless pinned
        if !warmup_set {
            spec.warmup = SimConfig::default_warmup(spec.epsilon);
        }
        if !window_set {
            spec.error_window = (spec.error_window.0.min(spec.t_end), spec.t_end);
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("file", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "scenario" => {}
            "plant.variant" => {
                self.plant_variant = Variant::from_id(v)
                    .ok_or_else(|| ConfigError::new(key, format!("unknown plant variant {v:?}")))?
            }
            "observer.kind" => {
                self.observer_kind = match v {
                    "output" => ObserverKind::Output,
                    "full_state" => ObserverKind::FullState,
                    _ => return Err(ConfigError::new(key, "expected output or full_state")),
                }
            }
            "observer.gains" => self.gains = list(key, v)?,
            "observer.epsilon" => self.epsilon = num(key, v)?,
            "observer.sat_bounds" => self.sat_bounds = list(key, v)?,
            "observer.learning_rate" => self.learning_rate = list(key, v)?,
            "observer.stack_capacity" => self.stack_capacity = num(key, v)?,
            "observer.iota" => self.iota = num(key, v)?,
            "observer.full_state_gain" => self.full_state_gain = num(key, v)?,
            "observer.concurrent_learning" => self.concurrent_learning = num(key, v)?,
            "observer.xhat0" => self.xhat0 = list(key, v)?,
            "observer.xhat_ext0" => self.xhat_ext0 = num(key, v)?,
            "observer.what0" => self.what0 = list(key, v)?,
            "sim.step_h" => self.step_h = num(key, v)?,
            "sim.t_end" => self.t_end = num(key, v)?,
            "sim.record_period" => self.record_period = num(key, v)?,
            "sim.warmup" => self.warmup = num(key, v)?,
            "sim.log_decimation" => self.log_decimation = num(key, v)?,
            "sim.x0" => self.x0 = list(key, v)?,
            "sim.controller" => {
                self.controller = match v {
                    "u1" => ControllerKind::U1,
                    "u2" => ControllerKind::U2,
                    "rl_policy" => ControllerKind::RlPolicy,
                    _ => return Err(ConfigError::new(key, "expected u1, u2 or rl_policy")),
                }
            }
            "sim.error_window" => {
                let w: Vec<f64> = list(key, v)?;
                if w.len() != 2 {
                    return Err(ConfigError::new(key, "expected two values"));
                }
                self.error_window = (w[0], w[1]);
            }
            "sim.passage_threshold" => self.passage_threshold = num(key, v)?,
            "sim.a1_floor" => self.a1_floor = num(key, v)?,
            "learner.enabled" => self.learner_enabled = num(key, v)?,
            "learner.k_c1" => self.k_c1 = num(key, v)?,
            "learner.k_c2" => self.k_c2 = num(key, v)?,
            "learner.k_a1" => self.k_a1 = num(key, v)?,
            "learner.k_a2" => self.k_a2 = num(key, v)?,
            "learner.gamma" => self.gamma = num(key, v)?,
            "learner.beta" => self.beta = num(key, v)?,
            "learner.gamma_bar" => self.gamma_bar = num(key, v)?,
            "learner.gain0" => self.gain0 = list(key, v)?,
            "learner.theta_c0" => self.theta_c0 = list(key, v)?,
            "learner.theta_a0" => self.theta_a0 = list(key, v)?,
            "learner.grid_min" => self.grid_min = num(key, v)?,
            "learner.grid_max" => self.grid_max = num(key, v)?,
            "learner.grid_count" => self.grid_count = num(key, v)?,
            "stack.init_path" => self.stack_init_path = v.to_string(),
            "stack.init_records" => self.stack_init_records = num(key, v)?,
            "hjb.points" => self.hjb_points = num(key, v)?,
            "hjb.seed" => self.hjb_seed = num(key, v)?,
            "hjb.range" => self.hjb_range = num(key, v)?,
            "eps.values" => self.eps_values = list(key, v)?,
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Full config text; parsing it gives back an equal spec.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("scenario", self.scenario.id().into());
        kv("plant.variant", self.plant_variant.id().into());
        kv("observer.kind", self.observer_kind.id().into());
        kv("observer.gains", fmt_list(&self.gains));
        kv("observer.epsilon", fmt_num(self.epsilon));
        kv("observer.sat_bounds", fmt_list(&self.sat_bounds));
        kv("observer.learning_rate", fmt_list(&self.learning_rate));
        kv("observer.stack_capacity", self.stack_capacity.to_string());
        kv("observer.iota", fmt_num(self.iota));
        kv("observer.full_state_gain", fmt_num(self.full_state_gain));
        kv("observer.concurrent_learning", self.concurrent_learning.to_string());
        kv("observer.xhat0", fmt_list(&self.xhat0));
        kv("observer.xhat_ext0", fmt_num(self.xhat_ext0));
        kv("observer.what0", fmt_list(&self.what0));
        kv("sim.step_h", fmt_num(self.step_h));
        kv("sim.t_end", fmt_num(self.t_end));
        kv("sim.record_period", fmt_num(self.record_period));
        kv("sim.warmup", fmt_num(self.warmup));
        kv("sim.log_decimation", self.log_decimation.to_string());
        kv("sim.x0", fmt_list(&self.x0));
        kv("sim.controller", self.controller.id().into());
        kv("sim.error_window", fmt_list(&[self.error_window.0, self.error_window.1]));
        kv("sim.passage_threshold", fmt_num(self.passage_threshold));
        kv("sim.a1_floor", fmt_num(self.a1_floor));
        kv("learner.enabled", self.learner_enabled.to_string());
        kv("learner.k_c1", fmt_num(self.k_c1));
        kv("learner.k_c2", fmt_num(self.k_c2));
        kv("learner.k_a1", fmt_num(self.k_a1));
        kv("learner.k_a2", fmt_num(self.k_a2));
        kv("learner.gamma", fmt_num(self.gamma));
        kv("learner.beta", fmt_num(self.beta));
        kv("learner.gamma_bar", fmt_num(self.gamma_bar));
        kv("learner.gain0", fmt_list(&self.gain0));
        kv("learner.theta_c0", fmt_list(&self.theta_c0));
        kv("learner.theta_a0", fmt_list(&self.theta_a0));
        kv("learner.grid_min", fmt_num(self.grid_min));
        kv("learner.grid_max", fmt_num(self.grid_max));
        kv("learner.grid_count", self.grid_count.to_string());
        kv("stack.init_path", self.stack_init_path.clone());
        kv("stack.init_records", self.stack_init_records.to_string());
        kv("hjb.points", self.hjb_points.to_string());
        kv("hjb.seed", self.hjb_seed.to_string());
        kv("hjb.range", fmt_num(self.hjb_range));
        kv("eps.values", fmt_list(&self.eps_values));
        s
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| ConfigError::new(key, format!("cannot parse {v:?}: {e}")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    let inner = v.trim();
    let inner = inner
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(inner)
        .trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    if inner.len() > 1 << 16 {
        return Err(ConfigError::new(key, "list too long"));
    }
    inner.split(',').map(|p| num::<f64>(key, p.trim())).collect()
}

// `{}` on f64 is the shortest text that parses back to the same value
fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| fmt_num(*x)).collect();
    format!("[{}]", parts.join(", "))
}
