//! Fixed-step simulation of the coupled plant, observer and learner.
//!
//! Everything continuous (plant, observer, `Ŵ`, `Θ̂_c`, `Θ̂_a`, `Γ`) is
//! packed into one vector and advanced with classical RK4. Switched
//! quantities (history stack contents, the `Γ` indicator) are resolved
//! between steps and frozen inside a step.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, Error, Result};
use crate::history::HistoryStack;
use crate::learner::{
    check_learner_dims, policy_estimate, Basis, LearnerConfig, LearnerDynamics, LearnerState,
    ModelEstimate,
};
use crate::observer::{
    full_state_extended_estimate, scaled_error_into, unit_saturation, weight_rate_into,
    ObserverConfig, ObserverState,
};
use crate::ode::Rk4;
use crate::plant::{running_cost, CostAccumulator, ParametricPlant};

/// Absolute value beyond which a state component counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Default floor below which the Assumption A1 metric raises a warning.
pub const DEFAULT_A1_FLOOR: f64 = 1e-10;
/// RK4 stability margin used for the step-size cap `2.5 ε / |Re λ(E)|`.
pub const STABILITY_FACTOR: f64 = 2.5;

/// Control law `u(t, x̄)` supplied by the caller.
#[derive(Clone)]
pub struct ExternalControl(pub Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>);

impl fmt::Debug for ExternalControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ExternalControl(..)")
    }
}

#[derive(Debug, Clone)]
pub enum ControllerMode {
    /// Feedback plus a probing sinusoid that switches off after 5 s.
    ScenarioU1,
    /// Feedback plus a probing sinusoid for all time.
    ScenarioU2,
    /// `u = û(x̄, Θ̂_a)` from the actor.
    RlPolicy,
    /// Caller-provided law evaluated on the saturated estimate.
    External(ExternalControl),
}

impl ControllerMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerMode::ScenarioU1 => "scenario_u1",
            ControllerMode::ScenarioU2 => "scenario_u2",
            ControllerMode::RlPolicy => "rl_policy",
            ControllerMode::External(_) => "external",
        }
    }
}

/// Manual excitation signals on the two-state benchmark:
/// `−0.9(cos 2x₁ + 2)(x₁ + x₂) + 10 sin 4πt`, with the sinusoid dropped
/// after `t = 5` for `u₁`.
pub fn scenario_control(mode: &ControllerMode, t: f64, x: &[f64]) -> Result<f64> {
    let probe_on = match mode {
        ControllerMode::ScenarioU1 => t <= 5.0,
        ControllerMode::ScenarioU2 => true,
        other => {
            return Err(Error::InvalidInput(format!(
                "{} is not a scenario controller",
                other.name()
            )))
        }
    };
    if x.len() < 2 {
        return Err(Error::Dimension("scenario controllers need n ≥ 2".into()));
    }
    let feedback = -0.9 * ((2.0 * x[0]).cos() + 2.0) * (x[0] + x[1]);
    let probe = if probe_on { 10.0 * (4.0 * PI * t).sin() } else { 0.0 };
    Ok(feedback + probe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverVariant {
    /// Only `y = x₁` is measured.
    OutputFeedback,
    /// The whole state is measured; only `xₙ₊₁` and `W` are estimated.
    FullState,
}

/// Critic/actor basis, gains and initial weights.
#[derive(Debug, Clone)]
pub struct LearningSetup {
    pub basis: Basis,
    pub config: LearnerConfig,
    pub initial: LearnerState,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub plant: ParametricPlant,
    pub observer: ObserverConfig,
    pub observer_variant: ObserverVariant,
    pub learning: Option<LearningSetup>,
    pub controller: ControllerMode,
    pub step_h: f64,
    pub t_end: f64,
    /// Spacing of stack offers.
    pub record_period: f64,
    /// No stack offers before this time.
    pub warmup: f64,
    pub log_decimation: usize,
    /// When false the stack is never offered data.
    pub concurrent_learning: bool,
    pub x0: DVector<f64>,
    pub observer_init: ObserverState,
    pub initial_stack: Option<HistoryStack>,
    /// Reference critic/actor weights for reporting, when known.
    pub ideal_theta: Option<DVector<f64>>,
    /// Window `[t₀, t₁]` for the sup-norm state-estimation error.
    pub error_window: (f64, f64),
    /// Threshold for the first-passage times reported in the summary.
    pub passage_threshold: f64,
    pub a1_floor: f64,
}

impl SimConfig {
    /// `10 · 5 ε |ln ε|`.
    pub fn default_warmup(epsilon: f64) -> f64 {
        50.0 * epsilon * epsilon.ln().abs()
    }

    /// Largest admissible step, `2.5 ε / |Re λ(E)|`.
    pub fn stability_cap(&self) -> f64 {
        STABILITY_FACTOR * self.observer.epsilon / self.observer.fastest_mode_rate()
    }

    pub fn step_count(&self) -> usize {
        (self.t_end / self.step_h).round() as usize
    }

    pub fn record_stride(&self) -> usize {
        ((self.record_period / self.step_h).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.observer.validate()?;
        let n = self.plant.state_dim();
        let m = self.plant.regressor_dim();
        if self.observer.state_dim() != n {
            return Err(Error::Config(format!(
                "observer gains have {} entries, expected n + 1 = {}",
                self.observer.gains.len(),
                n + 1
            )));
        }
        if self.observer.regressor_dim() != m {
            return Err(Error::Config(format!(
                "Γ₃ is {0}×{0}, expected {m}×{m}",
                self.observer.regressor_dim()
            )));
        }
        if !(self.step_h > 0.0 && self.step_h.is_finite()) {
            return Err(Error::Config(format!("step_h must be positive, got {}", self.step_h)));
        }
        let cap = self.stability_cap();
        if self.step_h > cap * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "step_h = {} exceeds the stability cap 2.5·ε/|Re λ(E)| = {cap}",
                self.step_h
            )));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        let steps = self.t_end / self.step_h;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(Error::Config(format!(
                "t_end = {} is not a whole number of steps of {}",
                self.t_end, self.step_h
            )));
        }
        if steps > 1e9 {
            return Err(Error::Config("too many integration steps".into()));
        }
        if !(self.record_period >= self.step_h) {
            return Err(Error::Config(format!(
                "record_period = {} must be at least step_h = {}",
                self.record_period, self.step_h
            )));
        }
        let stride = self.record_period / self.step_h;
        if (stride - stride.round()).abs() > 1e-6 * stride {
            return Err(Error::Config(format!(
                "record_period = {} is not a multiple of step_h = {}",
                self.record_period, self.step_h
            )));
        }
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return Err(Error::Config("warmup must be non-negative".into()));
        }
        if self.log_decimation == 0 {
            return Err(Error::Config("log_decimation must be at least 1".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Config(format!("x0 has {} entries, expected {n}", self.x0.len())));
        }
        check_finite("x0", self.x0.as_slice()).map_err(|e| Error::Config(e.to_string()))?;
        if self.observer_init.xhat.len() != n || self.observer_init.what.len() != m {
            return Err(Error::Config("observer initial state has wrong dimensions".into()));
        }
        if !self.observer_init.is_finite() {
            return Err(Error::Config("observer initial state must be finite".into()));
        }
        if let Some(stack) = &self.initial_stack {
            if stack.regressor_dim() != m || stack.capacity() != self.observer.stack_capacity {
                return Err(Error::Config(format!(
                    "initial stack is {}×{}, expected {m}×{}",
                    stack.regressor_dim(),
                    stack.capacity(),
                    self.observer.stack_capacity
                )));
            }
        }
        if matches!(self.controller, ControllerMode::ScenarioU1 | ControllerMode::ScenarioU2) && n < 2 {
            return Err(Error::Config("scenario controllers need n ≥ 2".into()));
        }
        match &self.learning {
            Some(l) => {
                l.config.validate()?;
                check_learner_dims(&l.basis, &l.initial)?;
                l.initial.validate(&l.config)?;
                if l.basis.state_dim() != n {
                    return Err(Error::Config(format!(
                        "basis expects n = {}, plant has n = {n}",
                        l.basis.state_dim()
                    )));
                }
                if !l.config.grid.is_empty() && l.config.grid.dim() != n {
                    return Err(Error::Config("grid dimension does not match the plant".into()));
                }
                if let Some(t) = &self.ideal_theta {
                    if t.len() != l.basis.neurons() {
                        return Err(Error::Config("ideal_theta has the wrong length".into()));
                    }
                }
            }
            None => {
                if matches!(self.controller, ControllerMode::RlPolicy) {
                    return Err(Error::Config("rl_policy controller needs a learner".into()));
                }
            }
        }
        let (w0, w1) = self.error_window;
        if !(w0.is_finite() && w1.is_finite() && w0 <= w1) {
            return Err(Error::Config(format!("bad error window [{w0}, {w1}]")));
        }
        if !(self.passage_threshold > 0.0) {
            return Err(Error::Config("passage_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Snapshot of every simulated quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub x: DVector<f64>,
    pub observer: ObserverState,
    pub learner: Option<LearnerState>,
    pub stack: HistoryStack,
}

/// One logged row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub xhat_ext: f64,
    pub what: Vec<f64>,
    pub theta_c: Vec<f64>,
    pub theta_a: Vec<f64>,
    /// `Γ`, column-major.
    pub gain: Vec<f64>,
    pub gain_eig_min: f64,
    pub gain_eig_max: f64,
    pub u: f64,
    pub delta_t: f64,
    /// `‖μ‖/ρ` at the saturated estimate.
    pub mu_rho_norm: f64,
    pub a1_metric: f64,
    pub stack_min_sv: f64,
    pub eta: Vec<f64>,
    pub cost: f64,
}

/// Time-indexed log. Learner columns are empty (`r = 0`) when no learner
/// runs, and learner scalars are then zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimWarning {
    A1BelowFloor { t: f64, value: f64 },
    GainCapActive { t: f64 },
}

impl fmt::Display for SimWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimWarning::A1BelowFloor { t, value } => {
                write!(f, "t = {t}: excitation metric {value:e} fell below the floor")
            }
            SimWarning::GainCapActive { t } => {
                write!(f, "t = {t}: gain matrix reached its norm cap")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub steps: usize,
    pub final_time: f64,
    pub final_weight_error: f64,
    pub final_theta_error: Option<f64>,
    pub final_state_norm: f64,
    /// `sup ‖x − x̂‖_∞` over the configured window.
    pub sup_state_error: f64,
    /// First time `‖x − x̂‖` drops below the passage threshold.
    pub state_error_passage: Option<f64>,
    /// First time `‖W − Ŵ‖` drops below the passage threshold.
    pub weight_error_passage: Option<f64>,
    pub min_a1_metric: Option<f64>,
    pub max_gain_eig: Option<f64>,
    pub min_gain_eig: Option<f64>,
    pub max_mu_rho_norm: Option<f64>,
    pub total_cost: f64,
    pub offers: usize,
    pub offers_accepted: usize,
    pub gain_cap_activations: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: SimTrace,
    pub summary: RunSummary,
    pub warnings: Vec<SimWarning>,
    pub final_state: SimState,
}

/// Failed run with everything logged up to the failure.
#[derive(Debug, Clone)]
pub struct SimFailure {
    pub error: Error,
    pub trace: SimTrace,
    pub summary: RunSummary,
    pub warnings: Vec<SimWarning>,
}

impl fmt::Display for SimFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} rows logged)", self.error, self.trace.rows.len())
    }
}

impl std::error::Error for SimFailure {}

/// Offsets of each quantity inside the packed state vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    m: usize,
    r: usize,
    x: usize,
    xhat: usize,
    ext: usize,
    what: usize,
    aux: usize,
    theta_c: usize,
    theta_a: usize,
    gain: usize,
    len: usize,
}

impl Layout {
    fn new(n: usize, m: usize, r: usize) -> Self {
        let x = 0;
        let xhat = x + n;
        let ext = xhat + n;
        let what = ext + 1;
        let aux = what + m;
        let theta_c = aux + 1;
        let theta_a = theta_c + r;
        let gain = theta_a + r;
        let len = gain + r * r;
        Self { n, m, r, x, xhat, ext, what, aux, theta_c, theta_a, gain, len }
    }
}

/// Quantities derived from a packed state at one instant.
#[derive(Debug, Clone, Copy, Default)]
struct Instant {
    u: f64,
    delta_t: f64,
    mu_rho_norm: f64,
}

/// Stepper for one configuration. Owns the scratch buffers and cached grid
/// data; cheap to reuse across many steps.
pub struct Simulator<'a> {
    cfg: &'a SimConfig,
    layout: Layout,
    dynamics: Option<LearnerDynamics>,
    rk: Rk4,
    xbar: Vec<f64>,
    phi: Vec<f64>,
    scratch_m: Vec<f64>,
    gamma1: DVector<f64>,
    gamma2: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a SimConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.plant.state_dim();
        let m = cfg.plant.regressor_dim();
        let r = cfg.learning.as_ref().map_or(0, |l| l.basis.neurons());
        let layout = Layout::new(n, m, r);
        let dynamics = match &cfg.learning {
            Some(l) => Some(LearnerDynamics::new(&l.basis, &cfg.plant, &l.config)?),
            None => None,
        };
        let (gamma1, gamma2) = cfg.observer.output_injection();
        Ok(Self {
            cfg,
            layout,
            dynamics,
            rk: Rk4::new(layout.len),
            xbar: vec![0.0; n],
            phi: vec![0.0; m],
            scratch_m: vec![0.0; m],
            gamma1,
            gamma2,
        })
    }

    pub fn initial_state(&self) -> SimState {
        let cfg = self.cfg;
        let n = cfg.plant.state_dim();
        let m = cfg.plant.regressor_dim();
        let mut observer = cfg.observer_init.clone();
        if cfg.observer_variant == ObserverVariant::FullState {
            observer.xhat = cfg.x0.clone();
            observer.aux_theta = cfg.x0[n - 1];
            observer.xhat_ext = full_state_extended_estimate(&cfg.observer, observer.aux_theta, cfg.x0.as_slice());
        }
        let stack = cfg.initial_stack.clone().unwrap_or_else(|| {
            HistoryStack::new(m, cfg.observer.stack_capacity).expect("validated capacity")
        });
        SimState {
            x: cfg.x0.clone(),
            observer,
            learner: cfg.learning.as_ref().map(|l| l.initial.clone()),
            stack,
        }
    }

    fn pack(&self, st: &SimState) -> Vec<f64> {
        let l = self.layout;
        let mut y = vec![0.0; l.len];
        y[l.x..l.x + l.n].copy_from_slice(st.x.as_slice());
        y[l.xhat..l.xhat + l.n].copy_from_slice(st.observer.xhat.as_slice());
        y[l.ext] = st.observer.xhat_ext;
        y[l.what..l.what + l.m].copy_from_slice(st.observer.what.as_slice());
        y[l.aux] = st.observer.aux_theta;
        if let Some(ls) = &st.learner {
            y[l.theta_c..l.theta_c + l.r].copy_from_slice(ls.theta_c.as_slice());
            y[l.theta_a..l.theta_a + l.r].copy_from_slice(ls.theta_a.as_slice());
            y[l.gain..l.gain + l.r * l.r].copy_from_slice(ls.gain.as_slice());
        }
        y
    }

    fn unpack(&self, y: &[f64], stack: &HistoryStack) -> SimState {
        let l = self.layout;
        let learner = self.cfg.learning.as_ref().map(|_| LearnerState {
            theta_c: DVector::from_row_slice(&y[l.theta_c..l.theta_c + l.r]),
            theta_a: DVector::from_row_slice(&y[l.theta_a..l.theta_a + l.r]),
            gain: DMatrix::from_column_slice(l.r, l.r, &y[l.gain..l.gain + l.r * l.r]),
        });
        SimState {
            x: DVector::from_row_slice(&y[l.x..l.x + l.n]),
            observer: ObserverState {
                xhat: DVector::from_row_slice(&y[l.xhat..l.xhat + l.n]),
                xhat_ext: y[l.ext],
                what: DVector::from_row_slice(&y[l.what..l.what + l.m]),
                aux_theta: y[l.aux],
            },
            learner,
            stack: stack.clone(),
        }
    }

    /// One RK4 step from `t` to `t + h`; offers are not made here.
    pub fn step(&mut self, st: &SimState, t: f64) -> Result<SimState> {
        let mut y = self.pack(st);
        let gain_active = self.gain_indicator(&y);
        self.advance(&mut y, t, &st.stack, gain_active);
        self.post_step(&mut y);
        check_divergence(&y, t + self.cfg.step_h)?;
        Ok(self.unpack(&y, &st.stack))
    }

    fn gain_indicator(&self, y: &[f64]) -> bool {
        match &self.cfg.learning {
            Some(lrn) => {
                let l = self.layout;
                let g = DMatrix::from_column_slice(l.r, l.r, &y[l.gain..l.gain + l.r * l.r]);
                crate::learner::spectral_norm_sym(&g) <= lrn.config.gamma_bar
            }
            None => true,
        }
    }

    /// Symmetrizes `Γ`, projects it back under the norm cap and refreshes
    /// the algebraic outputs of the full-state variant. Returns whether the
    /// cap projection was applied.
    fn post_step(&mut self, y: &mut [f64]) -> bool {
        let l = self.layout;
        if self.cfg.observer_variant == ObserverVariant::FullState {
            y[l.ext] = full_state_extended_estimate(&self.cfg.observer, y[l.aux], &y[l.x..l.x + l.n]);
        }
        let Some(lrn) = &self.cfg.learning else {
            return false;
        };
        let r = l.r;
        let g = &mut y[l.gain..l.gain + r * r];
        for i in 0..r {
            for j in i + 1..r {
                let avg = 0.5 * (g[j * r + i] + g[i * r + j]);
                g[j * r + i] = avg;
                g[i * r + j] = avg;
            }
        }
        let gm = DMatrix::from_column_slice(r, r, g);
        let eig = gm.symmetric_eigen();
        let cap = lrn.config.gamma_bar;
        if eig.eigenvalues.max() <= cap {
            return false;
        }
        let clipped = eig.eigenvalues.map(|v| v.min(cap));
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        for i in 0..r {
            for j in 0..r {
                g[j * r + i] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
            }
        }
        true
    }

    fn advance(&mut self, y: &mut [f64], t: f64, stack: &HistoryStack, gain_active: bool) {
        let h = self.cfg.step_h;
        let mut rk = std::mem::replace(&mut self.rk, Rk4::new(0));
        rk.step(
            |ts, ys, dy| {
                self.rhs(ts, ys, dy, stack, gain_active);
            },
            t,
            y,
            h,
        );
        self.rk = rk;
    }

    /// Saturated (or measured) state fed to the learner and the policy;
    /// returns `x̄ₙ₊₁`.
    fn measured_estimate(&mut self, y: &[f64]) -> f64 {
        let l = self.layout;
        let cfg = self.cfg;
        match cfg.observer_variant {
            ObserverVariant::OutputFeedback => cfg.observer.saturate_estimate(
                &y[l.xhat..l.xhat + l.n],
                y[l.ext],
                &mut self.xbar,
            ),
            ObserverVariant::FullState => {
                self.xbar.copy_from_slice(&y[l.x..l.x + l.n]);
                let ext = full_state_extended_estimate(&cfg.observer, y[l.aux], &y[l.x..l.x + l.n]);
                let bound = cfg.observer.sat_bounds[l.n];
                bound * unit_saturation(ext / bound, cfg.observer.iota)
            }
        }
    }

    fn control(&self, t: f64, y: &[f64]) -> f64 {
        let l = self.layout;
        let cfg = self.cfg;
        match &cfg.controller {
            ControllerMode::ScenarioU1 | ControllerMode::ScenarioU2 => {
                scenario_control(&cfg.controller, t, &y[l.x..l.x + l.n]).unwrap_or(0.0)
            }
            ControllerMode::RlPolicy => {
                let lrn = cfg.learning.as_ref().expect("validated");
                policy_estimate(
                    &lrn.basis,
                    &cfg.plant,
                    &lrn.config.cost,
                    &y[l.theta_a..l.theta_a + l.r],
                    &self.xbar,
                )
            }
            ControllerMode::External(f) => (f.0)(t, &self.xbar),
        }
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64], stack: &HistoryStack, gain_active: bool) -> Instant {
        let l = self.layout;
        let cfg = self.cfg;
        let plant = &cfg.plant;
        let n = l.n;

        let xbar_ext = self.measured_estimate(y);
        let u = self.control(t, y);

        // plant
        {
            let (x, rest) = (&y[l.x..l.x + n], &mut dy[l.x..l.x + n]);
            plant.vector_field_into(plant.true_weights().as_slice(), x, u, rest, &mut self.phi);
        }

        // observer
        let what = &y[l.what..l.what + l.m];
        match cfg.observer_variant {
            ObserverVariant::OutputFeedback => {
                let xhat = &y[l.xhat..l.xhat + n];
                let innovation = y[l.x] - xhat[0];
                for i in 0..n - 1 {
                    dy[l.xhat + i] = xhat[i + 1] + self.gamma1[i] * innovation;
                }
                dy[l.xhat + n - 1] = self.gamma1[n - 1] * innovation
                    + plant.known_drift(xhat)
                    + y[l.ext]
                    + plant.control_gain(xhat) * u;
                dy[l.ext] = self.gamma2 * innovation;
                dy[l.aux] = 0.0;
                plant.regressor_into(&self.xbar, &mut self.phi);
            }
            ObserverVariant::FullState => {
                let x = &y[l.x..l.x + n];
                let ext = full_state_extended_estimate(&cfg.observer, y[l.aux], x);
                dy[l.aux] = ext + plant.control_gain(x) * u;
                // x̂ mirrors the measured state
                for i in 0..n {
                    dy[l.xhat + i] = dy[l.x + i];
                }
                dy[l.ext] = 0.0;
                plant.regressor_into(x, &mut self.phi);
            }
        }
        weight_rate_into(
            &cfg.observer.learning_rate,
            stack,
            &self.phi,
            xbar_ext,
            what,
            &mut self.scratch_m,
            &mut dy[l.what..l.what + l.m],
        );

        let mut instant = Instant { u, ..Instant::default() };
        if let (Some(lrn), Some(dynamics)) = (&cfg.learning, self.dynamics.as_mut()) {
            let r = l.r;
            let (head, d_gain) = dy.split_at_mut(l.gain);
            let (d_tc, d_ta) = head[l.theta_c..l.theta_a + r].split_at_mut(r);
            let terms = dynamics.rates(
                &lrn.basis,
                ModelEstimate { plant, weights: what },
                &lrn.config,
                &y[l.theta_c..l.theta_c + r],
                &y[l.theta_a..l.theta_a + r],
                &y[l.gain..l.gain + r * r],
                &self.xbar,
                gain_active,
                d_tc,
                d_ta,
                &mut d_gain[..r * r],
            );
            instant.delta_t = terms.delta;
            instant.mu_rho_norm = terms.normalized_regressor;
        }
        instant
    }

    fn instant(&mut self, t: f64, y: &[f64], stack: &HistoryStack) -> Instant {
        let mut dy = vec![0.0; self.layout.len];
        self.rhs(t, y, &mut dy, stack, true)
    }

    /// Candidate record `(Φ(x̄), x̄ₙ₊₁)` at the current state.
    fn candidate(&mut self, y: &[f64]) -> (Vec<f64>, f64) {
        let l = self.layout;
        let target = self.measured_estimate(y);
        let mut phi = vec![0.0; l.m];
        match self.cfg.observer_variant {
            ObserverVariant::OutputFeedback => self.cfg.plant.regressor_into(&self.xbar, &mut phi),
            ObserverVariant::FullState => self.cfg.plant.regressor_into(&y[l.x..l.x + l.n], &mut phi),
        }
        (phi, target)
    }
}

fn check_divergence(y: &[f64], t: f64) -> Result<()> {
    if let Some(i) = y.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::Divergence {
            t,
            reason: format!("state component {i} = {}", y[i]),
        });
    }
    Ok(())
}

/// Advances `state` by one RK4 step from `t`, holding the stack fixed.
pub fn step(state: &SimState, t: f64, cfg: &SimConfig) -> Result<SimState> {
    Simulator::new(cfg)?.step(state, t)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|a| a * a).sum::<f64>().sqrt()
}

/// Runs the full configuration, logging every `log_decimation` steps.
pub fn run(cfg: &SimConfig) -> std::result::Result<SimOutcome, SimFailure> {
    let mut sim = match Simulator::new(cfg) {
        Ok(sim) => sim,
        Err(error) => {
            return Err(SimFailure {
                error,
                trace: SimTrace { n: 0, m: 0, r: 0, rows: Vec::new() },
                summary: RunSummary::default(),
                warnings: Vec::new(),
            })
        }
    };
    let l = sim.layout;
    let init = sim.initial_state();
    let mut y = sim.pack(&init);
    let mut stack = init.stack;

    let steps = cfg.step_count();
    let stride = cfg.record_stride();
    let h = cfg.step_h;
    let weights = cfg.plant.true_weights().clone();
    let cost = cfg.learning.as_ref().map(|lrn| lrn.config.cost.clone());

    let mut trace = SimTrace { n: l.n, m: l.m, r: l.r, rows: Vec::new() };
    let mut summary = RunSummary::default();
    let mut warnings = Vec::new();
    let mut cost_acc = CostAccumulator::new();
    let mut eta = vec![0.0; l.n + 1];
    let mut a1_low = false;
    let mut last_good = vec![0.0; l.len];
    let finish = |summary: &mut RunSummary, st: &SimState, steps: usize, time: f64, cost: f64| {
        summary.steps = steps;
        summary.final_time = time;
        summary.final_weight_error = norm(weights.iter().zip(st.observer.what.iter()).map(|(a, b)| a - b));
        summary.final_state_norm = st.x.norm();
        summary.total_cost = cost;
        if let (Some(ideal), Some(ls)) = (&cfg.ideal_theta, &st.learner) {
            summary.final_theta_error = Some((&ls.theta_a - ideal).norm());
        }
    };
    let mut cap_active = false;

    let failure = |error: Error, trace: SimTrace, summary: RunSummary, warnings: Vec<SimWarning>| SimFailure {
        error,
        trace,
        summary,
        warnings,
    };

    for k in 0..=steps {
        let t = k as f64 * h;
        let inst = sim.instant(t, &y, &stack);

        // running cost, trapezoid on the step grid
        let running = match &cost {
            Some(c) => running_cost(c, &y[l.x..l.x + l.n], inst.u),
            None => 0.0,
        };
        if let Err(e) = cost_acc.push(t, running) {
            return Err(failure(e, trace, summary, warnings));
        }

        // estimation-error bookkeeping at every step
        let x = &y[l.x..l.x + l.n];
        let xhat = &y[l.xhat..l.xhat + l.n];
        let est_err = norm(x.iter().zip(xhat).map(|(a, b)| a - b));
        let w_err = norm(weights.iter().zip(&y[l.what..l.what + l.m]).map(|(a, b)| a - b));
        if t >= cfg.error_window.0 && t <= cfg.error_window.1 {
            let sup = x.iter().zip(xhat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            summary.sup_state_error = summary.sup_state_error.max(sup);
        }
        if summary.state_error_passage.is_none() && est_err < cfg.passage_threshold {
            summary.state_error_passage = Some(t);
        }
        if summary.weight_error_passage.is_none() && w_err < cfg.passage_threshold {
            summary.weight_error_passage = Some(t);
        }

        if k % cfg.log_decimation == 0 {
            let x_ext_true = cfg.plant.extended_state(x);
            scaled_error_into(cfg.observer.epsilon, xhat, y[l.ext], x, x_ext_true, &mut eta);
            let mut row = TraceRow {
                t,
                x: x.to_vec(),
                xhat: xhat.to_vec(),
                xhat_ext: y[l.ext],
                what: y[l.what..l.what + l.m].to_vec(),
                theta_c: y[l.theta_c..l.theta_c + l.r].to_vec(),
                theta_a: y[l.theta_a..l.theta_a + l.r].to_vec(),
                gain: y[l.gain..l.gain + l.r * l.r].to_vec(),
                gain_eig_min: 0.0,
                gain_eig_max: 0.0,
                u: inst.u,
                delta_t: inst.delta_t,
                mu_rho_norm: inst.mu_rho_norm,
                a1_metric: 0.0,
                stack_min_sv: stack.min_singular_value(),
                eta: eta.clone(),
                cost: cost_acc.total(),
            };
            if let (Some(lrn), Some(dynamics)) = (&cfg.learning, sim.dynamics.as_mut()) {
                let gm = DMatrix::from_column_slice(l.r, l.r, &row.gain);
                let eig = gm.symmetric_eigen().eigenvalues;
                row.gain_eig_min = eig.min();
                row.gain_eig_max = eig.max();
                row.a1_metric = dynamics.a1_metric(
                    &lrn.config,
                    ModelEstimate { plant: &cfg.plant, weights: &y[l.what..l.what + l.m] },
                    &row.theta_c,
                    &row.theta_a,
                    &row.gain,
                );
                summary.min_gain_eig = Some(summary.min_gain_eig.map_or(row.gain_eig_min, |v| v.min(row.gain_eig_min)));
                summary.max_gain_eig = Some(summary.max_gain_eig.map_or(row.gain_eig_max, |v| v.max(row.gain_eig_max)));
                summary.min_a1_metric = Some(summary.min_a1_metric.map_or(row.a1_metric, |v| v.min(row.a1_metric)));
                summary.max_mu_rho_norm = Some(summary.max_mu_rho_norm.map_or(row.mu_rho_norm, |v| v.max(row.mu_rho_norm)));
                let below = row.a1_metric < cfg.a1_floor;
                if below && !a1_low {
                    warnings.push(SimWarning::A1BelowFloor { t, value: row.a1_metric });
                }
                a1_low = below;
            }
            trace.rows.push(row);
        }

        if k == steps {
            break;
        }

        // stack offers between steps
        if cfg.concurrent_learning && k % stride == 0 && t >= cfg.warmup - 1e-12 {
            let (phi, target) = sim.candidate(&y);
            summary.offers += 1;
            match stack.offer_in_place(&phi, target) {
                Ok(Some(_)) => summary.offers_accepted += 1,
                Ok(None) => {}
                Err(e) => return Err(failure(e, trace, summary, warnings)),
            }
        }

        let gain_active = sim.gain_indicator(&y);
        last_good.copy_from_slice(&y);
        sim.advance(&mut y, t, &stack, gain_active);
        let capped = sim.post_step(&mut y);
        if capped {
            summary.gain_cap_activations += 1;
            if !cap_active {
                warnings.push(SimWarning::GainCapActive { t: t + h });
            }
        }
        cap_active = capped;
        if let Err(e) = check_divergence(&y, t + h) {
            // report the last finite state
            let last = sim.unpack(&last_good, &stack);
            finish(&mut summary, &last, k, t, cost_acc.total());
            return Err(failure(e, trace, summary, warnings));
        }
    }

    let final_state = sim.unpack(&y, &stack);
    finish(&mut summary, &final_state, steps, steps as f64 * h, cost_acc.total());
    Ok(SimOutcome {
        trace,
        summary,
        warnings,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::benchmark::{self, Variant};

    fn observer_cfg() -> ObserverConfig {
        ObserverConfig::new(
            DVector::from_row_slice(&[3.0, 3.0, 1.0]),
            1e-3,
            DVector::from_row_slice(&[5.0, 12.0, 30.0]),
            DMatrix::identity(2, 2) * 0.4,
            5,
        )
        .unwrap()
    }

    fn base_cfg() -> SimConfig {
        SimConfig {
            plant: benchmark::plant(Variant::Sin),
            observer: observer_cfg(),
            observer_variant: ObserverVariant::OutputFeedback,
            learning: None,
            controller: ControllerMode::ScenarioU1,
            step_h: 1e-4,
            t_end: 0.01,
            record_period: 0.05,
            warmup: SimConfig::default_warmup(1e-3),
            log_decimation: 10,
            concurrent_learning: true,
            x0: DVector::from_row_slice(&[1.0, 1.0]),
            observer_init: ObserverState::zeros(2, 2),
            initial_stack: None,
            ideal_theta: None,
            error_window: (0.0, 0.01),
            passage_threshold: 0.1,
            a1_floor: DEFAULT_A1_FLOOR,
        }
    }

    #[test]
    fn scenario_signal_examples() {
        let u = scenario_control(&ControllerMode::ScenarioU1, 6.0, &[0.0, 0.0]).unwrap();
        assert_eq!(u, 0.0);
        let u = scenario_control(&ControllerMode::ScenarioU2, 0.125, &[0.0, 0.0]).unwrap();
        assert!((u - 10.0).abs() < 1e-12);
        for k in 0..=500 {
            let t = k as f64 * 0.01;
            let x = [0.3 * t.sin(), -0.7];
            assert_eq!(
                scenario_control(&ControllerMode::ScenarioU1, t, &x).unwrap(),
                scenario_control(&ControllerMode::ScenarioU2, t, &x).unwrap()
            );
        }
        assert!(scenario_control(&ControllerMode::RlPolicy, 0.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_dynamics_is_a_fixed_point() {
        let mut cfg = base_cfg();
        cfg.plant = ParametricPlant::new(
            2,
            Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[1];
                out[1] = x[0];
            }),
            Arc::new(|_: &[f64]| 1.0),
            DVector::zeros(2),
        )
        .unwrap();
        cfg.controller = ControllerMode::External(ExternalControl(Arc::new(|_, _| 0.0)));
        cfg.x0 = DVector::zeros(2);
        let mut sim = Simulator::new(&cfg).unwrap();
        let s0 = sim.initial_state();
        let s1 = sim.step(&s0, 0.0).unwrap();
        assert_eq!(s0, s1);
    }

    #[test]
    fn chain_flow_is_exact() {
        // u cancels the last row so the plant is a pure double integrator
        let mut cfg = base_cfg();
        cfg.plant = ParametricPlant::new(
            2,
            Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0)),
            Arc::new(|_: &[f64]| 1.0),
            DVector::zeros(2),
        )
        .unwrap();
        cfg.controller = ControllerMode::External(ExternalControl(Arc::new(|_, _| 0.0)));
        cfg.x0 = DVector::from_row_slice(&[1.0, 0.0]);
        let mut sim = Simulator::new(&cfg).unwrap();
        let s1 = sim.step(&sim.initial_state(), 0.0).unwrap();
        assert_eq!(s1.x.as_slice(), &[1.0, 0.0]);

        cfg.x0 = DVector::from_row_slice(&[1.0, 2.0]);
        let mut sim = Simulator::new(&cfg).unwrap();
        let s1 = sim.step(&sim.initial_state(), 0.0).unwrap();
        // e^{Ah} x₀ = (x₁ + h x₂, x₂)
        assert!((s1.x[0] - (1.0 + 2.0e-4)).abs() < 1e-15);
        assert_eq!(s1.x[1], 2.0);
    }

    #[test]
    fn rejects_step_above_stability_cap() {
        let mut cfg = base_cfg();
        cfg.step_h = 0.01;
        cfg.t_end = 1.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("stability cap"), "{err}");
        cfg.step_h = 0.002;
        cfg.record_period = 0.05;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn row_count_and_times() {
        let cfg = base_cfg();
        let out = run(&cfg).unwrap();
        // ⌊0.01 / (1e-4 · 10)⌋ + 1
        assert_eq!(out.trace.rows.len(), 11);
        assert!(out.trace.rows.windows(2).all(|w| w[1].t > w[0].t));
        assert_eq!(out.trace.rows[0].t, 0.0);
        assert!((out.trace.rows[10].t - 0.01).abs() < 1e-15);
    }

    #[test]
    fn offers_start_after_warmup_on_the_record_grid() {
        let mut cfg = base_cfg();
        cfg.t_end = 1.0;
        cfg.record_period = 0.05;
        cfg.warmup = 0.3;
        cfg.log_decimation = 100;
        let out = run(&cfg).unwrap();
        // offers at 0.30, 0.35, …, 0.95
        assert_eq!(out.summary.offers, 14);
        assert_eq!(out.final_state.stack.len(), 5);

        cfg.concurrent_learning = false;
        let out = run(&cfg).unwrap();
        assert_eq!(out.summary.offers, 0);
        assert!(out.final_state.stack.is_empty());
    }

    #[test]
    fn identical_configs_give_identical_traces() {
        let mut cfg = base_cfg();
        cfg.t_end = 0.5;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_returns_partial_trace() {
        let mut cfg = base_cfg();
        cfg.plant = ParametricPlant::new(
            2,
            Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[1] * x[1];
                out[1] = 0.0;
            }),
            Arc::new(|_: &[f64]| 1.0),
            DVector::from_row_slice(&[1.0, 0.0]),
        )
        .unwrap();
        cfg.controller = ControllerMode::External(ExternalControl(Arc::new(|_, _| 0.0)));
        cfg.x0 = DVector::from_row_slice(&[0.0, 1e3]);
        cfg.t_end = 1.0;
        let err = run(&cfg).unwrap_err();
        assert!(matches!(err.error, Error::Divergence { .. }));
        assert!(!err.trace.rows.is_empty());
        // summary describes the last finite state
        assert!(err.summary.final_time < 1.0);
        assert!(err.summary.final_state_norm.is_finite());
        assert_eq!(err.summary.final_time, err.summary.steps as f64 * cfg.step_h);
    }

    #[test]
    fn full_state_variant_tracks_measured_state() {
        let mut cfg = base_cfg();
        cfg.observer_variant = ObserverVariant::FullState;
        cfg.t_end = 0.2;
        let out = run(&cfg).unwrap();
        let last = out.trace.rows.last().unwrap();
        assert_eq!(last.x, last.xhat);
    }
}
