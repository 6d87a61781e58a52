//! Parametric plant class, cost functional and analytic benchmark oracles.
//!
//! The plant is a chain of integrators whose last state obeys
//! `xₙ' = f₀(x) + Wᵀ Φ(x) + g(x) u`. Only the last row carries the
//! uncertain drift, the known drift and the control input.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};

/// `x ↦ out`, writing a vector-valued function of the state into `out`.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `x ↦ scalar`.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Single-input system `x' = Ax + B[f₀(x) + WᵀΦ(x) + g(x)u]` with `A`, `B`
/// a chain of integrators.
#[derive(Clone)]
pub struct ParametricPlant {
    n: usize,
    m: usize,
    regressor: VectorFn,
    control_gain: ScalarFn,
    known_drift: Option<ScalarFn>,
    true_weights: DVector<f64>,
}

impl fmt::Debug for ParametricPlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParametricPlant")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("known_drift", &self.known_drift.is_some())
            .field("true_weights", &self.true_weights.as_slice())
            .finish()
    }
}

impl ParametricPlant {
    pub fn new(
        n: usize,
        regressor: VectorFn,
        control_gain: ScalarFn,
        true_weights: DVector<f64>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if true_weights.is_empty() {
            return Err(Error::Config("regressor dimension must be positive".into()));
        }
        check_finite("true_weights", true_weights.as_slice())?;
        Ok(Self {
            n,
            m: true_weights.len(),
            regressor,
            control_gain,
            known_drift: None,
            true_weights,
        })
    }

    pub fn with_known_drift(mut self, drift: ScalarFn) -> Self {
        self.known_drift = Some(drift);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn regressor_dim(&self) -> usize {
        self.m
    }

    pub fn true_weights(&self) -> &DVector<f64> {
        &self.true_weights
    }

    pub fn regressor_into(&self, x: &[f64], out: &mut [f64]) {
        (self.regressor)(x, out)
    }

    pub fn regressor(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        (self.regressor)(x, out.as_mut_slice());
        out
    }

    pub fn control_gain(&self, x: &[f64]) -> f64 {
        (self.control_gain)(x)
    }

    pub fn known_drift(&self, x: &[f64]) -> f64 {
        self.known_drift.as_ref().map_or(0.0, |f| f(x))
    }

    /// The lumped uncertain drift `xₙ₊₁ = WᵀΦ(x)`.
    pub fn extended_state(&self, x: &[f64]) -> f64 {
        self.regressor(x).dot(&self.true_weights)
    }

    /// Last-row drift `f₀(x) + wᵀΦ(x)` for an arbitrary weight vector.
    pub(crate) fn drift_with(&self, weights: &[f64], x: &[f64], phi_scratch: &mut [f64]) -> f64 {
        (self.regressor)(x, phi_scratch);
        let lumped: f64 = weights.iter().zip(phi_scratch.iter()).map(|(w, p)| w * p).sum();
        self.known_drift(x) + lumped
    }

    /// Writes `Ax + B[f₀ + wᵀΦ + g u]` into `out` using the given weights.
    pub(crate) fn vector_field_into(
        &self,
        weights: &[f64],
        x: &[f64],
        u: f64,
        out: &mut [f64],
        phi_scratch: &mut [f64],
    ) {
        let n = self.n;
        out[..n - 1].copy_from_slice(&x[1..n]);
        out[n - 1] = self.drift_with(weights, x, phi_scratch) + self.control_gain(x) * u;
    }

    /// Plant right-hand side with the true weights.
    pub fn derivative(&self, x: &[f64], u: f64) -> Result<DVector<f64>> {
        check_len("x", x, self.n)?;
        check_finite("x", x)?;
        check_finite("u", &[u])?;
        let mut out = DVector::zeros(self.n);
        let mut phi = vec![0.0; self.m];
        self.vector_field_into(
            self.true_weights.as_slice(),
            x,
            u,
            out.as_mut_slice(),
            &mut phi,
        );
        Ok(out)
    }
}

/// Running cost `Q(x) + R u²`.
#[derive(Clone)]
pub struct CostSpec {
    state_cost: ScalarFn,
    control_weight: f64,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("control_weight", &self.control_weight)
            .finish_non_exhaustive()
    }
}

impl CostSpec {
    pub fn new(state_cost: ScalarFn, control_weight: f64) -> Result<Self> {
        if !(control_weight > 0.0 && control_weight.is_finite()) {
            return Err(Error::Config(format!(
                "control weight R must be positive, got {control_weight}"
            )));
        }
        Ok(Self {
            state_cost,
            control_weight,
        })
    }

    /// `Q(x) = xᵀ Q̄ x`. `q_bar` must be symmetric positive definite.
    pub fn quadratic(q_bar: DMatrix<f64>, control_weight: f64) -> Result<Self> {
        if !q_bar.is_square() {
            return Err(Error::Config("Q̄ must be square".into()));
        }
        if (&q_bar - q_bar.transpose()).amax() > 1e-12 * q_bar.amax().max(1.0) {
            return Err(Error::Config("Q̄ must be symmetric".into()));
        }
        let eig = q_bar.clone().symmetric_eigen();
        if eig.eigenvalues.min() <= 0.0 {
            return Err(Error::Config("Q̄ must be positive definite".into()));
        }
        let n = q_bar.nrows();
        let state_cost: ScalarFn = Arc::new(move |x: &[f64]| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += x[i] * q_bar[(i, j)] * x[j];
                }
            }
            acc
        });
        Self::new(state_cost, control_weight)
    }

    pub fn state_cost(&self, x: &[f64]) -> f64 {
        (self.state_cost)(x)
    }

    pub fn control_weight(&self) -> f64 {
        self.control_weight
    }
}

/// Closed-form optimal value, gradient and policy for a plant/cost pair.
#[derive(Clone)]
pub struct AnalyticSolution {
    pub value: ScalarFn,
    pub value_gradient: VectorFn,
    pub policy: ScalarFn,
}

impl fmt::Debug for AnalyticSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AnalyticSolution { .. }")
    }
}

impl AnalyticSolution {
    pub fn value_gradient(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        (self.value_gradient)(x, out.as_mut_slice());
        out
    }
}

/// HJB residual `V_x [Ax + B(f₀ + WᵀΦ + g u)] + Q(x) + R u²`.
pub fn hjb_residual(
    plant: &ParametricPlant,
    cost: &CostSpec,
    value_gradient: &[f64],
    u: f64,
    x: &[f64],
) -> Result<f64> {
    check_len("V_x", value_gradient, plant.n)?;
    check_finite("V_x", value_gradient)?;
    let f = plant.derivative(x, u)?;
    let transport: f64 = value_gradient.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
    Ok(transport + cost.state_cost(x) + cost.control_weight * u * u)
}

/// `u = −½ R⁻¹ g(x) Bᵀ V_xᵀ`; only the last gradient component enters.
pub fn optimal_policy_from_gradient(
    plant: &ParametricPlant,
    cost: &CostSpec,
    value_gradient: &[f64],
    x: &[f64],
) -> Result<f64> {
    check_len("V_x", value_gradient, plant.n)?;
    check_len("x", x, plant.n)?;
    check_finite("V_x", value_gradient)?;
    check_finite("x", x)?;
    Ok(-0.5 / cost.control_weight * plant.control_gain(x) * value_gradient[plant.n - 1])
}

pub fn running_cost(cost: &CostSpec, x: &[f64], u: f64) -> f64 {
    cost.state_cost(x) + cost.control_weight * u * u
}

/// Trapezoidal integral of the running cost along a time-ordered sample
/// sequence.
#[derive(Debug, Clone, Default)]
pub struct CostAccumulator {
    last: Option<(f64, f64)>,
    total: f64,
    samples: usize,
}

impl CostAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the sample `(t, c)` where `c` is the running cost at `t`.
    pub fn push(&mut self, t: f64, running: f64) -> Result<()> {
        check_finite("cost sample", &[t, running])?;
        if let Some((t_prev, c_prev)) = self.last {
            if t <= t_prev {
                return Err(Error::InvalidInput(format!(
                    "cost samples must be strictly time-ordered ({t} after {t_prev})"
                )));
            }
            self.total += 0.5 * (t - t_prev) * (c_prev + running);
        }
        self.last = Some((t, running));
        self.samples += 1;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
}

/// Integrates `Q(x) + R u²` over `(t, x, u)` samples with the trapezoid rule.
pub fn accumulate_cost<'a, I>(cost: &CostSpec, samples: I) -> Result<f64>
where
    I: IntoIterator<Item = (f64, &'a [f64], f64)>,
{
    let mut acc = CostAccumulator::new();
    for (t, x, u) in samples {
        acc.push(t, running_cost(cost, x, u))?;
    }
    if acc.samples() == 0 {
        return Err(Error::InvalidInput("cannot integrate cost over an empty trace".into()));
    }
    Ok(acc.total())
}

/// Second-order benchmark with a known optimal value function.
pub mod benchmark {
    use super::*;

    /// Ideal drift weights `(W₁, W₂)`.
    pub const WEIGHTS: [f64; 2] = [-1.5, 0.5];
    /// Ideal value-function weights over the basis `[x₁², x₁x₂, x₂²]`.
    pub const OPTIMAL_THETA: [f64; 3] = [1.5, 2.0, 1.0];
    /// `Q̄` in `Q(x) = xᵀQ̄x`, row-major.
    pub const Q_BAR: [f64; 4] = [2.0, 1.0, 1.0, 1.0];
    pub const CONTROL_WEIGHT: f64 = 1.0;

    /// Which control-gain function the benchmark uses.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub enum Variant {
        /// `g(x) = sin x₁ + 2`
        Sin,
        /// `g(x) = cos 2x₁ + 2`
        Cos,
    }

    impl Variant {
        pub const ALL: [Variant; 2] = [Variant::Sin, Variant::Cos];

        pub fn id(self) -> &'static str {
            match self {
                Variant::Sin => "benchmark-sin",
                Variant::Cos => "benchmark-cos",
            }
        }

        pub fn from_id(id: &str) -> Option<Self> {
            Self::ALL.into_iter().find(|v| v.id() == id)
        }

        pub fn gain(self, x1: f64) -> f64 {
            match self {
                Variant::Sin => x1.sin() + 2.0,
                Variant::Cos => (2.0 * x1).cos() + 2.0,
            }
        }
    }

    /// `x₂' = −x₁ + W₁x₂ + W₂(x₁+x₂)g(x)² + g(x)u`, with `f₀(x) = −x₁`
    /// known and `Φ(x) = (x₂, (x₁+x₂) g(x)²)`.
    pub fn plant(variant: Variant) -> ParametricPlant {
        let regressor: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            let g = variant.gain(x[0]);
            out[0] = x[1];
            out[1] = (x[0] + x[1]) * g * g;
        });
        let gain: ScalarFn = Arc::new(move |x: &[f64]| variant.gain(x[0]));
        ParametricPlant::new(2, regressor, gain, DVector::from_row_slice(&WEIGHTS))
            .expect("benchmark plant is well formed")
            .with_known_drift(Arc::new(|x: &[f64]| -x[0]))
    }

    pub fn cost() -> CostSpec {
        CostSpec::quadratic(DMatrix::from_row_slice(2, 2, &Q_BAR), CONTROL_WEIGHT)
            .expect("benchmark cost is well formed")
    }

    /// `V*(x) = 1.5x₁² + 2x₁x₂ + x₂²`, `u*(x) = −g(x)(x₁ + x₂)`.
    pub fn analytic(variant: Variant) -> AnalyticSolution {
        AnalyticSolution {
            value: Arc::new(|x: &[f64]| 1.5 * x[0] * x[0] + 2.0 * x[0] * x[1] + x[1] * x[1]),
            value_gradient: Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = 3.0 * x[0] + 2.0 * x[1];
                out[1] = 2.0 * x[0] + 2.0 * x[1];
            }),
            policy: Arc::new(move |x: &[f64]| -variant.gain(x[0]) * (x[0] + x[1])),
        }
    }

    /// Looks up a preset by its string id.
    pub fn preset(id: &str) -> Option<(ParametricPlant, CostSpec, AnalyticSolution)> {
        Variant::from_id(id).map(|v| (plant(v), cost(), analytic(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::benchmark::{self, Variant};
    use super::*;

    fn g_sin(x1: f64) -> f64 {
        x1.sin() + 2.0
    }

    #[test]
    fn derivative_at_origin_is_zero() {
        let p = benchmark::plant(Variant::Sin);
        let d = p.derivative(&[0.0, 0.0], 0.0).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn derivative_matches_direct_substitution() {
        let p = benchmark::plant(Variant::Sin);
        let d = p.derivative(&[1.0, 1.0], 0.0).unwrap();
        let expected = -1.0 - 1.5 + 0.5 * 2.0 * g_sin(1.0).powi(2);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - expected).abs() < 1e-14);

        let d = p.derivative(&[1.0, 0.0], 1.0).unwrap();
        let expected = -1.0 + 0.5 * g_sin(1.0).powi(2) + g_sin(1.0);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - expected).abs() < 1e-14);
    }

    #[test]
    fn derivative_rejects_non_finite() {
        let p = benchmark::plant(Variant::Sin);
        assert!(matches!(
            p.derivative(&[f64::NAN, 0.0], 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            p.derivative(&[0.0, 0.0], f64::INFINITY),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(p.derivative(&[0.0], 0.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn hjb_residual_trivial_cases() {
        let p = benchmark::plant(Variant::Sin);
        let c = benchmark::cost();
        assert_eq!(hjb_residual(&p, &c, &[0.0, 0.0], 0.0, &[0.0, 0.0]).unwrap(), 0.0);
        let r = hjb_residual(&p, &c, &[0.0, 0.0], 0.0, &[1.0, 1.0]).unwrap();
        assert!((r - 5.0).abs() < 1e-14);
    }

    #[test]
    fn analytic_solution_zeroes_hjb_residual() {
        for v in Variant::ALL {
            let (p, c, sol) = benchmark::preset(v.id()).unwrap();
            for i in 0..41 {
                for j in 0..41 {
                    let x = [-10.0 + 0.5 * i as f64, -10.0 + 0.5 * j as f64];
                    let vx = sol.value_gradient(&x);
                    let u = (sol.policy)(&x);
                    let r = hjb_residual(&p, &c, vx.as_slice(), u, &x).unwrap();
                    assert!(r.abs() <= 1e-9, "{v:?} {x:?} residual {r}");
                }
            }
            assert_eq!((sol.value)(&[0.0, 0.0]), 0.0);
        }
    }

    #[test]
    fn policy_from_gradient_examples() {
        let p = benchmark::plant(Variant::Sin);
        let c = benchmark::cost();
        let sol = benchmark::analytic(Variant::Sin);
        assert_eq!(
            optimal_policy_from_gradient(&p, &c, &[0.0, 0.0], &[3.0, 1.0]).unwrap(),
            0.0
        );
        let x = [1.0, 1.0];
        let vx = sol.value_gradient(&x);
        assert_eq!(vx[1], 4.0);
        let u = optimal_policy_from_gradient(&p, &c, vx.as_slice(), &x).unwrap();
        assert!((u + 2.0 * g_sin(1.0)).abs() < 1e-14);
        assert!((u - (sol.policy)(&x)).abs() < 1e-14);

        let x = [2.5, -2.5];
        let vx = sol.value_gradient(&x);
        assert_eq!(optimal_policy_from_gradient(&p, &c, vx.as_slice(), &x).unwrap(), 0.0);
    }

    #[test]
    fn policy_from_gradient_is_linear() {
        let p = benchmark::plant(Variant::Cos);
        let c = benchmark::cost();
        let x = [0.3, -1.2];
        let vx = [1.7, -0.4];
        let base = optimal_policy_from_gradient(&p, &c, &vx, &x).unwrap();
        for scale in [-3.0, 0.5, 7.0] {
            let scaled = [vx[0] * scale, vx[1] * scale];
            let u = optimal_policy_from_gradient(&p, &c, &scaled, &x).unwrap();
            assert!((u - scale * base).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_integration_examples() {
        let c = benchmark::cost();
        let zero = [0.0, 0.0];
        let samples = [(0.0, &zero[..], 0.0), (1.0, &zero[..], 0.0), (2.0, &zero[..], 0.0)];
        assert_eq!(accumulate_cost(&c, samples).unwrap(), 0.0);

        let x = [1.0, 1.0];
        let j = accumulate_cost(&c, [(0.0, &x[..], 0.0), (1.0, &x[..], 0.0)]).unwrap();
        assert!((j - 5.0).abs() < 1e-14);
        let j = accumulate_cost(&c, [(0.0, &x[..], 2.0), (1.0, &x[..], 2.0)]).unwrap();
        assert!((j - 9.0).abs() < 1e-14);

        let empty: [(f64, &[f64], f64); 0] = [];
        assert!(accumulate_cost(&c, empty).is_err());
        assert!(accumulate_cost(&c, [(1.0, &x[..], 0.0), (1.0, &x[..], 0.0)]).is_err());
    }

    #[test]
    fn first_rows_ignore_input_and_weights() {
        let p = benchmark::plant(Variant::Sin);
        let x = [0.7, -2.0];
        let a = p.derivative(&x, 0.0).unwrap();
        let b = p.derivative(&x, 100.0).unwrap();
        assert_eq!(a[0], x[1]);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn presets_resolve_by_id() {
        assert!(benchmark::preset("benchmark-sin").is_some());
        assert!(benchmark::preset("benchmark-cos").is_some());
        assert!(benchmark::preset("benchmark-tan").is_none());
    }

    #[test]
    fn quadratic_cost_rejects_indefinite() {
        assert!(CostSpec::quadratic(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 1.0).is_err());
        assert!(CostSpec::quadratic(DMatrix::identity(2, 2), 0.0).is_err());
    }
}
