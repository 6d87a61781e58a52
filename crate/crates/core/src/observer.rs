//! Concurrent-learning adaptive extended observer.
//!
//! A high-gain observer estimates the chain-of-integrators state together
//! with the extended state `xₙ₊₁ = WᵀΦ(x)` on a fast time scale, while the
//! weight estimate `Ŵ` adapts slowly from saturated current estimates plus
//! the records held in a [`HistoryStack`].

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};
use crate::history::HistoryStack;
use crate::plant::ParametricPlant;

pub const DEFAULT_IOTA: f64 = 0.01;
pub const DEFAULT_FULL_STATE_GAIN: f64 = 1.0;

/// Smooth odd saturation `ϱ`: identity on `[-1, 1]`, `tanh` tail of
/// height `ι` beyond.
#[inline]
pub fn unit_saturation(nu: f64, iota: f64) -> f64 {
    let a = nu.abs();
    if a <= 1.0 {
        nu
    } else {
        (1.0 + iota * ((a - 1.0) / iota).tanh()).copysign(nu)
    }
}

/// Derivative `ϱ′(ν)`.
pub fn unit_saturation_slope(nu: f64, iota: f64) -> f64 {
    let a = nu.abs();
    if a <= 1.0 {
        1.0
    } else {
        let c = ((a - 1.0) / iota).cosh();
        1.0 / (c * c)
    }
}

/// `M ϱ(value / M)`.
pub fn saturate(value: f64, bound: f64, iota: f64) -> Result<f64> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::Config(format!(
            "saturation bound must be positive, got {bound}"
        )));
    }
    if !(iota > 0.0 && iota < 1.0) {
        return Err(Error::Config(format!("ι must lie in (0, 1), got {iota}")));
    }
    Ok(bound * unit_saturation(value / bound, iota))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverConfig {
    /// `L = (l₁, …, lₙ₊₁)`.
    pub gains: DVector<f64>,
    pub epsilon: f64,
    /// `M₁ … Mₙ₊₁`.
    pub sat_bounds: DVector<f64>,
    /// `Γ₃`, symmetric positive definite.
    pub learning_rate: DMatrix<f64>,
    pub stack_capacity: usize,
    pub iota: f64,
    /// Scalar gain `l` of the full-state-measurement variant.
    pub full_state_gain: f64,
}

impl ObserverConfig {
    pub fn new(
        gains: DVector<f64>,
        epsilon: f64,
        sat_bounds: DVector<f64>,
        learning_rate: DMatrix<f64>,
        stack_capacity: usize,
    ) -> Result<Self> {
        let cfg = Self {
            gains,
            epsilon,
            sat_bounds,
            learning_rate,
            stack_capacity,
            iota: DEFAULT_IOTA,
            full_state_gain: DEFAULT_FULL_STATE_GAIN,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_iota(mut self, iota: f64) -> Result<Self> {
        self.iota = iota;
        self.validate()?;
        Ok(self)
    }

    /// Plant state dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.gains.len().saturating_sub(1)
    }

    pub fn regressor_dim(&self) -> usize {
        self.learning_rate.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.gains.len();
        if n1 < 2 {
            return Err(Error::Config("L needs at least two entries (n ≥ 1)".into()));
        }
        check_finite("L", self.gains.as_slice()).map_err(to_config)?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.sat_bounds.len() != n1 {
            return Err(Error::Config(format!(
                "saturation bounds have {} entries, expected {n1}",
                self.sat_bounds.len()
            )));
        }
        if let Some(b) = self.sat_bounds.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::Config(format!("saturation bounds must be positive, got {b}")));
        }
        if !(self.iota > 0.0 && self.iota < 1.0) {
            return Err(Error::Config(format!("ι must lie in (0, 1), got {}", self.iota)));
        }
        if !(self.full_state_gain > 0.0 && self.full_state_gain.is_finite()) {
            return Err(Error::Config("full-state gain l must be positive".into()));
        }
        let g3 = &self.learning_rate;
        if !g3.is_square() || g3.nrows() == 0 {
            return Err(Error::Config("Γ₃ must be a non-empty square matrix".into()));
        }
        check_finite("Γ₃", g3.as_slice()).map_err(to_config)?;
        if (g3 - g3.transpose()).amax() > 1e-12 * g3.amax().max(1.0) {
            return Err(Error::Config("Γ₃ must be symmetric".into()));
        }
        if g3.clone().symmetric_eigen().eigenvalues.min() <= 0.0 {
            return Err(Error::Config("Γ₃ must be positive definite".into()));
        }
        if self.stack_capacity < g3.nrows() {
            return Err(Error::Config(format!(
                "stack capacity p = {} must be at least m = {}",
                self.stack_capacity,
                g3.nrows()
            )));
        }
        let eig = companion_eigenvalues(&self.gains);
        if let Some(bad) = eig.iter().find(|z| !(z.re < 0.0)) {
            return Err(Error::Config(format!(
                "E not Hurwitz: eigenvalue {:.6}{:+.6}i has non-negative real part",
                bad.re, bad.im
            )));
        }
        Ok(())
    }

    /// `Γ₁ = (l₁/ε, …, lₙ/εⁿ)` and `Γ₂ = lₙ₊₁/εⁿ⁺¹`.
    pub fn output_injection(&self) -> (DVector<f64>, f64) {
        let n = self.state_dim();
        let gamma1 = DVector::from_fn(n, |i, _| self.gains[i] / self.epsilon.powi(i as i32 + 1));
        let gamma2 = self.gains[n] / self.epsilon.powi(n as i32 + 1);
        (gamma1, gamma2)
    }

    /// Largest `|Re λ|` over the eigenvalues of `E`.
    pub fn fastest_mode_rate(&self) -> f64 {
        companion_eigenvalues(&self.gains)
            .iter()
            .map(|z| z.re.abs())
            .fold(0.0, f64::max)
    }

    /// Saturated estimates `x̄ᵢ = Mᵢ ϱ(x̂ᵢ/Mᵢ)`, `i = 1 … n`, and `x̄ₙ₊₁`.
    pub fn saturate_estimate(&self, xhat: &[f64], xhat_ext: f64, out: &mut [f64]) -> f64 {
        let n = xhat.len();
        for i in 0..n {
            let m = self.sat_bounds[i];
            out[i] = m * unit_saturation(xhat[i] / m, self.iota);
        }
        let m = self.sat_bounds[n];
        m * unit_saturation(xhat_ext / m, self.iota)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::Config(msg),
        other => other,
    }
}

/// Companion matrix `E` with `-L` in the first column and ones on the
/// superdiagonal.
pub fn companion_matrix(gains: &DVector<f64>) -> DMatrix<f64> {
    let k = gains.len();
    let mut e = DMatrix::zeros(k, k);
    for i in 0..k {
        e[(i, 0)] = -gains[i];
        if i + 1 < k {
            e[(i, i + 1)] = 1.0;
        }
    }
    e
}

pub fn companion_eigenvalues(gains: &DVector<f64>) -> Vec<Complex<f64>> {
    companion_matrix(gains).complex_eigenvalues().iter().copied().collect()
}

/// Observer estimates. Also used to hold time derivatives of the same
/// quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub xhat: DVector<f64>,
    /// Estimate of `xₙ₊₁ = WᵀΦ(x)`.
    pub xhat_ext: f64,
    pub what: DVector<f64>,
    /// Filter state `ϑ` of the full-state variant.
    pub aux_theta: f64,
}

impl ObserverState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            xhat: DVector::zeros(n),
            xhat_ext: 0.0,
            what: DVector::zeros(m),
            aux_theta: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.xhat.iter().chain(self.what.iter()).all(|v| v.is_finite())
            && self.xhat_ext.is_finite()
            && self.aux_theta.is_finite()
    }
}

/// Scaled estimation error `ηᵢ = (xᵢ − x̂ᵢ)/εⁿ⁺¹⁻ⁱ`, `ηₙ₊₁ = xₙ₊₁ − x̂ₙ₊₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledErrorDiagnostic {
    pub eta: DVector<f64>,
}

pub fn scaled_error(
    cfg: &ObserverConfig,
    st: &ObserverState,
    x_true: &[f64],
    x_ext_true: f64,
) -> ScaledErrorDiagnostic {
    let n = x_true.len();
    let mut eta = DVector::zeros(n + 1);
    scaled_error_into(cfg.epsilon, st.xhat.as_slice(), st.xhat_ext, x_true, x_ext_true, eta.as_mut_slice());
    ScaledErrorDiagnostic { eta }
}

pub(crate) fn scaled_error_into(
    epsilon: f64,
    xhat: &[f64],
    xhat_ext: f64,
    x_true: &[f64],
    x_ext_true: f64,
    out: &mut [f64],
) {
    let n = x_true.len();
    for i in 0..n {
        out[i] = (x_true[i] - xhat[i]) / epsilon.powi((n - i) as i32);
    }
    out[n] = x_ext_true - xhat_ext;
}

/// `Γ₃ [Φ (target − ŴᵀΦ) + Σⱼ Φʲ (Λʲ − ŴᵀΦʲ)]`.
pub(crate) fn weight_rate_into(
    learning_rate: &DMatrix<f64>,
    stack: &HistoryStack,
    phi_now: &[f64],
    target_now: f64,
    what: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let m = what.len();
    let residual = |phi: &[f64], target: f64| -> f64 {
        target - phi.iter().zip(what).map(|(p, w)| p * w).sum::<f64>()
    };
    let e = residual(phi_now, target_now);
    for k in 0..m {
        scratch[k] = phi_now[k] * e;
    }
    for (phi, target) in stack.records() {
        let e = residual(phi, target);
        for k in 0..m {
            scratch[k] += phi[k] * e;
        }
    }
    for (i, o) in out.iter_mut().enumerate().take(m) {
        *o = (0..m).map(|k| learning_rate[(i, k)] * scratch[k]).sum();
    }
}

fn check_dims(
    cfg: &ObserverConfig,
    st: &ObserverState,
    stack: &HistoryStack,
    plant: &ParametricPlant,
) -> Result<()> {
    let n = plant.state_dim();
    let m = plant.regressor_dim();
    if cfg.state_dim() != n {
        return Err(Error::Dimension(format!(
            "observer gains imply n = {}, plant has n = {n}",
            cfg.state_dim()
        )));
    }
    if cfg.regressor_dim() != m || stack.regressor_dim() != m {
        return Err(Error::Dimension(format!(
            "regressor dimension mismatch: plant m = {m}, Γ₃ is {0}×{0}, stack records have {1}",
            cfg.regressor_dim(),
            stack.regressor_dim()
        )));
    }
    check_len("x̂", st.xhat.as_slice(), n)?;
    check_len("Ŵ", st.what.as_slice(), m)?;
    Ok(())
}

/// Right-hand side of the output-feedback observer driven by `y = x₁`.
pub fn observer_derivative(
    cfg: &ObserverConfig,
    st: &ObserverState,
    stack: &HistoryStack,
    plant: &ParametricPlant,
    y: f64,
    u: f64,
) -> Result<ObserverState> {
    check_dims(cfg, st, stack, plant)?;
    check_finite("y", &[y])?;
    check_finite("u", &[u])?;
    let n = plant.state_dim();
    let m = plant.regressor_dim();
    let (gamma1, gamma2) = cfg.output_injection();
    let innovation = y - st.xhat[0];
    let xhat = st.xhat.as_slice();

    let mut d = ObserverState::zeros(n, m);
    for i in 0..n - 1 {
        d.xhat[i] = xhat[i + 1] + gamma1[i] * innovation;
    }
    d.xhat[n - 1] = gamma1[n - 1] * innovation
        + plant.known_drift(xhat)
        + st.xhat_ext
        + plant.control_gain(xhat) * u;
    d.xhat_ext = gamma2 * innovation;

    let mut xbar = vec![0.0; n];
    let xbar_ext = cfg.saturate_estimate(xhat, st.xhat_ext, &mut xbar);
    let phi = plant.regressor(&xbar);
    let mut scratch = vec![0.0; m];
    weight_rate_into(
        &cfg.learning_rate,
        stack,
        phi.as_slice(),
        xbar_ext,
        st.what.as_slice(),
        &mut scratch,
        d.what.as_mut_slice(),
    );
    Ok(d)
}

/// `x̂ₙ₊₁ = (l/ε)(xₙ − ϑ)` of the full-state variant.
pub fn full_state_extended_estimate(cfg: &ObserverConfig, aux_theta: f64, x: &[f64]) -> f64 {
    cfg.full_state_gain / cfg.epsilon * (x[x.len() - 1] - aux_theta)
}

/// Right-hand side of the variant used when the full state is measured.
/// Only `aux_theta` and `what` carry non-zero rates; `x̂ₙ₊₁` is the
/// algebraic output [`full_state_extended_estimate`].
pub fn full_state_observer_derivative(
    cfg: &ObserverConfig,
    st: &ObserverState,
    stack: &HistoryStack,
    plant: &ParametricPlant,
    x: &[f64],
    u: f64,
) -> Result<ObserverState> {
    check_dims(cfg, st, stack, plant)?;
    check_len("x", x, plant.state_dim())?;
    check_finite("x", x)?;
    check_finite("u", &[u])?;
    let n = plant.state_dim();
    let m = plant.regressor_dim();

    let ext = full_state_extended_estimate(cfg, st.aux_theta, x);
    let mut d = ObserverState::zeros(n, m);
    d.aux_theta = ext + plant.control_gain(x) * u;

    let bound = cfg.sat_bounds[n];
    let xbar_ext = bound * unit_saturation(ext / bound, cfg.iota);
    let phi = plant.regressor(x);
    let mut scratch = vec![0.0; m];
    weight_rate_into(
        &cfg.learning_rate,
        stack,
        phi.as_slice(),
        xbar_ext,
        st.what.as_slice(),
        &mut scratch,
        d.what.as_mut_slice(),
    );
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::benchmark::{self, Variant};

    fn section_config() -> ObserverConfig {
        ObserverConfig::new(
            DVector::from_row_slice(&[3.0, 3.0, 1.0]),
            1e-3,
            DVector::from_row_slice(&[5.0, 12.0, 30.0]),
            DMatrix::identity(2, 2) * 0.4,
            5,
        )
        .unwrap()
    }

    #[test]
    fn saturate_examples() {
        assert_eq!(saturate(0.5, 5.0, 0.01).unwrap(), 0.5);
        assert_eq!(saturate(-3.0, 3.0, 0.01).unwrap(), -3.0);
        let v = saturate(10.0, 5.0, 0.01).unwrap();
        assert!((v - 5.0 * (1.0 + 0.01 * 100f64.tanh())).abs() < 1e-15);
        assert!((v - 5.05).abs() < 1e-12);
        assert!(saturate(1.0, 0.0, 0.01).is_err());
        assert!(saturate(1.0, -2.0, 0.01).is_err());
    }

    #[test]
    fn saturation_slope_matches_finite_differences() {
        let iota = 0.05;
        let h = 1e-7;
        for k in -400..=400 {
            let nu = k as f64 * 0.0075 + 0.0001;
            if (nu.abs() - 1.0).abs() < 1e-4 {
                continue;
            }
            let fd = (unit_saturation(nu + h, iota) - unit_saturation(nu - h, iota)) / (2.0 * h);
            let slope = unit_saturation_slope(nu, iota);
            assert!((fd - slope).abs() < 1e-6, "ν = {nu}: {fd} vs {slope}");
            assert!(slope > 0.0 && slope <= 1.0);
        }
    }

    #[test]
    fn section_gains_give_expected_injection() {
        let cfg = section_config();
        let (g1, g2) = cfg.output_injection();
        assert!((g1[0] - 3000.0).abs() < 1e-9);
        assert!((g1[1] - 3.0e6).abs() < 1e-3);
        assert!((g2 - 1.0e9).abs() < 1.0);
        // λ(E) = −1 (triple)
        assert!((cfg.fastest_mode_rate() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn non_hurwitz_gains_are_rejected() {
        let err = ObserverConfig::new(
            DVector::from_row_slice(&[-1.0, 0.0, 0.0]),
            1e-3,
            DVector::from_row_slice(&[5.0, 12.0, 30.0]),
            DMatrix::identity(2, 2),
            5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("E not Hurwitz"), "{err}");
    }

    #[test]
    fn bad_config_values_are_rejected() {
        let base = section_config();
        let mut c = base.clone();
        c.epsilon = 1.5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.sat_bounds[1] = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.learning_rate[(0, 1)] = 0.3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.learning_rate = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(c.validate().is_err());
        let mut c = base;
        c.stack_capacity = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_innovation_and_residual_gives_zero_adaptation() {
        let cfg = section_config();
        let plant = benchmark::plant(Variant::Sin);
        let stack = HistoryStack::new(2, 5).unwrap();
        let mut st = ObserverState::zeros(2, 2);
        st.xhat = DVector::from_row_slice(&[0.4, -0.2]);
        st.what = DVector::from_row_slice(&[0.3, 0.1]);
        // choose x̂₃ so that x̄₃ = ŴᵀΦ(x̄) (all inside the linear zone)
        st.xhat_ext = plant.regressor(st.xhat.as_slice()).dot(&st.what);
        let d = observer_derivative(&cfg, &st, &stack, &plant, st.xhat[0], 0.7).unwrap();
        assert_eq!(d.xhat_ext, 0.0);
        assert!(d.what.amax() < 1e-15);
    }

    #[test]
    fn weight_rate_with_one_record() {
        let cfg = section_config();
        let plant = benchmark::plant(Variant::Sin);
        let mut stack = HistoryStack::new(2, 5).unwrap();
        stack.offer_in_place(&[1.0, 1.0], 2.0).unwrap();
        let mut st = ObserverState::zeros(2, 2);
        st.xhat = DVector::from_row_slice(&[1.0, 1.0]);
        st.xhat_ext = 4.0;
        let d = observer_derivative(&cfg, &st, &stack, &plant, 1.0, 0.0).unwrap();
        let phi = plant.regressor(&[1.0, 1.0]);
        let expected = (&phi * 4.0 + DVector::from_row_slice(&[1.0, 1.0]) * 2.0) * 0.4;
        assert!((d.what - expected).amax() < 1e-12);
    }

    #[test]
    fn state_rates_follow_the_observer_equations() {
        let cfg = section_config();
        let plant = benchmark::plant(Variant::Sin);
        let stack = HistoryStack::new(2, 5).unwrap();
        let mut st = ObserverState::zeros(2, 2);
        st.xhat = DVector::from_row_slice(&[0.5, -1.0]);
        st.xhat_ext = 2.0;
        let (y, u) = (0.501, 0.25);
        let d = observer_derivative(&cfg, &st, &stack, &plant, y, u).unwrap();
        let e = y - 0.5;
        assert!((d.xhat[0] - (-1.0 + 3000.0 * e)).abs() < 1e-9);
        let expected = 3.0e6 * e - 0.5 + 2.0 + (0.5f64.sin() + 2.0) * u;
        assert!((d.xhat[1] - expected).abs() < 1e-6);
        assert!((d.xhat_ext - 1.0e9 * e).abs() < 1e-2);
    }

    #[test]
    fn exact_estimates_are_an_adaptation_equilibrium() {
        let cfg = section_config();
        let plant = benchmark::plant(Variant::Sin);
        let w = plant.true_weights().clone();
        let mut stack = HistoryStack::new(2, 5).unwrap();
        for x in [[0.5, 1.0], [-1.0, 0.3], [2.0, -0.7]] {
            stack.offer_in_place(plant.regressor(&x).as_slice(), plant.extended_state(&x)).unwrap();
        }
        let x = [0.2, -0.4];
        let st = ObserverState {
            xhat: DVector::from_row_slice(&x),
            xhat_ext: plant.extended_state(&x),
            what: w,
            aux_theta: 0.0,
        };
        let d = observer_derivative(&cfg, &st, &stack, &plant, x[0], 1.0).unwrap();
        assert!(d.what.amax() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let cfg = section_config();
        let plant = benchmark::plant(Variant::Sin);
        let stack = HistoryStack::new(3, 5).unwrap();
        let st = ObserverState::zeros(2, 2);
        assert!(matches!(
            observer_derivative(&cfg, &st, &stack, &plant, 0.0, 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn full_state_variant_examples() {
        let mut cfg = section_config();
        let plant = benchmark::plant(Variant::Sin);
        let stack = HistoryStack::new(2, 5).unwrap();
        let x = [0.3, 0.8];
        let mut st = ObserverState::zeros(2, 2);
        st.aux_theta = x[1];
        let d = full_state_observer_derivative(&cfg, &st, &stack, &plant, &x, 0.0).unwrap();
        assert_eq!(d.aux_theta, 0.0);
        assert_eq!(full_state_extended_estimate(&cfg, st.aux_theta, &x), 0.0);

        cfg.full_state_gain = 1.0;
        let ext = full_state_extended_estimate(&cfg, 0.799, &x);
        assert!((ext - 1.0).abs() < 1e-9);

        // Φ(0) = 0 with an empty stack leaves Ŵ at rest
        let st = ObserverState::zeros(2, 2);
        let d = full_state_observer_derivative(&cfg, &st, &stack, &plant, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(d.what.amax(), 0.0);
    }

    #[test]
    fn scaled_error_examples() {
        let mut cfg = section_config();
        let st = ObserverState {
            xhat: DVector::from_row_slice(&[1.0, 2.0]),
            xhat_ext: 3.0,
            what: DVector::zeros(2),
            aux_theta: 0.0,
        };
        assert_eq!(scaled_error(&cfg, &st, &[1.0, 2.0], 3.0).eta.amax(), 0.0);

        cfg.epsilon = 0.1;
        let zero = ObserverState::zeros(2, 2);
        let eta = scaled_error(&cfg, &zero, &[0.01, 0.01], 0.0).eta;
        assert!((eta[0] - 1.0).abs() < 1e-12);
        assert!((eta[1] - 0.1).abs() < 1e-12);

        let eta1 = scaled_error(&cfg, &zero, &[0.01, 0.01], 0.0).eta[0];
        cfg.epsilon = 0.2;
        let eta2 = scaled_error(&cfg, &zero, &[0.01, 0.01], 0.0).eta[0];
        assert!((eta2 / eta1 - 0.25).abs() < 1e-12);
    }
}
