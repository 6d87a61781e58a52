//! Model-based actor–critic learning with Bellman-error extrapolation.
//!
//! Critic and actor share a basis `ψ`. The Bellman error is evaluated at
//! the saturated state estimate and, through the identified model, at every
//! point of a fixed grid. A normalized least-squares law with forgetting
//! drives the critic; the actor tracks the critic.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};
use crate::plant::{CostSpec, ParametricPlant, VectorFn};

/// Value-function basis `ψ: ℝⁿ → ℝʳ` with its Jacobian.
#[derive(Clone)]
pub struct Basis {
    n: usize,
    r: usize,
    psi: VectorFn,
    /// Writes `ψ_x(x)` row-major (`r × n`).
    psi_grad: VectorFn,
}

impl fmt::Debug for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Basis").field("n", &self.n).field("r", &self.r).finish()
    }
}

impl Basis {
    pub fn new(n: usize, r: usize, psi: VectorFn, psi_grad: VectorFn) -> Result<Self> {
        if n == 0 || r == 0 {
            return Err(Error::Config("basis dimensions must be positive".into()));
        }
        Ok(Self { n, r, psi, psi_grad })
    }

    /// `ψ(x) = [x₁², x₁x₂, x₂²]`.
    pub fn quadratic_2d() -> Self {
        Self {
            n: 2,
            r: 3,
            psi: Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[0] * x[0];
                out[1] = x[0] * x[1];
                out[2] = x[1] * x[1];
            }),
            psi_grad: Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = 2.0 * x[0];
                out[1] = 0.0;
                out[2] = x[1];
                out[3] = x[0];
                out[4] = 0.0;
                out[5] = 2.0 * x[1];
            }),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn neurons(&self) -> usize {
        self.r
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.r);
        (self.psi)(x, out.as_mut_slice());
        out
    }

    /// `ψ_x(x)` as an `r × n` matrix.
    pub fn gradient(&self, x: &[f64]) -> DMatrix<f64> {
        let mut flat = vec![0.0; self.r * self.n];
        (self.psi_grad)(x, &mut flat);
        DMatrix::from_row_slice(self.r, self.n, &flat)
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        (self.psi_grad)(x, out)
    }
}

/// Extrapolation points `x₀ⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n: usize,
    coords: Vec<f64>,
}

impl Grid {
    pub fn from_points(n: usize, points: &[Vec<f64>]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("grid dimension must be positive".into()));
        }
        let mut coords = Vec::with_capacity(points.len() * n);
        for (i, p) in points.iter().enumerate() {
            if p.len() != n {
                return Err(Error::Config(format!(
                    "grid point {i} has {} coordinates, expected {n}",
                    p.len()
                )));
            }
            check_finite("grid point", p).map_err(|e| Error::Config(e.to_string()))?;
            coords.extend_from_slice(p);
        }
        Ok(Self { n, coords })
    }

    /// Tensor grid with `count` evenly spaced values on `[min, max]` per axis.
    pub fn uniform(axes: &[(f64, f64, usize)]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        let mut values = Vec::with_capacity(axes.len());
        let mut total: usize = 1;
        for &(lo, hi, count) in axes {
            if !(lo.is_finite() && hi.is_finite()) || count == 0 || (count > 1 && hi <= lo) {
                return Err(Error::Config(format!(
                    "bad grid axis ({lo}, {hi}, {count})"
                )));
            }
            total = total
                .checked_mul(count)
                .filter(|t| *t <= 1_000_000)
                .ok_or_else(|| Error::Config("grid has too many points".into()))?;
            let axis: Vec<f64> = if count == 1 {
                vec![lo]
            } else {
                (0..count)
                    .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
                    .collect()
            };
            values.push(axis);
        }
        let n = axes.len();
        let mut coords = Vec::with_capacity(total * n);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            for d in 0..n {
                coords.push(values[d][idx[d]]);
            }
            // last axis varies fastest
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < values[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { n, coords })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.n..(i + 1) * self.n]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.n)
    }
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub k_c1: f64,
    /// Extrapolation gain; zero disables the grid terms.
    pub k_c2: f64,
    pub k_a1: f64,
    pub k_a2: f64,
    /// Normalization gain `γ`.
    pub gamma: f64,
    /// Forgetting factor `β`.
    pub beta: f64,
    /// Cap `γ̄` on the spectral norm of `Γ`.
    pub gamma_bar: f64,
    pub grid: Grid,
    pub cost: CostSpec,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_c1", self.k_c1),
            ("k_a1", self.k_a1),
            ("k_a2", self.k_a2),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("gamma_bar", self.gamma_bar),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.k_c2 >= 0.0 && self.k_c2.is_finite()) {
            return Err(Error::Config(format!("k_c2 must be non-negative, got {}", self.k_c2)));
        }
        if self.k_c2 > 0.0 && self.grid.is_empty() {
            return Err(Error::Config(
                "extrapolation requested (k_c2 > 0) with an empty grid".into(),
            ));
        }
        Ok(())
    }
}

/// Critic weights, actor weights and the least-squares gain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub theta_c: DVector<f64>,
    pub theta_a: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl LearnerState {
    pub fn new(theta_c: DVector<f64>, theta_a: DVector<f64>, gain: DMatrix<f64>) -> Result<Self> {
        let r = theta_c.len();
        if theta_a.len() != r || gain.nrows() != r || gain.ncols() != r {
            return Err(Error::Dimension(format!(
                "learner state needs Θ̂_c, Θ̂_a ∈ ℝ{r} and Γ ∈ ℝ{r}×{r}"
            )));
        }
        Ok(Self {
            theta_c,
            theta_a,
            gain,
        })
    }

    pub fn validate(&self, cfg: &LearnerConfig) -> Result<()> {
        let g = &self.gain;
        if (g - g.transpose()).amax() > 1e-12 * g.amax().max(1.0) {
            return Err(Error::Config("Γ(0) must be symmetric".into()));
        }
        let eig = g.clone().symmetric_eigen().eigenvalues;
        if eig.min() <= 0.0 {
            return Err(Error::Config("Γ(0) must be positive definite".into()));
        }
        if eig.max() > cfg.gamma_bar {
            return Err(Error::Config(format!(
                "‖Γ(0)‖ = {} exceeds gamma_bar = {}",
                eig.max(),
                cfg.gamma_bar
            )));
        }
        Ok(())
    }
}

/// Identified model `(Ŵ, Φ, g, f₀)` used to simulate experience.
#[derive(Debug, Clone, Copy)]
pub struct ModelEstimate<'a> {
    pub plant: &'a ParametricPlant,
    pub weights: &'a [f64],
}

/// Bellman error `δ` and its regressor `μ` at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanError {
    pub delta: f64,
    pub mu: DVector<f64>,
}

pub fn value_estimate(basis: &Basis, theta_c: &[f64], x: &[f64]) -> f64 {
    basis.eval(x).as_slice().iter().zip(theta_c).map(|(p, t)| p * t).sum()
}

/// `û = −½ R⁻¹ g(x) (ψ_x(x)ᵀ Θ̂_a)ₙ`.
pub fn policy_estimate(
    basis: &Basis,
    plant: &ParametricPlant,
    cost: &CostSpec,
    theta_a: &[f64],
    x: &[f64],
) -> f64 {
    let n = basis.n;
    let mut grad = vec![0.0; basis.r * n];
    basis.gradient_into(x, &mut grad);
    let s: f64 = (0..basis.r).map(|k| grad[k * n + n - 1] * theta_a[k]).sum();
    -0.5 / cost.control_weight() * plant.control_gain(x) * s
}

/// Everything about an evaluation point that does not depend on the
/// learned weights.
#[derive(Debug, Clone)]
struct PointData {
    x: Vec<f64>,
    psi_grad: Vec<f64>,
    phi: Vec<f64>,
    g: f64,
    f0: f64,
    q: f64,
}

impl PointData {
    fn new(n: usize, r: usize, m: usize) -> Self {
        Self {
            x: vec![0.0; n],
            psi_grad: vec![0.0; r * n],
            phi: vec![0.0; m],
            g: 0.0,
            f0: 0.0,
            q: 0.0,
        }
    }

    fn fill(&mut self, basis: &Basis, plant: &ParametricPlant, cost: &CostSpec, x: &[f64]) {
        self.x.copy_from_slice(x);
        basis.gradient_into(x, &mut self.psi_grad);
        plant.regressor_into(x, &mut self.phi);
        self.g = plant.control_gain(x);
        self.f0 = plant.known_drift(x);
        self.q = cost.state_cost(x);
    }

    /// Writes `μ` into `mu` and returns `(δ, s)` with `s = (ψ_xᵀΘ̂_a)ₙ`.
    #[inline]
    fn evaluate(
        &self,
        r_weight: f64,
        weights: &[f64],
        theta_c: &[f64],
        theta_a: &[f64],
        mu: &mut [f64],
    ) -> (f64, f64) {
        let n = self.x.len();
        let r = theta_c.len();
        let mut s = 0.0;
        for k in 0..r {
            s += self.psi_grad[k * n + n - 1] * theta_a[k];
        }
        let u = -0.5 / r_weight * self.g * s;
        let lumped: f64 = weights.iter().zip(&self.phi).map(|(w, p)| w * p).sum();
        let last = self.f0 + lumped + self.g * u;
        let mut delta = self.q + r_weight * u * u;
        for k in 0..r {
            let row = &self.psi_grad[k * n..(k + 1) * n];
            let mut acc = row[n - 1] * last;
            for j in 0..n - 1 {
                acc += row[j] * self.x[j + 1];
            }
            mu[k] = acc;
            delta += theta_c[k] * acc;
        }
        (delta, s)
    }
}

/// `μ = ψ_x(x)[Ax + B(f₀ + ŴᵀΦ + g û)]`, `δ = Θ̂_cᵀμ + Q(x) + ûᵀRû`.
pub fn bellman_error(
    basis: &Basis,
    model: ModelEstimate<'_>,
    cost: &CostSpec,
    theta_c: &[f64],
    theta_a: &[f64],
    x: &[f64],
) -> BellmanError {
    let mut pd = PointData::new(basis.n, basis.r, model.plant.regressor_dim());
    pd.fill(basis, model.plant, cost, x);
    let mut mu = DVector::zeros(basis.r);
    let (delta, _) = pd.evaluate(
        cost.control_weight(),
        model.weights,
        theta_c,
        theta_a,
        mu.as_mut_slice(),
    );
    BellmanError { delta, mu }
}

/// `G = ψ_x B g R⁻¹ gᵀ Bᵀ ψ_xᵀ` at `x`.
pub fn control_gram(basis: &Basis, plant: &ParametricPlant, cost: &CostSpec, x: &[f64]) -> DMatrix<f64> {
    let grad = basis.gradient(x);
    let c = grad.column(basis.n - 1).into_owned();
    let g = plant.control_gain(x);
    &c * c.transpose() * (g * g / cost.control_weight())
}

/// `ρ = 1 + γ μᵀ Γ μ`.
pub fn normalization(cfg: &LearnerConfig, gain: &DMatrix<f64>, mu: &DVector<f64>) -> f64 {
    1.0 + cfg.gamma * (mu.transpose() * gain * mu)[(0, 0)]
}

/// `dΘ̂_c = −k_c1 Γ (μ/ρ) δ − (k_c2/N) Γ Σᵢ (μᵢ/ρᵢ) δᵢ`.
pub fn critic_derivative(
    cfg: &LearnerConfig,
    st: &LearnerState,
    mu_t: &DVector<f64>,
    delta_t: f64,
    grid_data: &[(DVector<f64>, f64)],
) -> Result<DVector<f64>> {
    let r = st.theta_c.len();
    check_len("μ", mu_t.as_slice(), r)?;
    let mut v = mu_t * (cfg.k_c1 * delta_t / normalization(cfg, &st.gain, mu_t));
    if cfg.k_c2 > 0.0 {
        if grid_data.is_empty() {
            return Err(Error::Config(
                "extrapolation requested (k_c2 > 0) with an empty grid".into(),
            ));
        }
        let scale = cfg.k_c2 / grid_data.len() as f64;
        for (mu_i, delta_i) in grid_data {
            check_len("μᵢ", mu_i.as_slice(), r)?;
            v += mu_i * (scale * delta_i / normalization(cfg, &st.gain, mu_i));
        }
    }
    Ok(-(&st.gain * v))
}

/// `dΓ = (βΓ − k_c1 Γμμᵀ Γ/ρ²) 𝟙{‖Γ‖ ≤ γ̄}`, spectral norm.
pub fn gain_matrix_derivative(
    cfg: &LearnerConfig,
    st: &LearnerState,
    mu_t: &DVector<f64>,
) -> DMatrix<f64> {
    let r = st.gain.nrows();
    if spectral_norm_sym(&st.gain) > cfg.gamma_bar {
        return DMatrix::zeros(r, r);
    }
    gain_rate_unchecked(cfg, &st.gain, mu_t)
}

fn gain_rate_unchecked(cfg: &LearnerConfig, gain: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let rho = normalization(cfg, gain, mu);
    let gm = gain * mu;
    gain * cfg.beta - &gm * gm.transpose() * (cfg.k_c1 / (rho * rho))
}

pub(crate) fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.amax()
}

/// Actor law: consensus with the critic, leakage, and the two
/// cross terms built from `G_t` and the per-point `Gᵢ`.
pub fn actor_derivative(
    cfg: &LearnerConfig,
    st: &LearnerState,
    mu_t: &DVector<f64>,
    g_t: &DMatrix<f64>,
    grid_data: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<DVector<f64>> {
    let r = st.theta_a.len();
    check_len("μ", mu_t.as_slice(), r)?;
    if g_t.nrows() != r || g_t.ncols() != r {
        return Err(Error::Dimension(format!("G_t must be {r}×{r}")));
    }
    let ta = &st.theta_a;
    let tc = &st.theta_c;
    let rho = normalization(cfg, &st.gain, mu_t);
    let mut d = -(ta - tc) * cfg.k_a1 - ta * cfg.k_a2;
    d += g_t.transpose() * ta * (cfg.k_c1 * mu_t.dot(tc) / (4.0 * rho));
    if cfg.k_c2 > 0.0 {
        if grid_data.is_empty() {
            return Err(Error::Config(
                "extrapolation requested (k_c2 > 0) with an empty grid".into(),
            ));
        }
        let big_n = grid_data.len() as f64;
        for (mu_i, g_i) in grid_data {
            check_len("μᵢ", mu_i.as_slice(), r)?;
            let rho_i = normalization(cfg, &st.gain, mu_i);
            d += g_i.transpose() * ta * (cfg.k_c2 * mu_i.dot(tc) / (4.0 * big_n * rho_i));
        }
    }
    Ok(d)
}

/// `(1/N) λ_min(Σᵢ μᵢμᵢᵀ/ρᵢ)` with `μᵢ`, `ρᵢ` from the current actor
/// weights, model estimate and `Γ`.
pub fn assumption_a1_metric(
    cfg: &LearnerConfig,
    basis: &Basis,
    st: &LearnerState,
    model: ModelEstimate<'_>,
) -> f64 {
    let gram = extrapolation_gramian(cfg, basis, st, model);
    if cfg.grid.is_empty() {
        return 0.0;
    }
    gram.symmetric_eigen().eigenvalues.min() / cfg.grid.len() as f64
}

/// `Σᵢ μᵢμᵢᵀ/ρᵢ` over the grid (not divided by `N`).
pub fn extrapolation_gramian(
    cfg: &LearnerConfig,
    basis: &Basis,
    st: &LearnerState,
    model: ModelEstimate<'_>,
) -> DMatrix<f64> {
    let r = basis.r;
    let mut gram = DMatrix::zeros(r, r);
    for x in cfg.grid.points() {
        let be = bellman_error(
            basis,
            model,
            &cfg.cost,
            st.theta_c.as_slice(),
            st.theta_a.as_slice(),
            x,
        );
        let rho = normalization(cfg, &st.gain, &be.mu);
        gram += &be.mu * be.mu.transpose() / rho;
    }
    gram
}

/// Trajectory-side quantities produced alongside the learner rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryTerms {
    pub delta: f64,
    pub rho: f64,
    /// `‖μ‖ / ρ`.
    pub normalized_regressor: f64,
}

/// Allocation-free evaluation of the coupled critic, actor and gain-matrix
/// rates. Grid-point data that does not depend on the weights is cached at
/// construction.
#[derive(Debug, Clone)]
pub struct LearnerDynamics {
    n: usize,
    r: usize,
    grid: Vec<PointData>,
    traj: PointData,
    mu: Vec<f64>,
    gmu: Vec<f64>,
    critic_acc: Vec<f64>,
    actor_acc: Vec<f64>,
}

impl LearnerDynamics {
    pub fn new(basis: &Basis, plant: &ParametricPlant, cfg: &LearnerConfig) -> Result<Self> {
        let (n, r, m) = (basis.n, basis.r, plant.regressor_dim());
        if plant.state_dim() != n {
            return Err(Error::Dimension(format!(
                "basis expects n = {n}, plant has n = {}",
                plant.state_dim()
            )));
        }
        if !cfg.grid.is_empty() && cfg.grid.dim() != n {
            return Err(Error::Dimension(format!(
                "grid points have dimension {}, expected {n}",
                cfg.grid.dim()
            )));
        }
        let grid = cfg
            .grid
            .points()
            .map(|x| {
                let mut pd = PointData::new(n, r, m);
                pd.fill(basis, plant, &cfg.cost, x);
                pd
            })
            .collect();
        Ok(Self {
            n,
            r,
            grid,
            traj: PointData::new(n, r, m),
            mu: vec![0.0; r],
            gmu: vec![0.0; r],
            critic_acc: vec![0.0; r],
            actor_acc: vec![0.0; r],
        })
    }

    /// `x ↦ μᵀΓμ` with `Γ` stored column-major.
    #[inline]
    fn quad(&mut self, gain: &[f64]) -> f64 {
        let r = self.r;
        let mut acc = 0.0;
        for i in 0..r {
            let mut gi = 0.0;
            for j in 0..r {
                gi += gain[j * r + i] * self.mu[j];
            }
            self.gmu[i] = gi;
            acc += self.mu[i] * gi;
        }
        acc
    }

    /// Computes `dΘ̂_c`, `dΘ̂_a` and `dΓ` at the saturated estimate `xbar`.
    /// `gain` and `d_gain` are column-major `r × r`; `gain_active` is the
    /// indicator `‖Γ‖ ≤ γ̄` frozen by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn rates(
        &mut self,
        basis: &Basis,
        model: ModelEstimate<'_>,
        cfg: &LearnerConfig,
        theta_c: &[f64],
        theta_a: &[f64],
        gain: &[f64],
        xbar: &[f64],
        gain_active: bool,
        d_theta_c: &mut [f64],
        d_theta_a: &mut [f64],
        d_gain: &mut [f64],
    ) -> TrajectoryTerms {
        let r = self.r;
        let rw = cfg.cost.control_weight();
        let weights = model.weights;
        let n = self.n;

        let mut traj = std::mem::replace(&mut self.traj, PointData::new(0, 0, 0));
        traj.fill(basis, model.plant, &cfg.cost, xbar);
        let (delta_t, s_t) = traj.evaluate(rw, weights, theta_c, theta_a, &mut self.mu);
        let rho_t = 1.0 + cfg.gamma * self.quad(gain);
        let mu_norm = self.mu.iter().map(|v| v * v).sum::<f64>().sqrt();

        // dΓ uses the trajectory μ only
        if gain_active {
            let coef = cfg.k_c1 / (rho_t * rho_t);
            for j in 0..r {
                for i in 0..r {
                    d_gain[j * r + i] = cfg.beta * gain[j * r + i] - coef * self.gmu[i] * self.gmu[j];
                }
            }
        } else {
            d_gain.iter_mut().for_each(|v| *v = 0.0);
        }

        let mu_dot_tc: f64 = self.mu.iter().zip(theta_c).map(|(a, b)| a * b).sum();
        let c_coef = cfg.k_c1 * delta_t / rho_t;
        let a_coef = cfg.k_c1 * traj.g * traj.g / rw * s_t * mu_dot_tc / (4.0 * rho_t);
        for k in 0..r {
            self.critic_acc[k] = c_coef * self.mu[k];
            self.actor_acc[k] = a_coef * traj.psi_grad[k * n + n - 1];
        }
        self.traj = traj;

        if cfg.k_c2 > 0.0 && !self.grid.is_empty() {
            let big_n = self.grid.len() as f64;
            for idx in 0..self.grid.len() {
                let (delta_i, s_i) = {
                    let pd = &self.grid[idx];
                    pd.evaluate(rw, weights, theta_c, theta_a, &mut self.mu)
                };
                let rho_i = 1.0 + cfg.gamma * self.quad(gain);
                let mu_dot_tc: f64 = self.mu.iter().zip(theta_c).map(|(a, b)| a * b).sum();
                let pd = &self.grid[idx];
                let c_coef = cfg.k_c2 / big_n * delta_i / rho_i;
                let a_coef = cfg.k_c2 * pd.g * pd.g / rw * s_i * mu_dot_tc / (4.0 * big_n * rho_i);
                for k in 0..r {
                    self.critic_acc[k] += c_coef * self.mu[k];
                    self.actor_acc[k] += a_coef * pd.psi_grad[k * n + n - 1];
                }
            }
        }

        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..r {
                acc += gain[j * r + i] * self.critic_acc[j];
            }
            d_theta_c[i] = -acc;
            d_theta_a[i] = -cfg.k_a1 * (theta_a[i] - theta_c[i]) - cfg.k_a2 * theta_a[i]
                + self.actor_acc[i];
        }

        TrajectoryTerms {
            delta: delta_t,
            rho: rho_t,
            normalized_regressor: mu_norm / rho_t,
        }
    }

    /// Assumption A1 metric from cached grid data; `gain` column-major.
    pub fn a1_metric(
        &mut self,
        cfg: &LearnerConfig,
        model: ModelEstimate<'_>,
        theta_c: &[f64],
        theta_a: &[f64],
        gain: &[f64],
    ) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        let r = self.r;
        let rw = cfg.cost.control_weight();
        let mut gram = DMatrix::<f64>::zeros(r, r);
        for idx in 0..self.grid.len() {
            self.grid[idx].evaluate(rw, model.weights, theta_c, theta_a, &mut self.mu);
            let rho = 1.0 + cfg.gamma * self.quad(gain);
            for j in 0..r {
                for i in 0..r {
                    gram[(i, j)] += self.mu[i] * self.mu[j] / rho;
                }
            }
        }
        gram.symmetric_eigen().eigenvalues.min() / self.grid.len() as f64
    }
}

pub(crate) fn check_learner_dims(basis: &Basis, st: &LearnerState) -> Result<()> {
    let r = basis.r;
    check_len("Θ̂_c", st.theta_c.as_slice(), r)?;
    check_len("Θ̂_a", st.theta_a.as_slice(), r)?;
    if st.gain.nrows() != r || st.gain.ncols() != r {
        return Err(Error::Dimension(format!("Γ must be {r}×{r}")));
    }
    check_finite("Γ", st.gain.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::benchmark::{self, Variant, OPTIMAL_THETA, WEIGHTS};

    fn benchmark_config(grid: Grid) -> LearnerConfig {
        LearnerConfig {
            k_c1: 1.0,
            k_c2: 5.0,
            k_a1: 80.0,
            k_a2: 0.1,
            gamma: 0.5,
            beta: 100.0,
            gamma_bar: 1000.0,
            grid,
            cost: benchmark::cost(),
        }
    }

    fn section_grid() -> Grid {
        Grid::uniform(&[(-10.0, 10.0, 11), (-10.0, 10.0, 11)]).unwrap()
    }

    fn g_sin(x1: f64) -> f64 {
        x1.sin() + 2.0
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn uniform_grid_layout() {
        let g = section_grid();
        assert_eq!(g.len(), 121);
        assert_eq!(g.point(0), &[-10.0, -10.0]);
        assert_eq!(g.point(1), &[-10.0, -8.0]);
        assert_eq!(g.point(120), &[10.0, 10.0]);
        assert!(Grid::uniform(&[(1.0, 0.0, 3)]).is_err());
        assert!(Grid::from_points(2, &[vec![0.0]]).is_err());
    }

    #[test]
    fn value_and_policy_examples() {
        let basis = Basis::quadratic_2d();
        let plant = benchmark::plant(Variant::Sin);
        let cost = benchmark::cost();
        let x = [1.0, 1.0];
        assert_eq!(value_estimate(&basis, &[0.0; 3], &x), 0.0);
        assert_eq!(policy_estimate(&basis, &plant, &cost, &[0.0; 3], &x), 0.0);
        assert!((value_estimate(&basis, &OPTIMAL_THETA, &x) - 4.5).abs() < 1e-14);
        let u = policy_estimate(&basis, &plant, &cost, &OPTIMAL_THETA, &x);
        assert!((u + 2.0 * g_sin(1.0)).abs() < 1e-14);
    }

    #[test]
    fn bellman_error_examples() {
        let basis = Basis::quadratic_2d();
        let plant = benchmark::plant(Variant::Sin);
        let cost = benchmark::cost();
        let model = ModelEstimate {
            plant: &plant,
            weights: &WEIGHTS,
        };
        let be = bellman_error(&basis, model, &cost, &OPTIMAL_THETA, &OPTIMAL_THETA, &[0.0, 0.0]);
        assert_eq!(be.delta, 0.0);
        assert_eq!(be.mu.amax(), 0.0);

        for x in [[1.0, 1.0], [-3.0, 7.5], [9.9, -0.2], [0.01, 0.02]] {
            let be = bellman_error(&basis, model, &cost, &OPTIMAL_THETA, &OPTIMAL_THETA, &x);
            assert!(be.delta.abs() <= 1e-9, "{x:?}: {}", be.delta);
        }

        let be = bellman_error(&basis, model, &cost, &[0.0; 3], &[0.0; 3], &[1.0, 1.0]);
        assert!((be.delta - 5.0).abs() < 1e-14);
    }

    #[test]
    fn critic_examples() {
        let mut cfg = benchmark_config(section_grid());
        let st = LearnerState::new(DVector::zeros(3), DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let mu = v(&[1.0, -2.0, 0.5]);
        let grid = vec![(v(&[0.3, 0.1, 0.0]), 0.0); 4];
        let d = critic_derivative(&cfg, &st, &mu, 0.0, &grid).unwrap();
        assert_eq!(d.amax(), 0.0);

        cfg.gamma = 0.0;
        let d = critic_derivative(&cfg, &st, &DVector::zeros(3), 0.0, &[(v(&[1.0, 0.0, 0.0]), 1.0)]).unwrap();
        assert!((d - v(&[-5.0, 0.0, 0.0])).amax() < 1e-15);

        // k_c2 = 0 ignores the grid entirely
        cfg.k_c2 = 0.0;
        let d0 = critic_derivative(&cfg, &st, &mu, 2.0, &[]).unwrap();
        let d1 = critic_derivative(&cfg, &st, &mu, 2.0, &[(v(&[1.0, 1.0, 1.0]), 3.0)]).unwrap();
        assert_eq!(d0, d1);
        assert!((d0 - &mu * -2.0).amax() < 1e-15);

        cfg.k_c2 = 1.0;
        assert!(matches!(
            critic_derivative(&cfg, &st, &mu, 2.0, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gain_matrix_examples() {
        let mut cfg = benchmark_config(section_grid());
        let big = LearnerState::new(
            DVector::zeros(3),
            DVector::zeros(3),
            DMatrix::identity(3, 3) * 1001.0,
        )
        .unwrap();
        let d = gain_matrix_derivative(&cfg, &big, &v(&[1.0, 2.0, 3.0]));
        assert_eq!(d.amax(), 0.0);

        cfg.beta = 0.0;
        let st = LearnerState::new(DVector::zeros(3), DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert_eq!(gain_matrix_derivative(&cfg, &st, &DVector::zeros(3)).amax(), 0.0);

        // ρ = 1 + γ = 2 with μ = e₁, Γ = I, γ = 1
        cfg.gamma = 1.0;
        cfg.k_c1 = 1.0;
        let d = gain_matrix_derivative(&cfg, &st, &v(&[1.0, 0.0, 0.0]));
        let mut expected = DMatrix::zeros(3, 3);
        expected[(0, 0)] = -0.25;
        assert!((d - expected).amax() < 1e-15);
    }

    #[test]
    fn actor_examples() {
        let mut cfg = benchmark_config(section_grid());
        let zero = LearnerState::new(DVector::zeros(3), DVector::zeros(3), DMatrix::identity(3, 3) * 100.0).unwrap();
        let mu = v(&[1.0, 0.5, -0.2]);
        let g = DMatrix::identity(3, 3);
        let grid = vec![(mu.clone(), g.clone())];
        assert_eq!(actor_derivative(&cfg, &zero, &mu, &g, &grid).unwrap().amax(), 0.0);

        // at x̄ = 0 with the quadratic basis, μ = 0 and G_t = 0
        let basis = Basis::quadratic_2d();
        let plant = benchmark::plant(Variant::Sin);
        let theta = v(&OPTIMAL_THETA);
        let st = LearnerState::new(theta.clone(), theta.clone(), DMatrix::identity(3, 3)).unwrap();
        let g_t = control_gram(&basis, &plant, &cfg.cost, &[0.0, 0.0]);
        assert_eq!(g_t.amax(), 0.0);
        cfg.k_a2 = 0.0;
        cfg.k_c2 = 0.0;
        let d = actor_derivative(&cfg, &st, &DVector::zeros(3), &g_t, &[]).unwrap();
        assert_eq!(d.amax(), 0.0);

        let cfg = LearnerConfig {
            k_a1: 1.0,
            k_a2: 0.0,
            k_c1: 0.0,
            k_c2: 0.0,
            ..benchmark_config(section_grid())
        };
        let st = LearnerState::new(DVector::zeros(3), v(&[1.0, 0.0, 0.0]), DMatrix::identity(3, 3)).unwrap();
        let d = actor_derivative(&cfg, &st, &mu, &g, &[]).unwrap();
        assert!((d - v(&[-1.0, 0.0, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn a1_metric_examples() {
        let basis = Basis::quadratic_2d();
        let plant = benchmark::plant(Variant::Sin);
        let origin = Grid::from_points(2, &vec![vec![0.0, 0.0]; 5]).unwrap();
        let cfg = benchmark_config(origin);
        let st = LearnerState::new(DVector::zeros(3), DVector::zeros(3), DMatrix::identity(3, 3) * 100.0).unwrap();
        let model = ModelEstimate { plant: &plant, weights: &[0.0, 0.0] };
        assert_eq!(assumption_a1_metric(&cfg, &basis, &st, model), 0.0);

        let cfg = benchmark_config(section_grid());
        let a1 = assumption_a1_metric(&cfg, &basis, &st, model);
        assert!(a1 > 0.0);
    }

    #[test]
    fn fast_path_matches_public_operations() {
        let basis = Basis::quadratic_2d();
        let plant = benchmark::plant(Variant::Sin);
        let cfg = benchmark_config(section_grid());
        let gain = DMatrix::from_row_slice(3, 3, &[120.0, 3.0, -1.0, 3.0, 80.0, 2.0, -1.0, 2.0, 95.0]);
        let st = LearnerState::new(v(&[0.7, 1.1, 0.2]), v(&[1.0, 0.4, 0.9]), gain.clone()).unwrap();
        let weights = [-0.8, 0.3];
        let model = ModelEstimate { plant: &plant, weights: &weights };
        let xbar = [1.3, -0.6];

        let traj = bellman_error(&basis, model, &cfg.cost, st.theta_c.as_slice(), st.theta_a.as_slice(), &xbar);
        let g_t = control_gram(&basis, &plant, &cfg.cost, &xbar);
        let mut critic_grid = Vec::new();
        let mut actor_grid = Vec::new();
        for x in cfg.grid.points() {
            let be = bellman_error(&basis, model, &cfg.cost, st.theta_c.as_slice(), st.theta_a.as_slice(), x);
            critic_grid.push((be.mu.clone(), be.delta));
            actor_grid.push((be.mu, control_gram(&basis, &plant, &cfg.cost, x)));
        }
        let dc = critic_derivative(&cfg, &st, &traj.mu, traj.delta, &critic_grid).unwrap();
        let da = actor_derivative(&cfg, &st, &traj.mu, &g_t, &actor_grid).unwrap();
        let dg = gain_matrix_derivative(&cfg, &st, &traj.mu);

        let mut dyn_ = LearnerDynamics::new(&basis, &plant, &cfg).unwrap();
        let mut fc = vec![0.0; 3];
        let mut fa = vec![0.0; 3];
        let mut fg = vec![0.0; 9];
        let terms = dyn_.rates(
            &basis,
            model,
            &cfg,
            st.theta_c.as_slice(),
            st.theta_a.as_slice(),
            gain.as_slice(),
            &xbar,
            true,
            &mut fc,
            &mut fa,
            &mut fg,
        );
        let rel = |a: &[f64], b: &[f64]| {
            let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
        };
        assert!(rel(&fc, dc.as_slice()) < 1e-12);
        assert!(rel(&fa, da.as_slice()) < 1e-12);
        assert!(rel(&fg, dg.as_slice()) < 1e-12);
        assert!((terms.delta - traj.delta).abs() < 1e-12 * traj.delta.abs().max(1.0));

        let a1_fast = dyn_.a1_metric(&cfg, model, st.theta_c.as_slice(), st.theta_a.as_slice(), gain.as_slice());
        let a1 = assumption_a1_metric(&cfg, &basis, &st, model);
        assert!((a1_fast - a1).abs() <= 1e-12 * a1.abs());
    }

    #[test]
    fn exact_weights_are_a_critic_fixed_point() {
        let basis = Basis::quadratic_2d();
        let plant = benchmark::plant(Variant::Sin);
        let cfg = benchmark_config(section_grid());
        let theta = v(&OPTIMAL_THETA);
        let gain = DMatrix::identity(3, 3) * 1000.0;
        let mut dyn_ = LearnerDynamics::new(&basis, &plant, &cfg).unwrap();
        let model = ModelEstimate { plant: &plant, weights: &WEIGHTS };
        let xbar = [0.8, -2.1];
        let (mut dc, mut da, mut dg) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 9]);
        let terms = dyn_.rates(
            &basis, model, &cfg, theta.as_slice(), theta.as_slice(), gain.as_slice(), &xbar, true,
            &mut dc, &mut da, &mut dg,
        );
        assert!(terms.delta.abs() < 1e-9);
        assert!(dc.iter().all(|v| v.abs() < 1e-6), "{dc:?}");

        // closed form of the actor rate at the fixed point
        let st = LearnerState::new(theta.clone(), theta.clone(), gain.clone()).unwrap();
        let traj = bellman_error(&basis, model, &cfg.cost, &OPTIMAL_THETA, &OPTIMAL_THETA, &xbar);
        let rho = normalization(&cfg, &gain, &traj.mu);
        let g_t = control_gram(&basis, &plant, &cfg.cost, &xbar);
        let mut expected = -&theta * cfg.k_a2 + &g_t * &theta * (cfg.k_c1 * traj.mu.dot(&theta) / (4.0 * rho));
        let big_n = cfg.grid.len() as f64;
        for x in cfg.grid.points() {
            let be = bellman_error(&basis, model, &cfg.cost, &OPTIMAL_THETA, &OPTIMAL_THETA, x);
            let rho_i = normalization(&cfg, &st.gain, &be.mu);
            let g_i = control_gram(&basis, &plant, &cfg.cost, x);
            expected += &g_i * &theta * (cfg.k_c2 * be.mu.dot(&theta) / (4.0 * big_n * rho_i));
        }
        let err = (DVector::from_vec(da) - &expected).amax();
        assert!(err < 1e-10 * expected.amax().max(1.0), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = benchmark_config(Grid::from_points(2, &[]).unwrap());
        assert!(cfg.validate().is_err());
        cfg.k_c2 = 0.0;
        assert!(cfg.validate().is_ok());
        cfg.gamma = -1.0;
        assert!(cfg.validate().is_err());

        let cfg = benchmark_config(section_grid());
        let st = LearnerState::new(DVector::zeros(3), DVector::zeros(3), DMatrix::identity(3, 3) * 2000.0).unwrap();
        assert!(st.validate(&cfg).is_err());
        let st = LearnerState::new(DVector::zeros(3), DVector::zeros(3), DMatrix::identity(3, 3) * 100.0).unwrap();
        assert!(st.validate(&cfg).is_ok());
        assert!(LearnerState::new(DVector::zeros(2), DVector::zeros(3), DMatrix::identity(3, 3)).is_err());
    }
}
