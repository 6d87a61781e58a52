use claeo_core::learner::Basis;
use claeo_core::ode::{integrate, Rk4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn decay_error(lambda: f64, t_end: f64, steps: usize) -> f64 {
    let h = t_end / steps as f64;
    let y = integrate(|_, y, dy| dy[0] = -lambda * y[0], 0.0, &[1.0], h, steps);
    (y[0] - (-lambda * t_end).exp()).abs()
}

#[test]
fn rk4_order_on_linear_decay() {
    let lambda = 2.0;
    let errs: Vec<f64> = [20, 40, 80, 160].iter().map(|&n| decay_error(lambda, 1.0, n)).collect();
    for pair in errs.windows(2) {
        let order = (pair[0] / pair[1]).log2();
        assert!((order - 4.0).abs() <= 0.1, "measured order {order}, errors {errs:?}");
    }
}

#[test]
fn rk4_is_exact_on_integrator_chain() {
    // ẋ₁ = x₂, ẋ₂ = x₃, ẋ₃ = 0: e^{Ah} is a cubic polynomial in h
    let chain = |_: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = y[1];
        dy[1] = y[2];
        dy[2] = 0.0;
    };
    let y0 = [0.3, -1.25, 2.0];
    for h in [0.5, 0.125, 1.0] {
        let mut y = y0;
        Rk4::new(3).step(chain, 0.0, &mut y, h);
        let exact = [
            y0[0] + h * y0[1] + 0.5 * h * h * y0[2],
            y0[1] + h * y0[2],
            y0[2],
        ];
        for i in 0..3 {
            assert!((y[i] - exact[i]).abs() <= 4.0 * f64::EPSILON * exact[i].abs().max(1.0));
        }
    }
}

#[test]
fn rk4_stage_times_follow_the_step() {
    // ẏ = 3t², exact for cubic
    let y = integrate(|t, _, dy| dy[0] = 3.0 * t * t, 1.0, &[1.0], 0.25, 4);
    assert!((y[0] - 8.0).abs() < 1e-13);
}

#[test]
fn basis_gradient_matches_central_differences() {
    let basis = Basis::quadratic_2d();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let step = 1e-5;
    for _ in 0..100 {
        let x = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let grad = basis.gradient(&x);
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += step;
            xm[j] -= step;
            let fd = (basis.eval(&xp) - basis.eval(&xm)) / (2.0 * step);
            for k in 0..3 {
                let a = grad[(k, j)];
                let scale = a.abs().max(basis.eval(&x).amax()).max(1.0);
                assert!(
                    (fd[k] - a).abs() <= 1e-6 * scale,
                    "ψ_{k} / x_{j} at {x:?}: analytic {a}, fd {}",
                    fd[k]
                );
            }
        }
    }
}

#[test]
fn basis_values_are_the_quadratic_monomials() {
    let basis = Basis::quadratic_2d();
    let psi = basis.eval(&[2.0, -3.0]);
    assert_eq!(psi.as_slice(), &[4.0, -6.0, 9.0]);
    assert_eq!((basis.state_dim(), basis.neurons()), (2, 3));
}
