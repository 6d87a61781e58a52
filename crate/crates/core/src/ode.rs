//! Classical fourth-order Runge–Kutta with caller-owned work buffers.

/// Work buffers for [`Rk4::step`].
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.k1.len()
    }

    /// Advances `y` in place from `t` to `t + h`. `rhs(t, y, dy)` must
    /// write the full derivative into `dy`.
    pub fn step<F>(&mut self, mut rhs: F, t: f64, y: &mut [f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        debug_assert_eq!(y.len(), self.dim());
        let half = 0.5 * h;

        rhs(t, y, &mut self.k1);
        for ((s, y), k) in self.stage.iter_mut().zip(y.iter()).zip(&self.k1) {
            *s = y + half * k;
        }
        rhs(t + half, &self.stage, &mut self.k2);
        for ((s, y), k) in self.stage.iter_mut().zip(y.iter()).zip(&self.k2) {
            *s = y + half * k;
        }
        rhs(t + half, &self.stage, &mut self.k3);
        for ((s, y), k) in self.stage.iter_mut().zip(y.iter()).zip(&self.k3) {
            *s = y + h * k;
        }
        rhs(t + h, &self.stage, &mut self.k4);

        let sixth = h / 6.0;
        for i in 0..y.len() {
            y[i] += sixth * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

/// Integrates `rhs` over `steps` fixed steps of size `h`.
pub fn integrate<F>(mut rhs: F, t0: f64, y0: &[f64], h: f64, steps: usize) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut rk = Rk4::new(y0.len());
    let mut y = y0.to_vec();
    for k in 0..steps {
        rk.step(&mut rhs, t0 + k as f64 * h, &mut y, h);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_nilpotent_chain() {
        // x₁' = x₂, x₂' = 0: RK4 reproduces e^{Ah}x exactly
        let y = integrate(|_, y, dy| {
            dy[0] = y[1];
            dy[1] = 0.0;
        }, 0.0, &[1.0, 0.5], 0.1, 1);
        assert_eq!(y, vec![1.05, 0.5]);
        let y = integrate(|_, y, dy| {
            dy[0] = y[1];
            dy[1] = 0.0;
        }, 0.0, &[1.0, 0.0], 0.1, 1);
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn exponential_decay_is_accurate() {
        let y = integrate(|_, y, dy| dy[0] = -2.0 * y[0], 0.0, &[1.0], 1e-3, 1000);
        assert!((y[0] - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn time_dependent_rhs_sees_stage_times() {
        // y' = 3t² integrates t³ exactly
        let y = integrate(|t, _, dy| dy[0] = 3.0 * t * t, 0.0, &[0.0], 0.25, 8);
        assert!((y[0] - 8.0).abs() < 1e-12);
    }
}
