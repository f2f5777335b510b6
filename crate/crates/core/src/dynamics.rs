//! Benchmark plants and fixed-step RK4 integration forward and backward in time.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::interval::Interval;
pub use crate::interval::{sample_box, AxisBox};
use crate::linalg::DenseMatrix;

/// Trajectories whose sup-norm exceeds this are treated as diverged.
pub const DEFAULT_GUARD: f64 = 1.0e6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DynamicsError {
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("integration left the guard box (|x|∞ > {guard}) at step {step}")]
    LeftGuard { step: usize, guard: f64 },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("at least one step is required")]
    NoSteps,
    #[error("state has dimension {got}, system expects {expected}")]
    Dimension { expected: usize, got: usize },
}

/// An autonomous plant `ẋ = f(x)`, `y = h(x)` with interval extensions of
/// `f` and `h`.
pub trait System: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    fn output(&self, x: &[f64]) -> Vec<f64>;
    /// Must enclose `drift(x)` for every `x` in the box.
    fn drift_interval(&self, b: &[Interval]) -> Vec<Interval>;
    /// Must enclose `output(x)` for every `x` in the box.
    fn output_interval(&self, b: &[Interval]) -> Vec<Interval>;
    /// Rows of an enclosure of `∂f/∂x` over the box.
    fn drift_jacobian_interval(&self, b: &[Interval]) -> Vec<Vec<Interval>>;
    /// Rows of an enclosure of `∂h/∂x` over the box.
    fn output_jacobian_interval(&self, b: &[Interval]) -> Vec<Vec<Interval>>;
}

fn point_rows(m: &DenseMatrix) -> Vec<Vec<Interval>> {
    m.to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(Interval::point).collect())
        .collect()
}

/// `ẋ₁ = x₂³, ẋ₂ = -x₁, y = x₁`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReverseDuffing;

impl ReverseDuffing {
    /// Conserved energy `x₁²/2 + x₂⁴/4`.
    pub fn energy(x: &[f64]) -> f64 {
        0.5 * x[0] * x[0] + 0.25 * x[1].powi(4)
    }
}

impl System for ReverseDuffing {
    fn name(&self) -> &str {
        "reverse_duffing"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![x[1] * x[1] * x[1], -x[0]]
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }
    fn drift_interval(&self, b: &[Interval]) -> Vec<Interval> {
        vec![b[1].cube(), -b[0]]
    }
    fn output_interval(&self, b: &[Interval]) -> Vec<Interval> {
        vec![b[0]]
    }
    fn drift_jacobian_interval(&self, b: &[Interval]) -> Vec<Vec<Interval>> {
        vec![
            vec![Interval::ZERO, b[1].square().scale(3.0)],
            vec![Interval::point(-1.0), Interval::ZERO],
        ]
    }
    fn output_jacobian_interval(&self, _b: &[Interval]) -> Vec<Vec<Interval>> {
        vec![vec![Interval::point(1.0), Interval::ZERO]]
    }
}

/// `ẋ₁ = x₂, ẋ₂ = μ(1 - x₁²)x₂ - x₁, y = x₁`.
#[derive(Debug, Clone, Copy)]
pub struct VanDerPol {
    pub mu: f64,
}

impl System for VanDerPol {
    fn name(&self) -> &str {
        "van_der_pol"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![x[1], self.mu * (1.0 - x[0] * x[0]) * x[1] - x[0]]
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }
    fn drift_interval(&self, b: &[Interval]) -> Vec<Interval> {
        let one_minus_sq = Interval::point(1.0) - b[0].square();
        vec![b[1], (one_minus_sq * b[1]).scale(self.mu) - b[0]]
    }
    fn output_interval(&self, b: &[Interval]) -> Vec<Interval> {
        vec![b[0]]
    }
    fn drift_jacobian_interval(&self, b: &[Interval]) -> Vec<Vec<Interval>> {
        let one_minus_sq = Interval::point(1.0) - b[0].square();
        vec![
            vec![Interval::ZERO, Interval::point(1.0)],
            vec![
                (b[0] * b[1]).scale(-2.0 * self.mu) - Interval::point(1.0),
                one_minus_sq.scale(self.mu),
            ],
        ]
    }
    fn output_jacobian_interval(&self, _b: &[Interval]) -> Vec<Vec<Interval>> {
        vec![vec![Interval::point(1.0), Interval::ZERO]]
    }
}

/// Linear plant `ẋ = Fx, y = Hx`; its KKL map is linear and solvable exactly.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub f: DenseMatrix,
    pub h: DenseMatrix,
}

fn interval_matvec(m: &DenseMatrix, v: &[Interval]) -> Vec<Interval> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .zip(v)
                .fold(Interval::ZERO, |acc, (a, x)| acc + x.scale(*a))
        })
        .collect()
}

impl System for LinearSystem {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.f.rows()
    }
    fn output_dim(&self) -> usize {
        self.h.rows()
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.f.matvec(x)
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        self.h.matvec(x)
    }
    fn drift_interval(&self, b: &[Interval]) -> Vec<Interval> {
        interval_matvec(&self.f, b)
    }
    fn output_interval(&self, b: &[Interval]) -> Vec<Interval> {
        interval_matvec(&self.h, b)
    }
    fn drift_jacobian_interval(&self, _b: &[Interval]) -> Vec<Vec<Interval>> {
        point_rows(&self.f)
    }
    fn output_jacobian_interval(&self, _b: &[Interval]) -> Vec<Vec<Interval>> {
        point_rows(&self.h)
    }
}

/// Uniformly sampled trajectory: sample `k` sits at `t0 + k·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub outputs: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectories are non-empty")
    }

    pub fn with_outputs(mut self, system: &dyn System) -> Self {
        self.outputs = Some(self.states.iter().map(|x| system.output(x)).collect());
        self
    }

    /// CSV with header `t,x1..xn[,y1..ym]`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        if let Some(out) = &self.outputs {
            let m = out.first().map_or(0, Vec::len);
            header.extend((1..=m).map(|i| format!("y{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![fmt17(self.time(k))];
            row.extend(x.iter().map(|v| fmt17(*v)));
            if let Some(out) = &self.outputs {
                row.extend(out[k].iter().map(|v| fmt17(*v)));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Format with 17 significant digits (round-trips every `f64`).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One classical RK4 step of `ẋ = rhs(x)`.
pub fn rk4_step(rhs: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], dt: f64) -> Vec<f64> {
    let k1 = rhs(x);
    let tmp: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k2 = rhs(&tmp);
    let tmp: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k3 = rhs(&tmp);
    let tmp: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
    let k4 = rhs(&tmp);
    x.iter()
        .enumerate()
        .map(|(i, a)| a + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Check a freshly computed state against the guard.
pub fn check_state(x: &[f64], step: usize, guard: f64) -> Result<(), DynamicsError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::Diverged { step });
    }
    if x.iter().any(|v| v.abs() > guard) {
        return Err(DynamicsError::LeftGuard { step, guard });
    }
    Ok(())
}

/// Fixed-step RK4 integrator with a divergence guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rk4 {
    pub dt: f64,
    pub guard: f64,
}

impl Rk4 {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            guard: DEFAULT_GUARD,
        }
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    fn validate(
        &self,
        system: &dyn System,
        x0: &[f64],
        n_steps: usize,
    ) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidStep(self.dt));
        }
        if n_steps == 0 {
            return Err(DynamicsError::NoSteps);
        }
        if x0.len() != system.state_dim() {
            return Err(DynamicsError::Dimension {
                expected: system.state_dim(),
                got: x0.len(),
            });
        }
        Ok(())
    }

    fn run(
        &self,
        rhs: &dyn Fn(&[f64]) -> Vec<f64>,
        x0: &[f64],
        n_steps: usize,
    ) -> Result<Vec<Vec<f64>>, DynamicsError> {
        check_state(x0, 0, self.guard)?;
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(x0.to_vec());
        for step in 1..=n_steps {
            let next = rk4_step(rhs, states.last().expect("non-empty"), self.dt);
            check_state(&next, step, self.guard)?;
            states.push(next);
        }
        Ok(states)
    }

    pub fn forward(
        &self,
        system: &dyn System,
        x0: &[f64],
        n_steps: usize,
    ) -> Result<Trajectory, DynamicsError> {
        self.validate(system, x0, n_steps)?;
        let states = self.run(&|x| system.drift(x), x0, n_steps)?;
        Ok(Trajectory {
            t0: 0.0,
            dt: self.dt,
            states,
            outputs: None,
        })
    }

    /// Integrates `ẋ = -f(x)` and reverses the samples, so index `k` is the
    /// state at `τ = -n_steps·dt + k·dt` and the last sample equals `x0`.
    pub fn backward(
        &self,
        system: &dyn System,
        x0: &[f64],
        n_steps: usize,
    ) -> Result<Trajectory, DynamicsError> {
        self.validate(system, x0, n_steps)?;
        let mut states = self.run(
            &|x| system.drift(x).into_iter().map(|v| -v).collect(),
            x0,
            n_steps,
        )?;
        states.reverse();
        Ok(Trajectory {
            t0: -(n_steps as f64) * self.dt,
            dt: self.dt,
            states,
            outputs: None,
        })
    }
}

pub fn integrate_forward(
    system: &dyn System,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory, DynamicsError> {
    Rk4::new(dt).forward(system, x0, n_steps)
}

pub fn integrate_backward(
    system: &dyn System,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory, DynamicsError> {
    Rk4::new(dt).backward(system, x0, n_steps)
}

/// Number of `dt` steps covering `horizon`.
pub fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::sample_box;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn equilibrium_stays_put() {
        let t = integrate_forward(&ReverseDuffing, &[0.0, 0.0], 0.1, 20).unwrap();
        assert_eq!(t.len(), 21);
        assert!(t.states.iter().all(|x| x == &vec![0.0, 0.0]));
        let b = integrate_backward(&ReverseDuffing, &[0.0, 0.0], 0.1, 20).unwrap();
        assert!(b.states.iter().all(|x| x == &vec![0.0, 0.0]));
        assert_eq!(b.time(20), 0.0);
    }

    #[test]
    fn duffing_energy_drift() {
        let x0 = [1.0, 1.0];
        let t = integrate_forward(&ReverseDuffing, &x0, 1e-3, 50_000).unwrap();
        let e0 = ReverseDuffing::energy(&x0);
        let worst = t
            .states
            .iter()
            .map(|x| (ReverseDuffing::energy(x) - e0).abs() / e0.max(1e-12))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-5, "relative energy drift {worst:e}");
    }

    #[test]
    fn van_der_pol_self_convergence() {
        let vdp = VanDerPol { mu: 1.0 };
        let coarse = integrate_forward(&vdp, &[0.1, 0.0], 1e-3, 100_000).unwrap();
        let fine = integrate_forward(&vdp, &[0.1, 0.0], 1e-4, 1_000_000).unwrap();
        // Distance to the reference limit cycle: closest sample of the last
        // reference period.
        let tail = &fine.states[fine.len() - 80_000..];
        let d = tail
            .iter()
            .map(|p| dist(p, coarse.last()))
            .fold(f64::INFINITY, f64::min);
        assert!(d < 0.05, "distance to limit cycle {d}");
    }

    #[test]
    fn backward_then_forward_round_trip() {
        let n = 62_832; // ≈ 2π at dt = 1e-4
        let x0 = [1.0, 0.0];
        let back = integrate_backward(&ReverseDuffing, &x0, 1e-4, n).unwrap();
        assert_eq!(back.last(), &x0[..]);
        let fwd = integrate_forward(&ReverseDuffing, &back.states[0], 1e-4, n).unwrap();
        assert!(dist(fwd.last(), &x0) < 1e-6);
    }

    #[test]
    fn reversed_van_der_pol_blows_up() {
        let vdp = VanDerPol { mu: 1.0 };
        let err = integrate_backward(&vdp, &[5.0, 5.0], 1e-3, 20_000).unwrap_err();
        assert!(matches!(
            err,
            DynamicsError::Diverged { .. } | DynamicsError::LeftGuard { .. }
        ));
    }

    #[test]
    fn rk4_order() {
        let x0 = [1.0, 0.5];
        let horizon = 2.0;
        let reference = integrate_forward(
            &ReverseDuffing,
            &x0,
            0.1 / 8.0,
            steps_for(horizon, 0.1 / 8.0),
        )
        .unwrap();
        let e1 = dist(
            integrate_forward(&ReverseDuffing, &x0, 0.1, steps_for(horizon, 0.1))
                .unwrap()
                .last(),
            reference.last(),
        );
        let e2 = dist(
            integrate_forward(&ReverseDuffing, &x0, 0.05, steps_for(horizon, 0.05))
                .unwrap()
                .last(),
            reference.last(),
        );
        assert!(e1 / e2 >= 8.0, "observed ratio {}", e1 / e2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            integrate_forward(&ReverseDuffing, &[0.0, 0.0], 0.0, 5).unwrap_err(),
            DynamicsError::InvalidStep(0.0)
        );
        assert_eq!(
            integrate_forward(&ReverseDuffing, &[0.0, 0.0], 0.1, 0).unwrap_err(),
            DynamicsError::NoSteps
        );
    }

    #[test]
    fn interval_extensions_enclose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let systems: [&dyn System; 2] = [&ReverseDuffing, &VanDerPol { mu: 1.0 }];
        for sys in systems {
            for case in 0..1000 {
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let bx = AxisBox::new(
                    a.iter().zip(&b).map(|(p, q)| p.min(*q)).collect(),
                    a.iter().zip(&b).map(|(p, q)| p.max(*q)).collect(),
                )
                .unwrap();
                let fi = sys.drift_interval(&bx.intervals());
                let hi = sys.output_interval(&bx.intervals());
                for x in sample_box(&bx, 100, case) {
                    for (v, iv) in sys.drift(&x).iter().zip(&fi) {
                        assert!(iv.contains(*v), "{} drift {v} not in {iv:?}", sys.name());
                    }
                    for (v, iv) in sys.output(&x).iter().zip(&hi) {
                        assert!(iv.contains(*v));
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_extensions_enclose() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let systems: [&dyn System; 2] = [&ReverseDuffing, &VanDerPol { mu: 1.0 }];
        for sys in systems {
            for case in 0..300 {
                let c: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let bx = AxisBox::new(
                    c.iter().map(|v| v - 0.4).collect(),
                    c.iter().map(|v| v + 0.4).collect(),
                )
                .unwrap();
                let jf = sys.drift_jacobian_interval(&bx.intervals());
                let jh = sys.output_jacobian_interval(&bx.intervals());
                for x in sample_box(&bx, 20, case) {
                    for j in 0..2 {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[j] += 1e-6;
                        xm[j] -= 1e-6;
                        let (fp, fm) = (sys.drift(&xp), sys.drift(&xm));
                        for i in 0..2 {
                            let d = (fp[i] - fm[i]) / 2e-6;
                            assert!(
                                jf[i][j].lo - 1e-6 <= d && d <= jf[i][j].hi + 1e-6,
                                "{} df{i}/dx{j}",
                                sys.name()
                            );
                        }
                        let d = (sys.output(&xp)[0] - sys.output(&xm)[0]) / 2e-6;
                        assert!(jh[0][j].lo - 1e-6 <= d && d <= jh[0][j].hi + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let t = integrate_forward(&ReverseDuffing, &[1.0, 0.0], 0.5, 2)
            .unwrap()
            .with_outputs(&ReverseDuffing);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,y1"));
        let first: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(first, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(text.lines().count(), 4);
    }
}
