//! The learned observer: PDE residual, observer simulation with optional
//! bounded measurement noise, and empirical error envelopes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    check_state, fmt17, rk4_step, steps_for, DynamicsError, System, Trajectory, DEFAULT_GUARD,
};
use crate::linalg::{left_inverse, solve_sylvester, DenseMatrix, LinalgError, ObserverDesign};
use crate::net::{Mlp, NetError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KklError {
    #[error("observer shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Observer design plus the learned maps `T̂: x ↦ z` and `T̂*: z ↦ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedObserver {
    pub design: ObserverDesign,
    pub forward_net: Mlp,
    pub inverse_net: Mlp,
    /// Observer initial condition `ẑ(0)`, independent of the plant state.
    pub z0: Vec<f64>,
}

impl LearnedObserver {
    pub fn new(
        design: ObserverDesign,
        forward_net: Mlp,
        inverse_net: Mlp,
    ) -> Result<Self, KklError> {
        let nz = design.state_dim();
        if forward_net.output_dim() != nz {
            return Err(KklError::Shape(format!(
                "forward net outputs {} values, design has n_z = {nz}",
                forward_net.output_dim()
            )));
        }
        if inverse_net.input_dim() != nz || inverse_net.output_dim() != forward_net.input_dim() {
            return Err(KklError::Shape(format!(
                "inverse net maps {} -> {}, expected {nz} -> {}",
                inverse_net.input_dim(),
                inverse_net.output_dim(),
                forward_net.input_dim()
            )));
        }
        Ok(Self {
            design,
            forward_net,
            inverse_net,
            z0: vec![0.0; nz],
        })
    }

    pub fn with_z0(mut self, z0: Vec<f64>) -> Result<Self, KklError> {
        if z0.len() != self.design.state_dim() {
            return Err(KklError::Shape("z0 dimension".into()));
        }
        self.z0 = z0;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.forward_net.input_dim()
    }

    pub fn check_system(&self, system: &dyn System) -> Result<(), KklError> {
        if system.state_dim() != self.state_dim() || system.output_dim() != self.design.output_dim()
        {
            return Err(KklError::Shape(format!(
                "system {} has (n_x, n_y) = ({}, {}), observer expects ({}, {})",
                system.name(),
                system.state_dim(),
                system.output_dim(),
                self.state_dim(),
                self.design.output_dim()
            )));
        }
        Ok(())
    }

    /// Exact linear observer for `ẋ = Fx, y = Hx`: `T` solves
    /// `TF = AT + BH` and the inverse is its left inverse.
    pub fn exact_linear(
        design: ObserverDesign,
        f: &DenseMatrix,
        h: &DenseMatrix,
    ) -> Result<Self, KklError> {
        let t = solve_sylvester(&design.a, f, &design.b.matmul(h))?;
        let ti = left_inverse(&t)?;
        let fwd = Mlp::linear(t.clone(), vec![0.0; t.rows()])?;
        let inv = Mlp::linear(ti, vec![0.0; t.cols()])?;
        Self::new(design, fwd, inv)
    }
}

/// `R(x) = J_T̂(x)·f(x) - A·T̂(x) - B·h(x)`.
pub fn pde_residual(
    observer: &LearnedObserver,
    system: &dyn System,
    x: &[f64],
) -> Result<Vec<f64>, KklError> {
    let trace = observer.forward_net.forward_tangent(x, &system.drift(x))?;
    let at = observer.design.a.matvec(&trace.output);
    let bh = observer.design.b.matvec(&system.output(x));
    Ok((0..at.len())
        .map(|i| trace.output_tangent[i] - at[i] - bh[i])
        .collect())
}

/// Bounded measurement noise `‖v(t)‖ ≤ bound`, held constant over each
/// integration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub bound: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// Noise stream of trajectory `index`.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Uniformly distributed direction times a uniform magnitude in `[0, bound]`.
pub fn sample_noise<R: Rng>(rng: &mut R, dim: usize, bound: f64) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mag: f64 = rng.random::<f64>() * bound;
    if n == 0.0 {
        return vec![0.0; dim];
    }
    dir.iter_mut().for_each(|v| *v *= mag / n);
    // Rounding can push the norm a hair above `mag`.
    let m = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if m > bound {
        dir.iter_mut().for_each(|v| *v *= bound / m);
    }
    dir
}

/// Observer simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Record every `stride`-th step.
    pub stride: usize,
    pub guard: f64,
    /// Also record `‖ẑ - T̂(x)‖`.
    pub track_ez: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 20.0,
            stride: 10,
            guard: DEFAULT_GUARD,
            track_ez: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub x: Trajectory,
    pub z_hat: Trajectory,
    pub x_hat: Trajectory,
    /// `‖x̂ - x‖` at each recorded sample.
    pub errors: Vec<f64>,
    /// `‖ẑ - T̂(x)‖` at each recorded sample, when tracked.
    pub ez_errors: Option<Vec<f64>>,
}

impl Simulation {
    /// CSV with header `t,err[,err_z]`.
    pub fn write_error_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        match &self.ez_errors {
            Some(_) => writeln!(w, "t,err,err_z")?,
            None => writeln!(w, "t,err")?,
        }
        for (k, e) in self.errors.iter().enumerate() {
            let t = fmt17(self.x.time(k));
            match &self.ez_errors {
                Some(ez) => writeln!(w, "{t},{},{}", fmt17(*e), fmt17(ez[k]))?,
                None => writeln!(w, "{t},{}", fmt17(*e))?,
            }
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Joint right-hand side of plant and observer with the noise `v` frozen.
fn joint_rhs<'a>(
    observer: &'a LearnedObserver,
    system: &'a dyn System,
    v: &'a [f64],
) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    let nx = system.state_dim();
    move |s: &[f64]| {
        let (x, z) = s.split_at(nx);
        let mut out = system.drift(x);
        let mut y = system.output(x);
        y.iter_mut().zip(v).for_each(|(y, v)| *y += v);
        let az = observer.design.a.matvec(z);
        let by = observer.design.b.matvec(&y);
        out.extend(az.iter().zip(&by).map(|(a, b)| a + b));
        out
    }
}

/// Co-simulate plant and observer `ż̂ = Aẑ + B(h(x) + v)` from `x0` and the
/// observer's `z0`. `index` selects the noise stream.
pub fn simulate_observer(
    observer: &LearnedObserver,
    system: &dyn System,
    x0: &[f64],
    cfg: &SimConfig,
    noise: Option<&NoiseSpec>,
    index: u64,
) -> Result<Simulation, KklError> {
    observer.check_system(system)?;
    if x0.len() != system.state_dim() {
        return Err(DynamicsError::Dimension {
            expected: system.state_dim(),
            got: x0.len(),
        }
        .into());
    }
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(DynamicsError::InvalidStep(cfg.dt).into());
    }
    let n_steps = steps_for(cfg.horizon, cfg.dt);
    let stride = cfg.stride.max(1);
    let nx = system.state_dim();
    let ny = system.output_dim();
    let mut rng = noise.map(|n| n.rng(index));
    let mut v = vec![0.0; ny];

    let mut state: Vec<f64> = x0.iter().chain(&observer.z0).copied().collect();
    check_state(&state, 0, cfg.guard)?;
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut record = |s: &[f64]| {
        xs.push(s[..nx].to_vec());
        zs.push(s[nx..].to_vec());
    };
    record(&state);
    for step in 1..=n_steps {
        if let (Some(spec), Some(rng)) = (noise, rng.as_mut()) {
            if spec.bound > 0.0 {
                v = sample_noise(rng, ny, spec.bound);
            }
        }
        let rhs = joint_rhs(observer, system, &v);
        state = rk4_step(&rhs, &state, cfg.dt);
        check_state(&state, step, cfg.guard)?;
        if step % stride == 0 || step == n_steps {
            record(&state);
        }
    }

    let x_hat: Vec<Vec<f64>> = zs
        .iter()
        .map(|z| observer.inverse_net.forward(z))
        .collect::<Result<_, _>>()?;
    let errors = xs.iter().zip(&x_hat).map(|(x, xh)| dist(x, xh)).collect();
    let ez_errors = if cfg.track_ez {
        Some(
            xs.iter()
                .zip(&zs)
                .map(|(x, z)| observer.forward_net.forward(x).map(|t| dist(z, &t)))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    // Samples are uniformly spaced except possibly the final one when the
    // stride does not divide the step count; keep the nominal spacing.
    let rec_dt = cfg.dt * stride as f64;
    let traj = |states| Trajectory {
        t0: 0.0,
        dt: rec_dt,
        states,
        outputs: None,
    };
    Ok(Simulation {
        x: traj(xs),
        z_hat: traj(zs),
        x_hat: traj(x_hat),
        errors,
        ez_errors,
    })
}

/// Worst post-transient estimation error over a set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub envelope: f64,
    pub transient: f64,
    /// `sup_{t ≥ T_c} ‖x̂ - x‖` per successful trajectory, in input order.
    pub per_trajectory: Vec<f64>,
    pub diverged: usize,
    pub noise_bound: f64,
    pub noise_seed: Option<u64>,
    pub dt: f64,
    pub horizon: f64,
    pub stride: usize,
}

/// Largest error at or after `t_c`; the final sample is always included.
pub fn post_transient_sup(sim: &Simulation, t_c: f64) -> f64 {
    let n = sim.errors.len();
    let mut best = sim.errors[n - 1];
    for (k, e) in sim.errors.iter().enumerate() {
        if sim.x.time(k) >= t_c - 1e-12 {
            best = best.max(*e);
        }
    }
    best
}

pub fn empirical_error_envelope(
    observer: &LearnedObserver,
    system: &dyn System,
    initial_states: &[Vec<f64>],
    cfg: &SimConfig,
    t_c: f64,
    noise: Option<&NoiseSpec>,
) -> Result<EnvelopeReport, KklError> {
    observer.check_system(system)?;
    let results: Vec<Result<f64, KklError>> = initial_states
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            simulate_observer(observer, system, x0, cfg, noise, i as u64)
                .map(|s| post_transient_sup(&s, t_c))
        })
        .collect();
    let mut per = Vec::with_capacity(results.len());
    let mut diverged = 0;
    for r in results {
        match r {
            Ok(v) => per.push(v),
            Err(KklError::Dynamics(_)) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(EnvelopeReport {
        envelope: per.iter().copied().fold(0.0, f64::max),
        transient: t_c,
        per_trajectory: per,
        diverged,
        noise_bound: noise.map_or(0.0, |n| n.bound),
        noise_seed: noise.map(|n| n.seed),
        dt: cfg.dt,
        horizon: cfg.horizon,
        stride: cfg.stride,
    })
}

/// Defect between a simulated `e_z = ẑ - T̂(x)` and the predicted dynamics
/// `ė_z = Ae_z - R(x) + Bv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDynamicsCheck {
    pub dt: f64,
    pub steps: usize,
    /// `max_k ‖(e_{k+1} - e_k)/dt - ½(g_k + g_{k+1})‖`
    pub max_defect: f64,
    /// `max_defect / dt²`
    pub constant: f64,
}

pub fn error_dynamics_check(
    observer: &LearnedObserver,
    system: &dyn System,
    x0: &[f64],
    dt: f64,
    horizon: f64,
    noise: Option<&NoiseSpec>,
) -> Result<ErrorDynamicsCheck, KklError> {
    observer.check_system(system)?;
    let n_steps = steps_for(horizon, dt);
    let nx = system.state_dim();
    let ny = system.output_dim();
    let mut rng = noise.map(|n| n.rng(0));
    let d = &observer.design;
    let predicted = |s: &[f64], v: &[f64]| -> Result<(Vec<f64>, Vec<f64>), KklError> {
        let (x, z) = s.split_at(nx);
        let t = observer.forward_net.forward(x)?;
        let e: Vec<f64> = z.iter().zip(&t).map(|(a, b)| a - b).collect();
        let r = pde_residual(observer, system, x)?;
        let ae = d.a.matvec(&e);
        let bv = d.b.matvec(v);
        let g = (0..e.len()).map(|i| ae[i] - r[i] + bv[i]).collect();
        Ok((e, g))
    };
    let mut state: Vec<f64> = x0.iter().chain(&observer.z0).copied().collect();
    let mut max_defect: f64 = 0.0;
    for step in 1..=n_steps {
        let mut v = vec![0.0; ny];
        if let (Some(spec), Some(rng)) = (noise, rng.as_mut()) {
            if spec.bound > 0.0 {
                v = sample_noise(rng, ny, spec.bound);
            }
        }
        let (e0, g0) = predicted(&state, &v)?;
        let rhs = joint_rhs(observer, system, &v);
        state = rk4_step(&rhs, &state, dt);
        check_state(&state, step, DEFAULT_GUARD)?;
        let (e1, g1) = predicted(&state, &v)?;
        let defect = (0..e0.len())
            .map(|i| {
                let r = (e1[i] - e0[i]) / dt - 0.5 * (g0[i] + g1[i]);
                r * r
            })
            .sum::<f64>()
            .sqrt();
        max_defect = max_defect.max(defect);
    }
    Ok(ErrorDynamicsCheck {
        dt,
        steps: n_steps,
        max_defect,
        constant: max_defect / (dt * dt),
    })
}

/// Least-squares slope of `-ln(err)` against time over samples in
/// `[t_start, t_end]` with error above `floor`: the observed decay rate.
pub fn decay_rate(sim: &Simulation, t_start: f64, t_end: f64, floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = sim
        .errors
        .iter()
        .enumerate()
        .map(|(k, e)| (sim.x.time(k), *e))
        .filter(|(t, e)| *t >= t_start && *t <= t_end && *e > floor)
        .map(|(t, e)| (t, e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|(t, l)| (t - mt) * (l - ml)).sum();
    let den: f64 = pts.iter().map(|(t, _)| (t - mt) * (t - mt)).sum();
    Some(-num / den)
}
