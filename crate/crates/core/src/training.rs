//! Dataset generation by backward-integral initialization and forward
//! co-simulation, and the three training stages: physics-informed forward
//! training, hard-point fine-tuning and inverse training.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::Region;
use crate::dynamics::{
    check_state, fmt17, rk4_step, steps_for, DynamicsError, Rk4, System, DEFAULT_GUARD,
};
use crate::linalg::ObserverDesign;
use crate::net::{
    loss_gradient, loss_value, AdamState, LbfgsState, Mlp, NetError, Objective, Penalty,
    Termination, Weighted,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{discarded} of {attempted} initial conditions discarded (more than half)")]
    TooManyDiscards { discarded: usize, attempted: usize },
    #[error("non-finite loss in {stage} at epoch {epoch}, step {step}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("dataset file: {0}")]
    Io(String),
}

impl From<std::io::Error> for TrainingError {
    fn from(e: std::io::Error) -> Self {
        TrainingError::Io(e.to_string())
    }
}

impl From<csv::Error> for TrainingError {
    fn from(e: csv::Error) -> Self {
        TrainingError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for TrainingError {
    fn from(e: serde_json::Error) -> Self {
        TrainingError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Number of sampled initial conditions `p`.
    pub p: usize,
    /// Forward simulation horizon.
    pub horizon: f64,
    pub dt: f64,
    /// Backward horizon `T_b` of the initialization integral.
    pub t_b: f64,
    /// Time between recorded pairs along a trajectory.
    pub sample_period: f64,
    /// Separate forward runs that provide PDE collocation points.
    pub collocation_runs: usize,
    /// Weight `ν` of the physics term.
    pub nu: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub layer_width: usize,
    /// Inverse-net architecture; defaults to the forward one.
    pub inverse_hidden_layers: Option<usize>,
    pub inverse_layer_width: Option<usize>,
    pub finetune_rounds: usize,
    pub pool_size: usize,
    pub keep_fraction: f64,
    /// L-BFGS iterations per fine-tuning round.
    pub finetune_iters: usize,
    /// Keep the points mined in earlier rounds in the objective.
    pub mining_accumulate: bool,
    pub inverse_epochs: usize,
    pub inverse_learning_rate: f64,
    /// Region samples for the inverse set.
    pub inverse_samples: usize,
    /// Also use the dataset's trajectory states for the inverse set.
    pub inverse_reuse_trajectories: bool,
    /// Share of samples drawn from the region's boundary shell, when it has
    /// one: collocation runs, mining pools and inverse samples.
    pub shell_fraction: f64,
    /// Shell share for the initial conditions of the data pairs. Kept apart
    /// because states outside an attracting limit cycle have no backward
    /// solution on `[-T_b, 0]`.
    pub data_shell_fraction: f64,
    pub guard: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            p: 1000,
            horizon: 50.0,
            dt: 1e-3,
            t_b: 20.0,
            sample_period: 0.1,
            collocation_runs: 1000,
            nu: 1.0,
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 256,
            hidden_layers: 8,
            layer_width: 100,
            inverse_hidden_layers: None,
            inverse_layer_width: None,
            finetune_rounds: 10,
            pool_size: 4096,
            keep_fraction: 0.25,
            finetune_iters: 20,
            mining_accumulate: true,
            inverse_epochs: 15,
            inverse_learning_rate: 1e-3,
            inverse_samples: 20_000,
            inverse_reuse_trajectories: false,
            shell_fraction: 0.5,
            data_shell_fraction: 0.0,
            guard: DEFAULT_GUARD,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let positive = [
            ("horizon", self.horizon),
            ("dt", self.dt),
            ("t_b", self.t_b),
            ("sample_period", self.sample_period),
            ("learning_rate", self.learning_rate),
            ("inverse_learning_rate", self.inverse_learning_rate),
            ("guard", self.guard),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainingError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(TrainingError::Config(format!(
                "nu must be non-negative, got {}",
                self.nu
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(TrainingError::Config(
                "keep_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shell_fraction)
            || !(0.0..=1.0).contains(&self.data_shell_fraction)
        {
            return Err(TrainingError::Config(
                "shell_fraction must lie in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("p", self.p),
            ("batch_size", self.batch_size),
            ("layer_width", self.layer_width),
            ("pool_size", self.pool_size),
        ] {
            if v == 0 {
                return Err(TrainingError::Config(format!("{name} must be positive")));
            }
        }
        if self.record_stride() == 0 {
            return Err(TrainingError::Config(
                "sample_period shorter than dt".into(),
            ));
        }
        Ok(())
    }

    /// Integration steps between recorded pairs.
    pub fn record_stride(&self) -> usize {
        steps_for(self.sample_period, self.dt)
    }

    /// Layer dimensions of the forward net `n_x → … → n_z`.
    pub fn forward_dims(&self, nx: usize, nz: usize) -> Vec<usize> {
        let mut d = vec![nx];
        d.extend(std::iter::repeat_n(self.layer_width, self.hidden_layers));
        d.push(nz);
        d
    }

    /// Layer dimensions of the inverse net `n_z → … → n_x`.
    pub fn inverse_dims(&self, nx: usize, nz: usize) -> Vec<usize> {
        let layers = self.inverse_hidden_layers.unwrap_or(self.hidden_layers);
        let width = self.inverse_layer_width.unwrap_or(self.layer_width);
        let mut d = vec![nz];
        d.extend(std::iter::repeat_n(width, layers));
        d.push(nx);
        d
    }
}

/// `z₀ = ∫_{-T_b}^0 exp(-Aτ) B h(x̆(τ; x₀)) dτ` by the composite trapezoid
/// rule on the backward RK4 grid, with `exp(-Aτ)` taken elementwise on the
/// diagonal `A`. The kernel decays as `τ → -T_b` because `A` is Hurwitz.
pub fn backward_init(
    system: &dyn System,
    design: &ObserverDesign,
    x0: &[f64],
    t_b: f64,
    dt: f64,
    guard: f64,
) -> Result<Vec<f64>, TrainingError> {
    let n = steps_for(t_b, dt);
    let traj = Rk4::new(dt).with_guard(guard).backward(system, x0, n)?;
    let rates = design.a.diagonal();
    let nz = rates.len();
    let mut z = vec![0.0; nz];
    for (k, x) in traj.states.iter().enumerate() {
        let tau = traj.time(k);
        let w = if k == 0 || k == n { 0.5 * dt } else { dt };
        let bh = design.b.matvec(&system.output(x));
        for i in 0..nz {
            z[i] += w * (-rates[i] * tau).exp() * bh[i];
        }
    }
    Ok(z)
}

/// Joint RK4 of `ẋ = f(x)` and `ż = Az + Bh(x)` from `(x0, z0)`, recording
/// every `stride`-th step.
pub fn co_simulate(
    system: &dyn System,
    design: &ObserverDesign,
    x0: &[f64],
    z0: &[f64],
    dt: f64,
    n_steps: usize,
    stride: usize,
    guard: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, DynamicsError> {
    let nx = x0.len();
    let rhs = |s: &[f64]| {
        let (x, z) = s.split_at(nx);
        let mut out = system.drift(x);
        let az = design.a.matvec(z);
        let bh = design.b.matvec(&system.output(x));
        out.extend(az.iter().zip(&bh).map(|(a, b)| a + b));
        out
    };
    let mut s: Vec<f64> = x0.iter().chain(z0).copied().collect();
    check_state(&s, 0, guard)?;
    let mut out = vec![(x0.to_vec(), z0.to_vec())];
    for step in 1..=n_steps {
        s = rk4_step(&rhs, &s, dt);
        check_state(&s, step, guard)?;
        if step % stride == 0 {
            out.push((s[..nx].to_vec(), s[nx..].to_vec()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub seed: u64,
    pub dt: f64,
    pub t_b: f64,
    pub horizon: f64,
    pub sample_period: f64,
    /// Initial conditions attempted for the pairs.
    pub attempted: usize,
    /// Of those, discarded by a diverging backward or forward run.
    pub discarded: usize,
    pub collocation_attempted: usize,
    pub collocation_discarded: usize,
    /// Pairs per kept trajectory.
    pub pairs_per_trajectory: usize,
}

/// `S_data` pairs, `S_pde` collocation points and the initial conditions the
/// pairs were generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct KklDataset {
    pub data_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub collocation: Vec<Vec<f64>>,
    /// `(x0, z0)` per kept trajectory, in pair order.
    pub initial: Vec<(Vec<f64>, Vec<f64>)>,
    pub meta: DatasetMeta,
}

impl KklDataset {
    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.data_pairs.iter().map(|(x, _)| x.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.data_pairs.iter().map(|(_, z)| z.clone()).collect()
    }

    /// Writes `pairs.csv` (`x1..xn,z1..zm`), `collocation.csv`,
    /// `initial.csv` and `dataset.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), TrainingError> {
        std::fs::create_dir_all(dir)?;
        let nx = self.initial.first().map_or(0, |(x, _)| x.len());
        let nz = self.initial.first().map_or(0, |(_, z)| z.len());
        let header: Vec<String> = (1..=nx)
            .map(|i| format!("x{i}"))
            .chain((1..=nz).map(|i| format!("z{i}")))
            .collect();
        let write_pairs =
            |name: &str, rows: &[(Vec<f64>, Vec<f64>)]| -> Result<(), TrainingError> {
                let mut w = csv::Writer::from_path(dir.join(name))?;
                w.write_record(&header)?;
                for (x, z) in rows {
                    w.write_record(x.iter().chain(z).map(|v| fmt17(*v)))?;
                }
                w.flush()?;
                Ok(())
            };
        write_pairs("pairs.csv", &self.data_pairs)?;
        write_pairs("initial.csv", &self.initial)?;
        let mut w = csv::Writer::from_path(dir.join("collocation.csv"))?;
        w.write_record((1..=nx).map(|i| format!("x{i}")))?;
        for x in &self.collocation {
            w.write_record(x.iter().map(|v| fmt17(*v)))?;
        }
        w.flush()?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("dataset.json"))?),
            &self.meta,
        )?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, TrainingError> {
        let meta: DatasetMeta =
            serde_json::from_reader(BufReader::new(File::open(dir.join("dataset.json"))?))?;
        let read_rows = |name: &str| -> Result<(Vec<String>, Vec<Vec<f64>>), TrainingError> {
            let mut r = csv::Reader::from_path(dir.join(name))?;
            let header = r.headers()?.iter().map(str::to_string).collect();
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                let row = rec
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|e| TrainingError::Io(format!("{name}: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                rows.push(row);
            }
            Ok((header, rows))
        };
        let split = |name: &str| -> Result<Vec<(Vec<f64>, Vec<f64>)>, TrainingError> {
            let (header, rows) = read_rows(name)?;
            let nx = header.iter().filter(|h| h.starts_with('x')).count();
            Ok(rows
                .into_iter()
                .map(|mut r| {
                    let z = r.split_off(nx);
                    (r, z)
                })
                .collect())
        };
        let data_pairs = split("pairs.csv")?;
        let initial = split("initial.csv")?;
        let (_, collocation) = read_rows("collocation.csv")?;
        Ok(Self {
            data_pairs,
            collocation,
            initial,
            meta,
        })
    }
}

/// Seed of an independent sampling stream derived from the config seed.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Samples `p` initial conditions from `sampling` (with the configured share
/// from its boundary shell), initializes each by the backward integral and
/// co-simulates forward. A second, independent set of forward runs yields the
/// collocation points.
pub fn generate_dataset(
    system: &dyn System,
    design: &ObserverDesign,
    cfg: &TrainingConfig,
    sampling: &Region,
) -> Result<KklDataset, TrainingError> {
    cfg.validate()?;
    if sampling.dim() != system.state_dim() || design.output_dim() != system.output_dim() {
        return Err(TrainingError::Config(
            "sampling region, design and system dimensions disagree".into(),
        ));
    }
    let n_steps = steps_for(cfg.horizon, cfg.dt);
    let stride = cfg.record_stride();
    let x0s = sampling.sample(cfg.p, derived_seed(cfg.seed, 0), cfg.data_shell_fraction);
    let runs: Vec<Option<(Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>)>> = x0s
        .par_iter()
        .map(|x0| {
            let z0 = backward_init(system, design, x0, cfg.t_b, cfg.dt, cfg.guard).ok()?;
            let pairs =
                co_simulate(system, design, x0, &z0, cfg.dt, n_steps, stride, cfg.guard).ok()?;
            Some((z0, pairs))
        })
        .collect();
    let discarded = runs.iter().filter(|r| r.is_none()).count();
    if 2 * discarded > cfg.p {
        return Err(TrainingError::TooManyDiscards {
            discarded,
            attempted: cfg.p,
        });
    }
    let mut data_pairs = Vec::new();
    let mut initial = Vec::new();
    for (x0, run) in x0s.iter().zip(runs) {
        if let Some((z0, pairs)) = run {
            initial.push((x0.clone(), z0));
            data_pairs.extend(pairs);
        }
    }

    let nz = design.state_dim();
    let c0s = sampling.sample(
        cfg.collocation_runs,
        derived_seed(cfg.seed, 1),
        cfg.shell_fraction,
    );
    let colloc: Vec<Option<Vec<Vec<f64>>>> = c0s
        .par_iter()
        .map(|x0| {
            let run = co_simulate(
                system,
                design,
                x0,
                &vec![0.0; nz],
                cfg.dt,
                n_steps,
                stride,
                cfg.guard,
            )
            .ok()?;
            Some(run.into_iter().map(|(x, _)| x).collect())
        })
        .collect();
    let collocation_discarded = colloc.iter().filter(|r| r.is_none()).count();
    let collocation: Vec<Vec<f64>> = colloc.into_iter().flatten().flatten().collect();

    Ok(KklDataset {
        data_pairs,
        collocation,
        initial,
        meta: DatasetMeta {
            system: system.name().to_string(),
            seed: cfg.seed,
            dt: cfg.dt,
            t_b: cfg.t_b,
            horizon: cfg.horizon,
            sample_period: cfg.sample_period,
            attempted: cfg.p,
            discarded,
            collocation_attempted: cfg.collocation_runs,
            collocation_discarded,
            pairs_per_trajectory: n_steps / stride + 1,
        },
    })
}

/// Loss after initialization and after each epoch, on the full training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub stage: String,
    pub epochs: Vec<f64>,
    pub steps: usize,
}

impl LossHistory {
    pub fn initial(&self) -> f64 {
        self.epochs[0]
    }

    pub fn last(&self) -> f64 {
        *self.epochs.last().expect("history holds the initial loss")
    }

    /// CSV with header `epoch,loss`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss")?;
        for (e, l) in self.epochs.iter().enumerate() {
            writeln!(w, "{e},{}", fmt17(*l))?;
        }
        Ok(())
    }
}

/// Inputs of the PDE residual objective at a set of points.
struct Collocation {
    x: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    bh: Vec<Vec<f64>>,
}

impl Collocation {
    fn new(system: &dyn System, design: &ObserverDesign, points: &[Vec<f64>]) -> Self {
        Self {
            x: points.to_vec(),
            f: points.iter().map(|x| system.drift(x)).collect(),
            bh: points
                .iter()
                .map(|x| design.b.matvec(&system.output(x)))
                .collect(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            f: idx.iter().map(|&i| self.f[i].clone()).collect(),
            bh: idx.iter().map(|&i| self.bh[i].clone()).collect(),
        }
    }

    fn objective<'a>(&'a self, design: &'a ObserverDesign, penalty: Penalty) -> Objective<'a> {
        Objective::Residual {
            inputs: &self.x,
            directions: &self.f,
            offsets: &self.bh,
            linear: &design.a,
            penalty,
        }
    }
}

fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn gather(v: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Adam over mini-batches of a fit term, optionally paired with batches of a
/// residual term cycling through the collocation set.
#[allow(clippy::too_many_arguments)]
fn adam_fit(
    net: &mut Mlp,
    stage: &'static str,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    residual: Option<(&Collocation, &ObserverDesign, f64)>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LossHistory, TrainingError> {
    let full = |net: &Mlp| {
        let mut terms = vec![Weighted {
            objective: Objective::Fit { inputs, targets },
            weight: 1.0,
        }];
        if let Some((c, d, nu)) = residual {
            terms.push(Weighted {
                objective: c.objective(d, Penalty::Squared),
                weight: nu,
            });
        }
        loss_value(net, &terms)
    };
    let mut history = vec![full(net)];
    if !history[0].is_finite() {
        return Err(TrainingError::NonFinite {
            stage,
            epoch: 0,
            step: 0,
        });
    }
    let mut adam = AdamState::new(net.num_params(), learning_rate);
    let n = inputs.len();
    let steps_per_epoch = n.div_ceil(batch_size);
    let mut steps = 0;
    for epoch in 0..epochs {
        let order = permutation(n, seed, epoch);
        let pde_order = residual.map(|(c, _, _)| permutation(c.x.len(), seed ^ 0x5bd1_e995, epoch));
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch_size..((step + 1) * batch_size).min(n)];
            let bx = gather(inputs, idx);
            let bz = gather(targets, idx);
            let mut terms = vec![Weighted {
                objective: Objective::Fit {
                    inputs: &bx,
                    targets: &bz,
                },
                weight: 1.0,
            }];
            let pde_batch = residual.zip(pde_order.as_ref()).map(|((c, _, _), ord)| {
                let m = ord.len();
                let start = (step * batch_size) % m;
                let take: Vec<usize> = (0..batch_size.min(m))
                    .map(|k| ord[(start + k) % m])
                    .collect();
                c.subset(&take)
            });
            if let (Some(b), Some((_, d, nu))) = (&pde_batch, residual) {
                terms.push(Weighted {
                    objective: b.objective(d, Penalty::Squared),
                    weight: nu,
                });
            }
            let (value, grad) = loss_gradient(net, &terms);
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainingError::NonFinite { stage, epoch, step });
            }
            adam.step_net(net, &grad);
            steps += 1;
        }
        let l = full(net);
        if !l.is_finite() {
            return Err(TrainingError::NonFinite {
                stage,
                epoch,
                step: steps_per_epoch,
            });
        }
        history.push(l);
    }
    Ok(LossHistory {
        stage: stage.to_string(),
        epochs: history,
        steps,
    })
}

/// Adam on `mean ‖z - T̂(x)‖² + ν mean ‖R(x)‖²` over the dataset.
pub fn train_forward(
    net: &mut Mlp,
    system: &dyn System,
    design: &ObserverDesign,
    dataset: &KklDataset,
    cfg: &TrainingConfig,
) -> Result<LossHistory, TrainingError> {
    cfg.validate()?;
    if dataset.data_pairs.is_empty() {
        return Err(TrainingError::Config("empty dataset".into()));
    }
    if cfg.nu > 0.0 && dataset.collocation.is_empty() {
        return Err(TrainingError::Config(
            "nu > 0 needs collocation points".into(),
        ));
    }
    let colloc = Collocation::new(system, design, &dataset.collocation);
    adam_fit(
        net,
        "forward",
        &dataset.inputs(),
        &dataset.targets(),
        (cfg.nu > 0.0).then_some((&colloc, design, cfg.nu)),
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        derived_seed(cfg.seed, 2),
    )
}

/// Statistics of one mining round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRound {
    pub pool_max: f64,
    /// Mean residual norm of the mined set before and after optimization.
    pub mined_mean: f64,
    pub mined_mean_after: f64,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub rounds: Vec<MiningRound>,
    /// Mean residual of the set a further round would mine.
    pub final_mined_mean: f64,
}

impl FinetuneReport {
    /// Rounds whose mined mean did not exceed the previous round's (the last
    /// compares against `final_mined_mean`).
    pub fn non_increasing_rounds(&self) -> usize {
        let mut seq: Vec<f64> = self.rounds.iter().map(|r| r.mined_mean).collect();
        seq.push(self.final_mined_mean);
        seq.windows(2).filter(|w| w[1] <= w[0]).count()
    }
}

fn residual_norms(
    net: &Mlp,
    c: &Collocation,
    design: &ObserverDesign,
) -> Result<Vec<f64>, NetError> {
    (0..c.x.len())
        .into_par_iter()
        .map(|i| {
            let t = net.forward_tangent(&c.x[i], &c.f[i])?;
            let at = design.a.matvec(&t.output);
            Ok((0..at.len())
                .map(|k| (t.output_tangent[k] - at[k] - c.bh[i][k]).powi(2))
                .sum::<f64>()
                .sqrt())
        })
        .collect()
}

/// Indices of the largest `keep` values, ties broken by index.
fn top_indices(values: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

fn mine(
    net: &Mlp,
    system: &dyn System,
    design: &ObserverDesign,
    region: &Region,
    cfg: &TrainingConfig,
    round: usize,
) -> Result<(Collocation, f64, f64), TrainingError> {
    let pool = region.sample(
        cfg.pool_size,
        derived_seed(cfg.seed, 100 + round as u64),
        cfg.shell_fraction,
    );
    let c = Collocation::new(system, design, &pool);
    let norms = residual_norms(net, &c, design)?;
    let keep = ((cfg.pool_size as f64 * cfg.keep_fraction).ceil() as usize).clamp(1, cfg.pool_size);
    let top = top_indices(&norms, keep);
    let mean = top.iter().map(|&i| norms[i]).sum::<f64>() / keep as f64;
    let max = top.first().map_or(0.0, |&i| norms[i]);
    if !mean.is_finite() {
        return Err(TrainingError::NonFinite {
            stage: "finetune",
            epoch: round,
            step: 0,
        });
    }
    Ok((c.subset(&top), mean, max))
}

/// Rounds of hard-point mining: sample a pool in the region, keep the points
/// with the largest residual norm and minimize their mean `‖R(x)‖` with
/// L-BFGS. A line-search failure ends a round with the last accepted iterate.
pub fn finetune_forward(
    net: &mut Mlp,
    system: &dyn System,
    design: &ObserverDesign,
    region: &Region,
    cfg: &TrainingConfig,
) -> Result<FinetuneReport, TrainingError> {
    cfg.validate()?;
    let mut rounds = Vec::with_capacity(cfg.finetune_rounds);
    let mut hard = Collocation {
        x: Vec::new(),
        f: Vec::new(),
        bh: Vec::new(),
    };
    for round in 0..cfg.finetune_rounds {
        let (mined, mean, max) = mine(net, system, design, region, cfg, round)?;
        if cfg.mining_accumulate {
            hard.x.extend(mined.x);
            hard.f.extend(mined.f);
            hard.bh.extend(mined.bh);
        } else {
            hard = mined;
        }
        let objective = [Weighted {
            objective: hard.objective(design, Penalty::Norm),
            weight: 1.0,
        }];
        let mut lbfgs = LbfgsState::new();
        let out = lbfgs.minimize_net(net, |n| loss_gradient(n, &objective), cfg.finetune_iters);
        if !out.value.is_finite() {
            return Err(TrainingError::NonFinite {
                stage: "finetune",
                epoch: round,
                step: out.iterations,
            });
        }
        rounds.push(MiningRound {
            pool_max: max,
            mined_mean: mean,
            mined_mean_after: out.value,
            iterations: out.iterations,
            termination: out.termination,
        });
    }
    let (_, final_mined_mean, _) = mine(net, system, design, region, cfg, cfg.finetune_rounds)?;
    Ok(FinetuneReport {
        rounds,
        final_mined_mean,
    })
}

/// Points `x'` for the inverse set: region samples, plus the dataset's
/// trajectory states when configured.
pub fn inverse_points(
    region: &Region,
    dataset: Option<&KklDataset>,
    cfg: &TrainingConfig,
) -> Vec<Vec<f64>> {
    let mut pts = region.sample(
        cfg.inverse_samples,
        derived_seed(cfg.seed, 3),
        cfg.shell_fraction,
    );
    if cfg.inverse_reuse_trajectories {
        if let Some(d) = dataset {
            pts.extend(d.inputs());
        }
    }
    pts
}

/// Adam on `mean ‖x' - T̂*(T̂(x'))‖²` with `T̂` frozen. Points are put in a
/// canonical order first, so the result does not depend on their input order.
pub fn train_inverse(
    inverse: &mut Mlp,
    forward: &Mlp,
    points: &[Vec<f64>],
    cfg: &TrainingConfig,
) -> Result<LossHistory, TrainingError> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(TrainingError::Config(
            "no points for inverse training".into(),
        ));
    }
    let mut xs = points.to_vec();
    xs.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let zs = xs
        .par_iter()
        .map(|x| forward.forward(x))
        .collect::<Result<Vec<_>, _>>()?;
    adam_fit(
        inverse,
        "inverse",
        &zs,
        &xs,
        None,
        cfg.inverse_epochs,
        cfg.inverse_learning_rate,
        cfg.batch_size,
        derived_seed(cfg.seed, 4),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearSystem, ReverseDuffing};
    use crate::interval::{AxisBox, Interval};
    use crate::kkl::LearnedObserver;
    use crate::linalg::DenseMatrix;

    /// `ẋ = 0`, `y ≡ 1`.
    struct ConstantOutput;

    impl System for ConstantOutput {
        fn name(&self) -> &str {
            "constant"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn drift(&self, _x: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn output(&self, _x: &[f64]) -> Vec<f64> {
            vec![1.0]
        }
        fn drift_interval(&self, _b: &[Interval]) -> Vec<Interval> {
            vec![Interval::point(0.0)]
        }
        fn output_interval(&self, _b: &[Interval]) -> Vec<Interval> {
            vec![Interval::point(1.0)]
        }
        fn drift_jacobian_interval(&self, _b: &[Interval]) -> Vec<Vec<Interval>> {
            vec![vec![Interval::point(0.0)]]
        }
        fn output_jacobian_interval(&self, _b: &[Interval]) -> Vec<Vec<Interval>> {
            vec![vec![Interval::point(0.0)]]
        }
    }

    fn duffing_design() -> ObserverDesign {
        ObserverDesign::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0], DenseMatrix::column(&[1.0; 5]))
            .unwrap()
    }

    fn small_cfg() -> TrainingConfig {
        TrainingConfig {
            p: 6,
            horizon: 2.0,
            t_b: 5.0,
            collocation_runs: 4,
            hidden_layers: 1,
            layer_width: 8,
            epochs: 3,
            pool_size: 64,
            finetune_rounds: 2,
            finetune_iters: 5,
            inverse_samples: 100,
            inverse_epochs: 2,
            seed: 7,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn backward_init_equilibrium_and_closed_form() {
        let z = backward_init(
            &ReverseDuffing,
            &duffing_design(),
            &[0.0, 0.0],
            20.0,
            1e-3,
            DEFAULT_GUARD,
        )
        .unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let d = ObserverDesign::diagonal(&[1.0], DenseMatrix::column(&[1.0])).unwrap();
        let z = backward_init(&ConstantOutput, &d, &[0.0], 20.0, 1e-3, DEFAULT_GUARD).unwrap();
        assert!((z[0] - (1.0 - (-20f64).exp())).abs() <= 1e-6, "{}", z[0]);
    }

    #[test]
    fn backward_init_is_second_order() {
        let d = duffing_design();
        let z = |dt: f64| {
            backward_init(&ReverseDuffing, &d, &[0.8, -0.5], 4.0, dt, DEFAULT_GUARD).unwrap()
        };
        let (a, b, c) = (z(0.02), z(0.01), z(0.005));
        let diff = |p: &[f64], q: &[f64]| {
            p.iter()
                .zip(q)
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max)
        };
        let ratio = diff(&a, &b) / diff(&b, &c);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn equilibrium_dataset_is_zero() {
        let cfg = TrainingConfig {
            p: 1,
            collocation_runs: 1,
            ..small_cfg()
        };
        let region = Region::new(vec![AxisBox::point(&[0.0, 0.0])], "origin").unwrap();
        let ds = generate_dataset(&ReverseDuffing, &duffing_design(), &cfg, &region).unwrap();
        assert_eq!(ds.data_pairs.len(), 21);
        assert!(ds
            .data_pairs
            .iter()
            .all(|(x, z)| x.iter().chain(z).all(|v| *v == 0.0)));
    }

    #[test]
    fn dataset_pairs_are_consistent() {
        let cfg = small_cfg();
        let region = Region::new(vec![AxisBox::symmetric(2, 1.0)], "box").unwrap();
        let d = duffing_design();
        let ds = generate_dataset(&ReverseDuffing, &d, &cfg, &region).unwrap();
        assert_eq!(ds.meta.discarded, 0);
        assert_eq!(ds.data_pairs.len(), cfg.p * ds.meta.pairs_per_trajectory);
        assert_eq!(ds.meta.pairs_per_trajectory, 21);
        let per = ds.meta.pairs_per_trajectory;
        for (i, (x0, z0)) in ds.initial.iter().enumerate() {
            for k in [0, 7, per - 1] {
                let steps = k * cfg.record_stride();
                let again = co_simulate(
                    &ReverseDuffing,
                    &d,
                    x0,
                    z0,
                    cfg.dt,
                    steps,
                    steps.max(1),
                    DEFAULT_GUARD,
                )
                .unwrap();
                let (x, z) = again.last().unwrap();
                let (px, pz) = &ds.data_pairs[i * per + k];
                for (a, b) in x.iter().chain(z).zip(px.iter().chain(pz)) {
                    assert!((a - b).abs() <= 1e-8);
                }
            }
        }
        let again = generate_dataset(&ReverseDuffing, &d, &cfg, &region).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let cfg = small_cfg();
        let region = Region::new(vec![AxisBox::symmetric(2, 1.0)], "box").unwrap();
        let ds = generate_dataset(&ReverseDuffing, &duffing_design(), &cfg, &region).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        assert_eq!(KklDataset::read_dir(dir.path()).unwrap(), ds);
    }

    #[test]
    fn realizable_linear_regression() {
        let m =
            DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.25]]).unwrap();
        let xs = crate::interval::sample_box(&AxisBox::symmetric(2, 1.0), 64, 3);
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| m.matvec(x)).collect();
        let mut net = Mlp::xavier(&[2, 3], 1);
        let h = adam_fit(&mut net, "forward", &xs, &zs, None, 2000, 0.01, 64, 0).unwrap();
        assert!(h.last() <= 1e-8, "{}", h.last());
        assert!(h.last() <= h.initial());
    }

    #[test]
    fn physics_weight_needs_collocation() {
        let cfg = small_cfg();
        let region = Region::new(vec![AxisBox::symmetric(2, 1.0)], "box").unwrap();
        let d = duffing_design();
        let mut ds = generate_dataset(&ReverseDuffing, &d, &cfg, &region).unwrap();
        ds.collocation.clear();
        let mut net = Mlp::xavier(&cfg.forward_dims(2, 5), 0);
        assert!(matches!(
            train_forward(&mut net, &ReverseDuffing, &d, &ds, &cfg),
            Err(TrainingError::Config(_))
        ));
        let h = train_forward(
            &mut net,
            &ReverseDuffing,
            &d,
            &ds,
            &TrainingConfig { nu: 0.0, ..cfg },
        )
        .unwrap();
        assert!(h.last() <= h.initial());
    }

    #[test]
    fn forward_training_is_deterministic() {
        let cfg = small_cfg();
        let region = Region::new(vec![AxisBox::symmetric(2, 1.0)], "box").unwrap();
        let d = duffing_design();
        let ds = generate_dataset(&ReverseDuffing, &d, &cfg, &region).unwrap();
        let run = || {
            let mut net = Mlp::xavier(&cfg.forward_dims(2, 5), 0);
            let h = train_forward(&mut net, &ReverseDuffing, &d, &ds, &cfg).unwrap();
            (net, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.last() <= ha.initial());
    }

    #[test]
    fn exact_observer_is_not_changed_by_finetuning() {
        let f = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -0.5]]).unwrap();
        let h = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let design =
            ObserverDesign::diagonal(&[1.0, 2.0, 3.0], DenseMatrix::column(&[1.0; 3])).unwrap();
        let sys = LinearSystem {
            f: f.clone(),
            h: h.clone(),
        };
        let obs = LearnedObserver::exact_linear(design.clone(), &f, &h).unwrap();
        let mut net = obs.forward_net.clone();
        let region = Region::new(vec![AxisBox::symmetric(2, 1.0)], "box").unwrap();
        let r = finetune_forward(&mut net, &sys, &design, &region, &small_cfg()).unwrap();
        assert!(r.rounds.iter().all(|m| m.mined_mean < 1e-12));
        let before = obs.forward_net.params();
        let after = net.params();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn full_keep_fraction_is_plain_lbfgs() {
        let cfg = TrainingConfig {
            keep_fraction: 1.0,
            finetune_rounds: 1,
            ..small_cfg()
        };
        let d = duffing_design();
        let region = Region::new(vec![AxisBox::symmetric(2, 1.0)], "box").unwrap();
        let start = Mlp::xavier(&cfg.forward_dims(2, 5), 4);
        let mut tuned = start.clone();
        finetune_forward(&mut tuned, &ReverseDuffing, &d, &region, &cfg).unwrap();

        let pool = region.sample(
            cfg.pool_size,
            derived_seed(cfg.seed, 100),
            cfg.shell_fraction,
        );
        let c = Collocation::new(&ReverseDuffing, &d, &pool);
        let norms = residual_norms(&start, &c, &d).unwrap();
        let c = c.subset(&top_indices(&norms, pool.len()));
        let obj = [Weighted {
            objective: c.objective(&d, Penalty::Norm),
            weight: 1.0,
        }];
        let mut plain = start.clone();
        LbfgsState::new().minimize_net(&mut plain, |n| loss_gradient(n, &obj), cfg.finetune_iters);
        assert_eq!(plain, tuned);
    }

    #[test]
    fn inverse_training() {
        let cfg = TrainingConfig {
            inverse_epochs: 2000,
            inverse_learning_rate: 0.01,
            ..small_cfg()
        };
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![-1.0, 1.0], vec![0.5, 0.0]]).unwrap();
        let fwd = Mlp::linear(m, vec![0.1, 0.0, -0.2]).unwrap();
        let pts = crate::interval::sample_box(&AxisBox::symmetric(2, 1.0), 128, 5);
        let mut inv = Mlp::xavier(&[3, 2], 2);
        let h = train_inverse(&mut inv, &fwd, &pts, &cfg).unwrap();
        assert!(h.last() <= 1e-8, "{}", h.last());

        // Zero output layer: the initial loss is the mean squared norm.
        let mut zero = Mlp::xavier(&[3, 4, 2], 3);
        let mut theta = zero.params();
        let n_out = 4 * 2 + 2;
        let len = theta.len();
        theta[len - n_out..].iter_mut().for_each(|v| *v = 0.0);
        zero.set_params(&theta);
        let h = train_inverse(
            &mut zero,
            &fwd,
            &pts,
            &TrainingConfig {
                inverse_epochs: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        let direct = pts
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / pts.len() as f64;
        assert!((h.initial() - direct).abs() < 1e-14);

        let mut shuffled = pts.clone();
        shuffled.reverse();
        let mut a = Mlp::xavier(&[3, 4, 2], 9);
        let mut b = a.clone();
        let short = TrainingConfig {
            inverse_epochs: 3,
            ..cfg
        };
        let ha = train_inverse(&mut a, &fwd, &pts, &short).unwrap();
        let hb = train_inverse(&mut b, &fwd, &shuffled, &short).unwrap();
        assert_eq!(ha.last(), hb.last());
    }
}
