//! Run configuration and the file-based stages of the learning and
//! verification pipeline.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certificate::{Certificate, CertificateError, CertifiedQuantities};
use crate::certify::{
    build_region, certify_all, CertificationReport, CertifyConfig, Region, RegionError, RegionSpec,
};
use crate::dynamics::{
    steps_for, LinearSystem, ReverseDuffing, Rk4, System, VanDerPol, DEFAULT_GUARD,
};
use crate::interval::{sample_box, AxisBox};
use crate::kkl::{
    empirical_error_envelope, simulate_observer, EnvelopeReport, KklError, LearnedObserver,
    NoiseSpec, SimConfig,
};
use crate::linalg::{DenseMatrix, GammaChoice, LinalgError, ObserverDesign};
use crate::net::{Mlp, MlpFile, NetError};
use crate::training::{
    finetune_forward, generate_dataset, inverse_points, train_forward, train_inverse, DatasetMeta,
    FinetuneReport, KklDataset, LossHistory, TrainingConfig, TrainingError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("validation failure: {0}")]
    Validation(String),
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 numerical, 4 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numerical(_) => 3,
            PipelineError::Validation(_) => 4,
        }
    }
}

impl From<TrainingError> for PipelineError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Config(_) | TrainingError::Io(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<KklError> for PipelineError {
    fn from(e: KklError) -> Self {
        match e {
            KklError::Shape(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<LinalgError> for PipelineError {
    fn from(e: LinalgError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<RegionError> for PipelineError {
    fn from(e: RegionError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<NetError> for PipelineError {
    fn from(e: NetError) -> Self {
        PipelineError::Config(format!("model file: {e}"))
    }
}

impl From<CertificateError> for PipelineError {
    fn from(e: CertificateError) -> Self {
        match e {
            CertificateError::Linalg(_) => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    ReverseDuffing,
    VanDerPol {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    Linear {
        f: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
    },
}

fn default_mu() -> f64 {
    1.0
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::ReverseDuffing
    }
}

impl SystemSpec {
    pub fn build(&self) -> Result<Box<dyn System>, PipelineError> {
        Ok(match self {
            SystemSpec::ReverseDuffing => Box::new(ReverseDuffing),
            SystemSpec::VanDerPol { mu } => {
                if !mu.is_finite() {
                    return Err(PipelineError::Config("mu must be finite".into()));
                }
                Box::new(VanDerPol { mu: *mu })
            }
            SystemSpec::Linear { f, h } => {
                let f = DenseMatrix::from_rows(f)?;
                let h = DenseMatrix::from_rows(h)?;
                if !f.is_square() || h.cols() != f.rows() {
                    return Err(PipelineError::Config(
                        "linear system needs square F and H with n_x columns".into(),
                    ));
                }
                Box::new(LinearSystem { f, h })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverSpec {
    /// Decay rates: `A = -diag(rates)`.
    pub rates: Vec<f64>,
    /// Rows of `B` (`n_z × n_y`); all ones when omitted.
    pub b: Option<Vec<Vec<f64>>>,
    pub gamma: GammaChoice,
}

impl Default for ObserverSpec {
    fn default() -> Self {
        Self {
            rates: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            b: None,
            gamma: GammaChoice::Optimized,
        }
    }
}

impl ObserverSpec {
    pub fn design(&self, output_dim: usize) -> Result<ObserverDesign, PipelineError> {
        let nz = self.rates.len();
        let b = match &self.b {
            Some(rows) => DenseMatrix::from_rows(rows)?,
            None => DenseMatrix::from_rows(&vec![vec![1.0; output_dim]; nz])?,
        };
        if b.rows() != nz || b.cols() != output_dim {
            return Err(PipelineError::Config(format!(
                "B must be {nz} x {output_dim}, got {} x {}",
                b.rows(),
                b.cols()
            )));
        }
        let a = DenseMatrix::diag(&self.rates.iter().map(|r| -r).collect::<Vec<_>>());
        Ok(ObserverDesign::with_q(
            a.clone(),
            b,
            a.scale(-2.0),
            self.gamma,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Box of initial conditions; the certification region (with boundary
    /// over-sampling) when omitted.
    pub initial: Option<AxisBox>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Absolute bound `v̄`.
    pub bound: f64,
    /// Added to `bound`: this fraction of the peak output norm over the
    /// nominal validation trajectories.
    pub relative_to_peak_output: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub dt: f64,
    pub horizon: f64,
    pub stride: usize,
    pub guard: f64,
    pub trajectories: usize,
    /// Transient cut-off; `5 / λ_min(A)` when omitted.
    pub t_c: Option<f64>,
    /// Initial plant states; falls back to the data box, then the region.
    pub initial: Option<AxisBox>,
    pub seed: u64,
    /// How many trajectories get their own error CSV.
    pub csv_trajectories: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 20.0,
            stride: 10,
            guard: DEFAULT_GUARD,
            trajectories: 50,
            t_c: None,
            initial: None,
            seed: 0,
            csv_trajectories: 5,
        }
    }
}

impl SimulationSpec {
    pub fn sim_config(&self, track_ez: bool) -> SimConfig {
        SimConfig {
            dt: self.dt,
            horizon: self.horizon,
            stride: self.stride,
            guard: self.guard,
            track_ez,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub observer: ObserverSpec,
    pub data: DataSpec,
    pub training: TrainingConfig,
    pub region: RegionSpec,
    pub certify: CertifyConfig,
    pub noise: NoiseConfig,
    pub simulation: SimulationSpec,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::ReverseDuffing,
            observer: ObserverSpec::default(),
            data: DataSpec {
                initial: Some(AxisBox::symmetric(2, 3.0)),
            },
            training: TrainingConfig::default(),
            region: RegionSpec::EnergyBox {
                initial: AxisBox::symmetric(2, 3.0),
            },
            certify: CertifyConfig::default(),
            noise: NoiseConfig::default(),
            simulation: SimulationSpec::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.training.validate()?;
        self.certify.bab.validate().map_err(PipelineError::Config)?;
        self.certify
            .lipschitz_bab
            .validate()
            .map_err(PipelineError::Config)?;
        let system = self.system.build()?;
        let design = self.observer.design(system.output_dim())?;
        if self.certify.image_grid == 0 {
            return Err(PipelineError::Config(
                "image_grid must be at least 1".into(),
            ));
        }
        if !(self.noise.bound >= 0.0 && self.noise.relative_to_peak_output >= 0.0) {
            return Err(PipelineError::Config(
                "noise bounds must be non-negative".into(),
            ));
        }
        let s = &self.simulation;
        if !(s.dt > 0.0 && s.horizon > 0.0 && s.trajectories > 0) {
            return Err(PipelineError::Config(
                "simulation needs dt > 0, horizon > 0, trajectories > 0".into(),
            ));
        }
        for b in [&self.data.initial, &s.initial].into_iter().flatten() {
            if b.dim() != system.state_dim() {
                return Err(PipelineError::Config(
                    "initial box dimension differs from the system's".into(),
                ));
            }
        }
        let _ = design;
        Ok(())
    }

    /// Use one seed for every random stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self.certify.bab.seed = seed;
        self.certify.lipschitz_bab.seed = seed;
        self.noise.seed = seed;
        self.simulation.seed = seed;
        self
    }

    /// SHA-256 over the canonical JSON of everything that affects results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("run configs serialize");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths::new(&self.out_dir)
    }
}

/// Files written by the pipeline under the output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn forward_pretrained(&self) -> PathBuf {
        self.root.join("forward_pretrained.json")
    }
    pub fn forward(&self) -> PathBuf {
        self.root.join("forward.json")
    }
    pub fn inverse(&self) -> PathBuf {
        self.root.join("inverse.json")
    }
    pub fn certification(&self) -> PathBuf {
        self.root.join("certification.json")
    }
    pub fn certificate(&self) -> PathBuf {
        self.root.join("certificate.json")
    }
    pub fn simulation(&self) -> PathBuf {
        self.root.join("simulation.json")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    writeln!(w).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| io_err(path, e))
}

fn write_text(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

pub fn load_net(path: &Path) -> Result<Mlp, PipelineError> {
    let file: MlpFile = read_json(path)?;
    Ok(file.into_mlp()?)
}

fn save_net(path: &Path, net: &Mlp, cfg: &RunConfig) -> Result<(), PipelineError> {
    write_json(path, &net.to_file(cfg.training.seed, &cfg.digest()))
}

/// System, design and certification region of a run.
pub struct Setup {
    pub system: Box<dyn System>,
    pub design: ObserverDesign,
    pub region: Region,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup, PipelineError> {
    cfg.validate()?;
    let system = cfg.system.build()?;
    let design = cfg.observer.design(system.output_dim())?;
    let region = build_region(system.as_ref(), &cfg.region)?;
    Ok(Setup {
        system,
        design,
        region,
    })
}

fn sampling_region(cfg: &RunConfig, setup: &Setup) -> Result<Region, PipelineError> {
    Ok(match &cfg.data.initial {
        Some(b) => Region::new(vec![b.clone()], "initial box")?,
        None => setup.region.clone(),
    })
}

/// Generate and write the training dataset.
pub fn gen_data(cfg: &RunConfig) -> Result<DatasetMeta, PipelineError> {
    let s = setup(cfg)?;
    let sampling = sampling_region(cfg, &s)?;
    let ds = generate_dataset(s.system.as_ref(), &s.design, &cfg.training, &sampling)?;
    ds.write_dir(&cfg.paths().dataset())?;
    Ok(ds.meta)
}

fn load_dataset(cfg: &RunConfig) -> Result<KklDataset, PipelineError> {
    let dir = cfg.paths().dataset();
    if !dir.join("dataset.json").exists() {
        return Err(PipelineError::Config(format!(
            "missing dataset in {}; run gen-data first",
            dir.display()
        )));
    }
    Ok(KklDataset::read_dir(&dir)?)
}

fn write_history(path: &Path, h: &LossHistory) -> Result<(), PipelineError> {
    write_text(path, |w| h.write_csv(w))
}

/// Physics-informed training of the forward net from a Xavier start.
pub fn train(cfg: &RunConfig) -> Result<LossHistory, PipelineError> {
    let s = setup(cfg)?;
    let ds = load_dataset(cfg)?;
    let dims = cfg
        .training
        .forward_dims(s.system.state_dim(), s.design.state_dim());
    let mut net = Mlp::xavier(&dims, cfg.training.seed);
    let h = train_forward(&mut net, s.system.as_ref(), &s.design, &ds, &cfg.training)?;
    let paths = cfg.paths();
    save_net(&paths.forward_pretrained(), &net, cfg)?;
    write_history(&paths.file("loss_forward.csv"), &h)?;
    Ok(h)
}

/// Hard-point fine-tuning of the pretrained forward net.
pub fn finetune(cfg: &RunConfig) -> Result<FinetuneReport, PipelineError> {
    let s = setup(cfg)?;
    let paths = cfg.paths();
    let mut net = load_net(&paths.forward_pretrained())?;
    let r = finetune_forward(
        &mut net,
        s.system.as_ref(),
        &s.design,
        &s.region,
        &cfg.training,
    )?;
    save_net(&paths.forward(), &net, cfg)?;
    write_json(&paths.file("finetune.json"), &r)?;
    write_text(&paths.file("finetune.csv"), |w| {
        writeln!(w, "round,pool_max,mined_mean,mined_mean_after,iterations")?;
        for (i, m) in r.rounds.iter().enumerate() {
            writeln!(
                w,
                "{i},{:e},{:e},{:e},{}",
                m.pool_max, m.mined_mean, m.mined_mean_after, m.iterations
            )?;
        }
        Ok(())
    })?;
    Ok(r)
}

/// Inverse training against the fine-tuned forward net.
pub fn train_inverse_stage(cfg: &RunConfig) -> Result<LossHistory, PipelineError> {
    let s = setup(cfg)?;
    let paths = cfg.paths();
    let forward = load_net(&paths.forward())?;
    let ds = if cfg.training.inverse_reuse_trajectories {
        Some(load_dataset(cfg)?)
    } else {
        None
    };
    let pts = inverse_points(&s.region, ds.as_ref(), &cfg.training);
    let dims = cfg
        .training
        .inverse_dims(s.system.state_dim(), s.design.state_dim());
    let mut inv = Mlp::xavier(&dims, cfg.training.seed.wrapping_add(1));
    let h = train_inverse(&mut inv, &forward, &pts, &cfg.training)?;
    save_net(&paths.inverse(), &inv, cfg)?;
    write_history(&paths.file("loss_inverse.csv"), &h)?;
    Ok(h)
}

pub fn load_observer(cfg: &RunConfig, setup: &Setup) -> Result<LearnedObserver, PipelineError> {
    let paths = cfg.paths();
    Ok(LearnedObserver::new(
        setup.design.clone(),
        load_net(&paths.forward())?,
        load_net(&paths.inverse())?,
    )?)
}

/// Initial plant states of the validation trajectories.
pub fn simulation_initial_states(cfg: &RunConfig, setup: &Setup) -> Vec<Vec<f64>> {
    let n = cfg.simulation.trajectories;
    match cfg
        .simulation
        .initial
        .as_ref()
        .or(cfg.data.initial.as_ref())
    {
        Some(b) => sample_box(b, n, cfg.simulation.seed),
        None => setup.region.sample(n, cfg.simulation.seed, 0.0),
    }
}

/// Largest `‖h(x(t))‖` over the nominal validation trajectories.
pub fn peak_output(cfg: &RunConfig, setup: &Setup) -> Result<f64, PipelineError> {
    let sim = &cfg.simulation;
    let rk = Rk4::new(sim.dt).with_guard(sim.guard);
    let n = steps_for(sim.horizon, sim.dt);
    let mut peak: f64 = 0.0;
    for x0 in simulation_initial_states(cfg, setup) {
        let traj = rk
            .forward(setup.system.as_ref(), &x0, n)
            .map_err(|e| PipelineError::Numerical(e.to_string()))?;
        for x in &traj.states {
            let y = setup.system.output(x);
            peak = peak.max(y.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(peak)
}

/// `v̄ = bound + relative · peak output`.
pub fn resolve_noise_bound(cfg: &RunConfig, setup: &Setup) -> Result<f64, PipelineError> {
    let rel = cfg.noise.relative_to_peak_output;
    let extra = if rel > 0.0 {
        rel * peak_output(cfg, setup)?
    } else {
        0.0
    };
    Ok(cfg.noise.bound + extra)
}

/// Certify the three quantities over the region and write the report.
pub fn certify(cfg: &RunConfig) -> Result<CertificationReport, PipelineError> {
    let s = setup(cfg)?;
    let obs = load_observer(cfg, &s)?;
    let v = resolve_noise_bound(cfg, &s)?;
    let report = certify_all(
        &obs,
        s.system.as_ref(),
        &s.region,
        &cfg.certify,
        v,
        &cfg.digest(),
    )?;
    write_json(&cfg.paths().certification(), &report)?;
    Ok(report)
}

/// Certified `R̄` of an arbitrary forward net over the run's region.
pub fn certify_residual_of(cfg: &RunConfig, forward: &Mlp) -> Result<f64, PipelineError> {
    let s = setup(cfg)?;
    let nx = s.system.state_dim();
    let placeholder = Mlp::zeros(&[s.design.state_dim(), nx]);
    let obs = LearnedObserver::new(s.design.clone(), forward.clone(), placeholder)?;
    Ok(crate::certify::certify_residual_sup(
        &obs,
        s.system.as_ref(),
        &s.region,
        &cfg.certify.bab,
        &cfg.digest(),
    )
    .upper)
}

/// Assemble the certificate from the certification report or from explicit
/// `(R̄, L, E[, v̄])` overrides, and write it as JSON and text.
pub fn certificate(
    cfg: &RunConfig,
    overrides: Option<&[f64]>,
) -> Result<Certificate, PipelineError> {
    cfg.validate()?;
    let system = cfg.system.build()?;
    let design = cfg.observer.design(system.output_dim())?;
    let quantities = match overrides {
        Some(q) => {
            if !(3..=4).contains(&q.len()) {
                return Err(PipelineError::Config("quantities must be R,L,E[,v]".into()));
            }
            let mut c = CertifiedQuantities::new(q[0], q[1], q[2])
                .with_noise(q.get(3).copied().unwrap_or(0.0));
            c.provenance.push("explicit override".into());
            c
        }
        None => {
            let path = cfg.paths().certification();
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "missing {}; run certify or pass explicit quantities",
                    path.display()
                )));
            }
            let rep: CertificationReport = read_json(&path)?;
            let s = setup(cfg)?;
            let v = resolve_noise_bound(cfg, &s)?;
            let mut c = CertifiedQuantities::new(
                rep.residual.upper,
                rep.lipschitz.upper,
                rep.reconstruction.upper,
            )
            .with_noise(v);
            c.provenance.push(format!(
                "certification report, config digest {}",
                rep.residual.config_digest
            ));
            c
        }
    };
    let mut cert = Certificate::new(&design, quantities)?;
    cert.notes
        .push("observer initial condition z_hat(0) = 0".into());
    let paths = cfg.paths();
    write_json(&paths.certificate(), &cert)?;
    write_text(&paths.file("certificate.txt"), |w| write!(w, "{cert}"))?;
    Ok(cert)
}

/// Empirical envelope of one validation run against its certified bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub label: String,
    pub bound: f64,
    pub report: EnvelopeReport,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub t_c: f64,
    pub trajectories: usize,
    pub noise_bound: f64,
    pub runs: Vec<EnvelopeCheck>,
    pub pass: bool,
}

/// Simulate the observer from the validation states, noiseless and (when
/// `v̄ > 0`) noisy, and compare each envelope with the certified bound.
pub fn simulate(cfg: &RunConfig) -> Result<SimulationSummary, PipelineError> {
    let s = setup(cfg)?;
    let obs = load_observer(cfg, &s)?;
    let cert: Certificate = read_json(&cfg.paths().certificate())
        .map_err(|e| PipelineError::Config(format!("{e}; run certificate first")))?;
    let v = resolve_noise_bound(cfg, &s)?;
    let t_c = cfg.simulation.t_c.unwrap_or(5.0 / s.design.lambda_min());
    let states = simulation_initial_states(cfg, &s);
    let sim_cfg = cfg.simulation.sim_config(false);
    let mut runs = Vec::new();
    let noise = NoiseSpec {
        bound: v,
        seed: cfg.noise.seed,
    };
    let mut variants = vec![("noiseless", None, cert.x_ultimate)];
    if v > 0.0 {
        let bound = match cert.x_ultimate_noisy {
            Some(n) if cert.quantities.noise_bound >= v => n.bound,
            _ => {
                return Err(PipelineError::Config(format!(
                    "certificate covers noise up to {}, simulation uses {v}; rerun certificate",
                    cert.quantities.noise_bound
                )))
            }
        };
        variants.push(("noisy", Some(&noise), bound));
    }
    let paths = cfg.paths();
    for (label, n, bound) in variants {
        let report = empirical_error_envelope(&obs, s.system.as_ref(), &states, &sim_cfg, t_c, n)?;
        let pass = report.diverged == 0 && report.envelope <= bound;
        for (i, x0) in states
            .iter()
            .take(cfg.simulation.csv_trajectories)
            .enumerate()
        {
            let sim = simulate_observer(
                &obs,
                s.system.as_ref(),
                x0,
                &cfg.simulation.sim_config(true),
                n,
                i as u64,
            )?;
            let dir = paths.trajectories();
            write_text(&dir.join(format!("{label}_{i:03}_error.csv")), |w| {
                sim.write_error_csv(w)
            })?;
            write_text(&dir.join(format!("{label}_{i:03}_state.csv")), |w| {
                sim.x.write_csv(w)
            })?;
            write_text(&dir.join(format!("{label}_{i:03}_estimate.csv")), |w| {
                sim.x_hat.write_csv(w)
            })?;
        }
        write_text(&paths.file(&format!("envelope_{label}.csv")), |w| {
            writeln!(w, "trajectory,sup_error,bound")?;
            for (i, e) in report.per_trajectory.iter().enumerate() {
                writeln!(w, "{i},{e:e},{bound:e}")?;
            }
            Ok(())
        })?;
        runs.push(EnvelopeCheck {
            label: label.into(),
            bound,
            report,
            pass,
        });
    }
    let summary = SimulationSummary {
        t_c,
        trajectories: states.len(),
        noise_bound: v,
        pass: runs.iter().all(|r| r.pass),
        runs,
    };
    write_json(&paths.simulation(), &summary)?;
    Ok(summary)
}

/// Choices that affect the numbers, recorded with every report.
pub fn design_decisions(cfg: &RunConfig) -> Vec<String> {
    let t = &cfg.training;
    vec![
        "double precision throughout; interval bounds use round-to-nearest arithmetic".into(),
        format!("RK4, dt = {}, for data generation; simulations use dt = {}", t.dt, cfg.simulation.dt),
        format!(
            "pairs recorded every {} s; backward horizon {} s, trapezoid rule",
            t.sample_period, t.t_b
        ),
        format!(
            "Adam batch {}, {} epochs, learning rate {}; physics weight {}",
            t.batch_size, t.epochs, t.learning_rate, t.nu
        ),
        format!(
            "hard-point mining: {} rounds, pool {}, keep {}, {} L-BFGS iterations per round, norm penalty, earlier mined points kept: {}",
            t.finetune_rounds, t.pool_size, t.keep_fraction, t.finetune_iters, t.mining_accumulate
        ),
        format!(
            "inverse net {:?} (forward architecture unless configured), {} region samples",
            t.inverse_dims(0, 0),
            t.inverse_samples
        ),
        "Xavier-uniform initialization seeded from the training seed".into(),
        "observer initial condition z_hat(0) = 0".into(),
        format!(
            "Lipschitz domain: {:?} of the image enclosure (grid {} per axis), margin {}",
            cfg.certify.lipschitz_domain,
            cfg.certify.image_grid,
            cfg.certify
                .z_margin
                .map_or(format!("{} x certified ultimate |e_z| bound", cfg.certify.z_margin_factor), |m| m.to_string())
        ),
        "noise: uniform direction, uniform magnitude, held over each step".into(),
        format!(
            "transient cut-off {}",
            cfg.simulation.t_c.map_or("5 / lambda_min(A)".to_string(), |t| t.to_string())
        ),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_digest: String,
    pub decisions: Vec<String>,
    pub dataset: Option<DatasetMeta>,
    pub finetune: Option<FinetuneReport>,
    pub certification: Option<CertificationReport>,
    pub certificate: Option<Certificate>,
    pub simulation: Option<SimulationSummary>,
}

/// Collect every stage output present in the output directory.
pub fn report(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    fn opt<T: DeserializeOwned>(p: PathBuf) -> Result<Option<T>, PipelineError> {
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }
    let r = RunReport {
        config: cfg.clone(),
        config_digest: cfg.digest(),
        decisions: design_decisions(cfg),
        dataset: opt(paths.dataset().join("dataset.json"))?,
        finetune: opt(paths.file("finetune.json"))?,
        certification: opt(paths.certification())?,
        certificate: opt(paths.certificate())?,
        simulation: opt(paths.simulation())?,
    };
    write_json(&paths.report(), &r)?;
    Ok(r)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    gen_data(cfg)?;
    train(cfg)?;
    finetune(cfg)?;
    train_inverse_stage(cfg)?;
    certify(cfg)?;
    certificate(cfg, None)?;
    simulate(cfg)?;
    report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("[training]\nepochz = 3\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[training]\nnu = -1.0\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[observer]\nrates = [1.0, -2.0]\n"),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn digest_tracks_content_not_location() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), a.clone().with_seed(3).digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn table_two_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let duffing = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let c = certificate(&duffing, Some(&[5.13e-4, 235.7, 5.98e-2])).unwrap();
        assert!((c.x_ultimate - 0.181).abs() <= 1e-3, "{}", c.x_ultimate);
        let vdp = RunConfig {
            system: SystemSpec::VanDerPol { mu: 1.0 },
            observer: ObserverSpec {
                rates: vec![2.0, 4.0, 6.0, 8.0, 10.0],
                ..ObserverSpec::default()
            },
            region: RegionSpec::Boxes {
                boxes: vec![AxisBox::symmetric(2, 3.0)],
            },
            ..duffing
        };
        let c = certificate(&vdp, Some(&[7.7e-3, 23.0, 2.3e-2, 0.033])).unwrap();
        assert!((c.x_ultimate - 0.112).abs() <= 1e-3, "{}", c.x_ultimate);
        let noisy = c.x_ultimate_noisy.unwrap().bound;
        assert!((noisy - 0.685).abs() <= 2e-3, "{noisy}");
        assert!(dir.path().join("certificate.txt").exists());
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        for e in [
            train(&cfg).unwrap_err(),
            certificate(&cfg, None).unwrap_err(),
            simulate(&cfg).unwrap_err(),
        ] {
            assert_eq!(e.exit_code(), 2, "{e}");
        }
        assert_eq!(
            certificate(&cfg, Some(&[1.0, 2.0]))
                .unwrap_err()
                .exit_code(),
            2
        );
    }
}
