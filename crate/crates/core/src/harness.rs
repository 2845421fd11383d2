//! Run orchestration: ALPS and its PT / LAIS baselines, run diagnostics,
//! output files, and the leap-acceptance scaling experiment.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::chain::{
    pa_sweep, ChainPoint, Counter, LevelKernel, Preconditioner, RwmConfig, StepTuner, SweepConfig, SweepStats,
    TemperatureLadder,
};
use crate::error::{Error, Result};
use crate::exploration::{hot_target, init_hot_chains, mfind, write_discovery_log, DiscoveryRecord, ExplorationConfig};
use crate::hat::{
    allocate_mode, HatTarget, PowerTarget, TargetDensity, TemperedTarget, TruncatedHatTarget,
    DEFAULT_TRUNCATION_LEVEL,
};
use crate::mode_registry::{default_tolerance, ModeRecord, ModeRegistry, RegistryFile};
use crate::numeric::ndtr;
use crate::rng::{stream, StreamKind};
use crate::targets::{
    grunfeld, load_sur_csv, sur_ols_theta, GaussianMixtureTarget, Shape1d, SkewNormalMixtureTarget, SurProfileTarget,
};

// ---------------------------------------------------------------------------
// configuration

/// Target selection: `name` plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    SkewMixture {
        dim: usize,
        alpha: f64,
    },
    Gaussian {
        mu: Vec<f64>,
        sigma: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        mus: Vec<Vec<f64>>,
        sigmas: Vec<Vec<Vec<f64>>>,
    },
    SurGrunfeld {
        #[serde(default = "default_years")]
        years: (i64, i64),
    },
    SurCsv {
        path: PathBuf,
        #[serde(default)]
        years: Option<(i64, i64)>,
        #[serde(default)]
        sha256: Option<String>,
    },
}

fn default_years() -> (i64, i64) {
    (1935, 1949)
}

type Classifier = Arc<dyn Fn(&[f64]) -> usize + Send + Sync>;

/// A constructed target with what the harness needs around it.
pub struct BuiltTarget {
    pub density: Arc<dyn TargetDensity>,
    /// Ground-truth mode labels, when the target has them.
    pub classifier: Option<Classifier>,
    /// Starting point used when the config gives none.
    pub default_start: Vec<f64>,
}

fn matrix(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("covariance must be {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl TargetSpec {
    pub fn build(&self) -> Result<BuiltTarget> {
        match self {
            TargetSpec::SkewMixture { dim, alpha } => {
                if *dim < 2 || *dim % 2 != 0 {
                    return Err(Error::Config(format!("skew_mixture needs an even dim >= 2, got {dim}")));
                }
                let t = Arc::new(SkewNormalMixtureTarget::benchmark(*dim, *alpha));
                let c = t.clone();
                Ok(BuiltTarget {
                    density: t,
                    classifier: Some(Arc::new(move |x| c.dominant_component(x))),
                    default_start: vec![0.0; *dim],
                })
            }
            TargetSpec::Gaussian { mu, sigma } => {
                let d = mu.len();
                let t = Arc::new(GaussianMixtureTarget::gaussian(DVector::from_vec(mu.clone()), matrix(sigma, d)?)?);
                Ok(BuiltTarget {
                    density: t,
                    classifier: Some(Arc::new(|_| 0)),
                    default_start: mu.clone(),
                })
            }
            TargetSpec::GaussianMixture { weights, mus, sigmas } => {
                let d = mus.first().map_or(0, |m| m.len());
                if d == 0 {
                    return Err(Error::Config("gaussian_mixture needs at least one non-empty mean".into()));
                }
                let sig = sigmas.iter().map(|s| matrix(s, d)).collect::<Result<Vec<_>>>()?;
                let t = Arc::new(GaussianMixtureTarget::new(
                    weights.clone(),
                    mus.iter().map(|m| DVector::from_vec(m.clone())).collect(),
                    sig,
                )?);
                let c = t.clone();
                Ok(BuiltTarget {
                    density: t,
                    classifier: Some(Arc::new(move |x| c.dominant_component(x))),
                    default_start: mus[0].clone(),
                })
            }
            TargetSpec::SurGrunfeld { years } => sur_built(grunfeld(*years)?),
            TargetSpec::SurCsv { path, years, sha256 } => sur_built(load_sur_csv(path, *years, sha256.as_deref())?),
        }
    }
}

fn sur_built(data: crate::targets::SurData) -> Result<BuiltTarget> {
    let start = sur_ols_theta(&data)?.as_slice().to_vec();
    Ok(BuiltTarget {
        density: Arc::new(SurProfileTarget::new(data)),
        classifier: None,
        default_start: start,
    })
}

/// `β_hot` and the PA ladder `(1 = β_0, …, β_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    pub beta_hot: f64,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RwmSettings {
    pub preconditioner: Preconditioner,
    /// Initial step for every level; `None` uses `2.38/√d` (scaled by
    /// `1/√β` when no preconditioner is used).
    pub step_scale: Option<f64>,
    /// Per-level initial steps; overrides `step_scale`.
    pub per_level: Option<Vec<f64>>,
    pub target_rate: f64,
    pub adapt: bool,
}

impl Default for RwmSettings {
    fn default() -> Self {
        Self {
            preconditioner: Preconditioner::ModeLocalCorrected,
            step_scale: None,
            per_level: None,
            target_rate: 0.234,
            adapt: true,
        }
    }
}

/// Geometric power-tempering ladder for the PT baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtSettings {
    pub levels: usize,
    pub ratio: f64,
}

impl Default for PtSettings {
    fn default() -> Self {
        Self { levels: 14, ratio: 0.6 }
    }
}

impl PtSettings {
    pub fn betas(&self) -> Vec<f64> {
        (0..self.levels).map(|k| self.ratio.powi(k as i32)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub ladder: LadderSpec,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub rwm: RwmSettings,
    /// Sweeps whose samples and counters are discarded.
    pub burn_in: u64,
    /// Total sweeps, burn-in included; each sweep yields one target-level sample.
    pub sweeps: u64,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Sweep after which step tuning and mode finding stop; defaults to `burn_in`.
    #[serde(default)]
    pub freeze_sweep: Option<u64>,
    /// Quantile level for truncated HAT targets; absent means plain HAT.
    #[serde(default)]
    pub truncation_quantile: Option<f64>,
    #[serde(default)]
    pub initial_modes: Option<Vec<ModeRecord>>,
    #[serde(default)]
    pub initial_point: Option<Vec<f64>>,
    /// Mode-finding settings; absent disables the exploration component.
    #[serde(default)]
    pub exploration: Option<ExplorationConfig>,
    #[serde(default)]
    pub registry_tol: Option<f64>,
    #[serde(default = "default_thin")]
    pub thin: u64,
    #[serde(default)]
    pub pt: PtSettings,
    /// Threshold for the running estimate of `P(X_1 < t)`.
    #[serde(default = "default_threshold")]
    pub running_threshold: f64,
}

fn default_thin() -> u64 {
    10
}

fn default_threshold() -> f64 {
    0.5
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn freeze_at(&self) -> u64 {
        self.freeze_sweep.unwrap_or(self.burn_in)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        TemperatureLadder::new(self.ladder.beta_hot, self.ladder.betas.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if self.thin == 0 {
            return cfg("thin must be at least 1".into());
        }
        if self.sweep.v == 0 {
            return cfg("v must be at least 1".into());
        }
        for (name, p) in [("quanta_prob", self.sweep.quanta_prob), ("leap_prob", self.sweep.leap_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("{name} must be a probability, got {p}"));
            }
        }
        if let Some(q) = self.truncation_quantile {
            if !(q > 0.0 && q < 1.0) {
                return cfg(format!("truncation_quantile must lie in (0,1), got {q}"));
            }
        }
        if let Some(p) = &self.rwm.per_level {
            if p.len() != self.ladder.betas.len() {
                return cfg("rwm.per_level needs one step per ladder level".into());
            }
        }
        if !(self.rwm.target_rate > 0.0 && self.rwm.target_rate < 1.0) {
            return cfg("rwm.target_rate must lie in (0,1)".into());
        }
        if self.pt.levels == 0 || !(self.pt.ratio > 0.0 && self.pt.ratio < 1.0) {
            return cfg("pt needs at least one level and a ratio in (0,1)".into());
        }
        if let Some(e) = &self.exploration {
            let mut e = e.clone();
            e.beta_hot = self.ladder.beta_hot;
            e.validate()?;
        }
        Ok(())
    }
}

/// Named configurations. Every preset carries seed 1; override per repetition.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base = |target: TargetSpec, beta_hot: f64, betas: Vec<f64>| RunConfig {
        target,
        ladder: LadderSpec { beta_hot, betas },
        sweep: SweepConfig::default(),
        rwm: RwmSettings::default(),
        burn_in: 15_000,
        sweeps: 200_000,
        seed: 1,
        output_dir: None,
        freeze_sweep: None,
        truncation_quantile: None,
        initial_modes: None,
        initial_point: None,
        exploration: Some(ExplorationConfig::default()),
        registry_tol: None,
        thin: default_thin(),
        pt: PtSettings::default(),
        running_threshold: default_threshold(),
    };
    match name {
        "benchmark20" => Ok(base(
            TargetSpec::SkewMixture { dim: 20, alpha: 10.0 },
            5e-6,
            vec![1.0, 4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0],
        )),
        "sur_coarse" => {
            let mut c = base(
                TargetSpec::SurGrunfeld { years: default_years() },
                0.5,
                vec![1.0, 10f64.sqrt(), 10.0],
            );
            c.truncation_quantile = Some(DEFAULT_TRUNCATION_LEVEL);
            c.burn_in = 1_000;
            c.sweeps = 10_000;
            Ok(c)
        }
        "sur_fine" => {
            let mut c = base(
                TargetSpec::SurGrunfeld { years: default_years() },
                0.067,
                vec![1.00, 1.10, 1.40, 1.96, 2.74, 3.84, 5.38],
            );
            c.truncation_quantile = Some(DEFAULT_TRUNCATION_LEVEL);
            c.burn_in = 20_000;
            Ok(c)
        }
        "gaussian1d" => {
            let mut c = base(
                TargetSpec::Gaussian {
                    mu: vec![0.0],
                    sigma: vec![vec![1.0]],
                },
                0.5,
                vec![1.0, 4.0],
            );
            c.exploration = None;
            c.initial_modes = Some(vec![ModeRecord {
                mu: vec![0.0],
                sigma: vec![vec![1.0]],
                log_pi_at_mode: -0.5 * crate::numeric::LN_2PI,
            }]);
            c.burn_in = 1_000;
            c.sweeps = 10_000;
            Ok(c)
        }
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (known: benchmark20, sur_coarse, sur_fine, gaussian1d)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Alps,
    Pt,
    Lais,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistryEvent {
    pub sweep: u64,
    pub version: u64,
    pub modes: usize,
}

/// Everything a run records besides the samples.
#[derive(Debug, Clone)]
pub struct RunDiagnostics {
    pub sampler: Sampler,
    pub betas: Vec<f64>,
    /// Post-burn-in PA counters.
    pub stats: SweepStats,
    /// Hot-chain counters over the whole exploration phase.
    pub hot: Counter,
    /// Mode label per sweep at level 0 and level n.
    pub visits_level0: Vec<Option<usize>>,
    pub visits_top: Vec<Option<usize>>,
    pub sweep_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub discovery: Vec<DiscoveryRecord>,
    pub registry_events: Vec<RegistryEvent>,
    pub final_steps: Vec<f64>,
}

pub struct RunOutput {
    pub dim: usize,
    pub burn_in: u64,
    /// `(sweep, level-0 point)` every `thin` sweeps.
    pub trace: Vec<(u64, Vec<f64>)>,
    /// First coordinate of the level-0 chain after every sweep.
    pub first_coordinate: Vec<f64>,
    pub diagnostics: RunDiagnostics,
    pub registry: Option<ModeRegistry>,
}

pub fn alps_run(cfg: &RunConfig, target: &BuiltTarget) -> Result<RunOutput> {
    run_core(cfg, target, Sampler::Alps)
}

/// Power-tempered PT with standard swaps on the geometric ladder of `cfg.pt`.
pub fn pt_run(cfg: &RunConfig, target: &BuiltTarget) -> Result<RunOutput> {
    run_core(cfg, target, Sampler::Pt)
}

/// The single-level variant: HAT at `β = 1` with mode leaps and mode finding.
pub fn lais_run(cfg: &RunConfig, target: &BuiltTarget) -> Result<RunOutput> {
    run_core(cfg, target, Sampler::Lais)
}

fn level_targets(
    base: &Arc<dyn TargetDensity>,
    registry: &ModeRegistry,
    betas: &[f64],
    truncation: Option<f64>,
) -> Result<Vec<Arc<dyn TemperedTarget>>> {
    let reg = Arc::new(registry.clone());
    betas
        .iter()
        .map(|&b| {
            let h = HatTarget::new(base.clone(), reg.clone(), b)?;
            Ok(match truncation {
                Some(p) => Arc::new(TruncatedHatTarget::at_quantile(h, p)?) as Arc<dyn TemperedTarget>,
                None => Arc::new(h) as Arc<dyn TemperedTarget>,
            })
        })
        .collect()
}

fn initial_registry(cfg: &RunConfig, dim: usize) -> Result<ModeRegistry> {
    let tol = cfg.registry_tol.unwrap_or_else(|| default_tolerance(dim));
    let modes = cfg.initial_modes.clone().unwrap_or_default();
    let mut reg = ModeRegistry::from_file(RegistryFile {
        version: 0,
        dim,
        tol,
        modes: Vec::new(),
    })?;
    for m in modes {
        let one = ModeRegistry::from_file(RegistryFile {
            version: 0,
            dim,
            tol,
            modes: vec![m],
        })?;
        reg.try_insert(one.mode(0).clone())?;
    }
    Ok(reg)
}

fn run_core(cfg: &RunConfig, target: &BuiltTarget, sampler: Sampler) -> Result<RunOutput> {
    cfg.validate()?;
    let base = target.density.clone();
    let d = base.dim();
    let x0 = cfg.initial_point.clone().unwrap_or_else(|| target.default_start.clone());
    if x0.len() != d {
        return Err(Error::Config(format!("initial_point has length {}, target dimension is {d}", x0.len())));
    }
    let betas = match sampler {
        Sampler::Alps => cfg.ladder.betas.clone(),
        Sampler::Lais => vec![1.0],
        Sampler::Pt => cfg.pt.betas(),
    };
    let uses_registry = sampler != Sampler::Pt;
    let mut registry = initial_registry(cfg, d)?;
    let exploration = match (uses_registry, &cfg.exploration) {
        (true, Some(e)) => {
            let mut e = e.clone();
            e.beta_hot = cfg.ladder.beta_hot;
            Some(e)
        }
        _ => None,
    };
    let hot = exploration.as_ref().map(|e| hot_target(base.clone(), e)).transpose()?;
    let mut hot_chains = match (&hot, &exploration) {
        (Some(h), Some(e)) => init_hot_chains(&x0, h, e),
        _ => Vec::new(),
    };

    let mut kernels: Vec<LevelKernel> = betas
        .iter()
        .enumerate()
        .map(|(ell, &b)| {
            let preconditioner = if uses_registry { cfg.rwm.preconditioner } else { Preconditioner::None };
            let mut step = match (&cfg.rwm.per_level, cfg.rwm.step_scale) {
                (Some(p), _) if sampler == Sampler::Alps => p[ell],
                (_, Some(s)) => s,
                _ => 2.38 / (d as f64).sqrt(),
            };
            if preconditioner == Preconditioner::None && cfg.rwm.per_level.is_none() {
                step /= b.sqrt();
            }
            let mut tuner = StepTuner::new(cfg.rwm.target_rate);
            if !cfg.rwm.adapt {
                tuner.freeze();
            }
            LevelKernel {
                rwm: RwmConfig {
                    step_scale: step,
                    preconditioner,
                },
                tuner,
            }
        })
        .collect();

    let mut targets: Vec<Arc<dyn TemperedTarget>> = Vec::new();
    let mut levels: Vec<ChainPoint> = Vec::new();
    let mut built_version: Option<u64> = None;
    if sampler == Sampler::Pt {
        targets = betas
            .iter()
            .map(|&b| Ok(Arc::new(PowerTarget::new(base.clone(), b)?) as Arc<dyn TemperedTarget>))
            .collect::<Result<_>>()?;
        levels = targets.iter().map(|t| ChainPoint::new(x0.clone(), t.as_ref())).collect();
    }

    let freeze = cfg.freeze_at();
    if freeze == 0 {
        kernels.iter_mut().for_each(|k| k.tuner.freeze());
        hot_chains.iter_mut().for_each(|h| h.kernel.tuner.freeze());
    }
    let mut stats = SweepStats::new(betas.len());
    let mut discarded = SweepStats::new(betas.len());
    let mut diag = RunDiagnostics {
        sampler,
        betas: betas.clone(),
        stats: SweepStats::new(betas.len()),
        hot: Counter::default(),
        visits_level0: Vec::with_capacity(cfg.sweeps as usize),
        visits_top: Vec::with_capacity(cfg.sweeps as usize),
        sweep_seconds: Vec::with_capacity(cfg.sweeps as usize),
        total_seconds: 0.0,
        discovery: Vec::new(),
        registry_events: Vec::new(),
        final_steps: Vec::new(),
    };
    let mut trace = Vec::new();
    let mut first_coordinate = Vec::with_capacity(cfg.sweeps as usize);
    let started = Instant::now();

    for s in 0..cfg.sweeps {
        let t0 = Instant::now();
        if uses_registry {
            if registry.is_empty() {
                if exploration.is_none() {
                    return Err(Error::NoModes);
                }
            } else if built_version != Some(registry.version()) {
                targets = level_targets(&base, &registry, &betas, cfg.truncation_quantile)?;
                if levels.is_empty() {
                    levels = targets.iter().map(|t| ChainPoint::new(x0.clone(), t.as_ref())).collect();
                } else {
                    for (p, t) in levels.iter_mut().zip(&targets) {
                        p.refresh(t.as_ref());
                    }
                }
                built_version = Some(registry.version());
                diag.registry_events.push(RegistryEvent {
                    sweep: s,
                    version: registry.version(),
                    modes: registry.len(),
                });
            }
        }
        if !levels.is_empty() {
            let sink = if s >= cfg.burn_in { &mut stats } else { &mut discarded };
            pa_sweep(&mut levels, &targets, &mut kernels, &cfg.sweep, cfg.seed, s, sink)?;
        }
        if let (Some(h), Some(e)) = (&hot, &exploration) {
            if s < freeze {
                let out = mfind(&mut hot_chains, h, &mut registry, base.as_ref(), e, cfg.seed, s)?;
                if out.found_new {
                    info!("sweep {s}: registry now holds {} modes", registry.len());
                }
                diag.discovery.extend(out.records);
            }
        }
        if s + 1 == freeze {
            kernels.iter_mut().for_each(|k| k.tuner.freeze());
            hot_chains.iter_mut().for_each(|h| h.kernel.tuner.freeze());
        }

        let label = |x: &[f64]| -> Option<usize> {
            match &target.classifier {
                Some(c) => Some(c(x)),
                None if !registry.is_empty() => allocate_mode(x, 1.0, &registry).ok(),
                None => None,
            }
        };
        let x_level0 = levels.first().map_or(&x0, |p| &p.x);
        diag.visits_level0.push(label(x_level0));
        diag.visits_top.push(label(levels.last().map_or(&x0, |p| &p.x)));
        first_coordinate.push(x_level0[0]);
        if (s + 1) % cfg.thin == 0 {
            trace.push((s, x_level0.clone()));
        }
        diag.sweep_seconds.push(t0.elapsed().as_secs_f64());
    }

    diag.total_seconds = started.elapsed().as_secs_f64();
    diag.stats = stats;
    for h in &hot_chains {
        diag.hot.proposed += h.proposed;
        diag.hot.accepted += h.accepted;
    }
    diag.final_steps = kernels.iter().map(|k| k.rwm.step_scale).collect();
    Ok(RunOutput {
        dim: d,
        burn_in: cfg.burn_in,
        trace,
        first_coordinate,
        diagnostics: diag,
        registry: uses_registry.then_some(registry),
    })
}

/// Builds the target, checks the output directory, runs, and writes outputs.
pub fn execute(cfg: &RunConfig, sampler: Sampler) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(dir) = &cfg.output_dir {
        prepare_output_dir(dir)?;
    }
    let target = cfg.target.build()?;
    let out = run_core(cfg, &target, sampler)?;
    if let Some(dir) = &cfg.output_dir {
        emit_outputs(&out, cfg, dir)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// diagnostics

/// `f(i) = (1/(i-b)) Σ_{j=b+1}^{i} 1{x_j < t}` for `i = b+1, …, len`.
pub fn running_prob_estimate(trace: &[f64], threshold: f64, burnin: usize) -> Result<Vec<f64>> {
    if burnin >= trace.len() {
        return Err(Error::InvalidArgument(format!(
            "burn-in {burnin} must be shorter than the trace ({})",
            trace.len()
        )));
    }
    let mut hits = 0u64;
    Ok(trace[burnin..]
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            hits += (x < threshold) as u64;
            hits as f64 / (k + 1) as f64
        })
        .collect())
}

/// `2 Φ(-(1/√2) √(15 h3² / (36 ℓ |h2|³)))`.
pub fn predicted_acceptance(h3: f64, h2: f64, ell: f64) -> Result<f64> {
    if !(h2 < 0.0) {
        return Err(Error::InvalidArgument(format!("h''(0) must be negative, got {h2}")));
    }
    if !(ell > 0.0) {
        return Err(Error::InvalidArgument(format!("ell must be positive, got {ell}")));
    }
    let arg = -(15.0 * h3 * h3 / (36.0 * ell * (-h2).powi(3))).sqrt() / std::f64::consts::SQRT_2;
    Ok(2.0 * ndtr(arg))
}

/// One-sample Kolmogorov–Smirnov statistic against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |acc, (i, &x)| {
        let f = cdf(x);
        acc.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic 1% critical value `1.628/√n`.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_624 / (n as f64).sqrt()
}

/// Count of each label in `labels[from..]`.
pub fn visit_counts(labels: &[Option<usize>], from: usize) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for l in labels.iter().skip(from) {
        let key = l.map_or_else(|| "unknown".to_string(), |v| v.to_string());
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

fn label_switches(labels: &[Option<usize>], from: usize) -> u64 {
    labels
        .iter()
        .skip(from)
        .collect::<Vec<_>>()
        .windows(2)
        .filter(|w| w[0] != w[1])
        .count() as u64
}

// ---------------------------------------------------------------------------
// outputs

/// Creates `dir` and confirms a file can be written there.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    let fail = |e: std::io::Error| Error::Config(format!("output directory {} is not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".write_check");
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)?;
    Ok(())
}

fn counter_json(c: &Counter) -> serde_json::Value {
    json!({
        "proposed": c.proposed,
        "accepted": c.accepted,
        "rejected": c.proposed - c.accepted,
        "non_finite": c.non_finite,
        "rate": if c.proposed == 0 { None } else { Some(c.rate()) },
    })
}

pub fn acceptance_json(diag: &RunDiagnostics) -> serde_json::Value {
    let st = &diag.stats;
    let pairs = |cs: &[Counter]| -> Vec<serde_json::Value> {
        cs.iter()
            .enumerate()
            .map(|(k, c)| {
                let mut v = counter_json(c);
                v["levels"] = json!([k, k + 1]);
                v
            })
            .collect()
    };
    json!({
        "sampler": diag.sampler,
        "betas": diag.betas,
        "within": st.within.iter().enumerate().map(|(k, c)| {
            let mut v = counter_json(c);
            v["level"] = json!(k);
            v
        }).collect::<Vec<_>>(),
        "leap": counter_json(&st.leap),
        "standard_swap": pairs(&st.standard),
        "quanta_swap": pairs(&st.quanta),
        "quanta_allocation_rejects": st.quanta_allocation_rejects,
        "hot": counter_json(&diag.hot),
        "final_step_scales": diag.final_steps,
    })
}

pub fn summary_json(out: &RunOutput, cfg: &RunConfig) -> serde_json::Value {
    let diag = &out.diagnostics;
    let b = out.burn_in as usize;
    let running = running_prob_estimate(&out.first_coordinate, cfg.running_threshold, b).ok();
    json!({
        "sampler": diag.sampler,
        "seed": cfg.seed,
        "sweeps": out.first_coordinate.len(),
        "burn_in": out.burn_in,
        "thin": cfg.thin,
        "running_threshold": cfg.running_threshold,
        "running_estimate_final": running.as_ref().and_then(|r| r.last().copied()),
        "modes_registered": out.registry.as_ref().map(|r| r.len()),
        "visit_counts_level0": visit_counts(&diag.visits_level0, b),
        "visit_counts_top": visit_counts(&diag.visits_top, b),
        "level0_switches": label_switches(&diag.visits_level0, b),
        "registry_events": diag.registry_events,
    })
}

pub fn timing_json(out: &RunOutput) -> serde_json::Value {
    let diag = &out.diagnostics;
    let n = diag.sweep_seconds.len();
    let sum: f64 = diag.sweep_seconds.iter().sum();
    json!({
        "total_seconds": diag.total_seconds,
        "sweeps": n,
        "seconds_per_1000_samples": if n == 0 { None } else { Some(1000.0 * diag.total_seconds / n as f64) },
        "mean_sweep_seconds": if n == 0 { None } else { Some(sum / n as f64) },
        "max_sweep_seconds": diag.sweep_seconds.iter().copied().fold(0.0, f64::max),
    })
}

pub fn write_trace<W: Write>(out: &RunOutput, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["sweep".to_string()];
    header.extend((1..=out.dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (s, x) in &out.trace {
        let mut row = vec![s.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `trace.csv`, `acceptance.json`, `modes.json`, `timing.json`,
/// `summary.json` and `discovery.csv` into `dir`.
pub fn emit_outputs(out: &RunOutput, cfg: &RunConfig, dir: &Path) -> Result<()> {
    prepare_output_dir(dir)?;
    write_trace(out, fs::File::create(dir.join("trace.csv"))?)?;
    write_json(&dir.join("acceptance.json"), &acceptance_json(&out.diagnostics))?;
    let modes = match &out.registry {
        Some(r) => serde_json::to_value(r.to_json_value())?,
        None => json!(null),
    };
    write_json(&dir.join("modes.json"), &modes)?;
    write_json(&dir.join("timing.json"), &timing_json(out))?;
    write_json(&dir.join("summary.json"), &summary_json(out, cfg))?;
    write_discovery_log(&out.diagnostics.discovery, fs::File::create(dir.join("discovery.csv"))?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// scaling experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingExperimentConfig {
    #[serde(default = "default_shape")]
    pub shape: Shape1d,
    /// `β = ℓ d`.
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seed: u64,
    /// Safety factor applied to the numerically found envelope constant.
    #[serde(default = "default_inflation")]
    pub envelope_inflation: f64,
}

fn default_shape() -> Shape1d {
    Shape1d::SkewNormal { alpha: 3.0 }
}
fn default_ell() -> f64 {
    1.0
}
fn default_dims() -> Vec<usize> {
    vec![10, 20, 40, 80]
}
fn default_samples() -> usize {
    100_000
}
fn default_inflation() -> f64 {
    1.2
}

impl ScalingExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            shape: default_shape(),
            ell: default_ell(),
            dims: default_dims(),
            samples: default_samples(),
            seed,
            envelope_inflation: default_inflation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ell > 0.0) {
            return Err(Error::Config(format!("ell must be positive, got {}", self.ell)));
        }
        if self.dims.is_empty() || self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Config("dims must be non-empty and each at least 2".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config("samples must be at least 2".into()));
        }
        if !(self.envelope_inflation >= 1.0) {
            return Err(Error::Config("envelope_inflation must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub d: usize,
    pub beta: f64,
    pub observed_rate: f64,
    pub mc_stderr: f64,
    pub predicted_rate: f64,
}

/// `sup_{x≠0} x²|H| / (-2h(x))` over a log-spaced grid on both sides of 0.
fn envelope_constant(h: &dyn Fn(f64) -> f64, abs_h2: f64) -> f64 {
    let mut c: f64 = 1.0;
    for k in 0..=4000 {
        let r = 10f64.powf(-4.0 + 8.0 * k as f64 / 4000.0);
        for x in [r, -r] {
            let v = h(x);
            if v < 0.0 {
                c = c.max(x * x * abs_h2 / (-2.0 * v));
            }
        }
    }
    c
}

const SCALING_CHUNK: usize = 1000;

/// Monte Carlo estimate of the leap acceptance `E[min(1, e^{B(d)})]` on the
/// iid product target `∏ f(x_i)^β` with the Laplace proposal, for each `d`.
pub fn scaling_experiment(cfg: &ScalingExperimentConfig) -> Result<Vec<ScalingRow>> {
    cfg.validate()?;
    cfg.shape.check_unique_max(50.0, 20_000)?;
    let h = cfg.shape.h();
    let (h2, h3) = cfg.shape.derivatives_at_zero();
    let abs_h2 = -h2;
    let predicted = predicted_acceptance(h3, h2, cfg.ell)?;
    let c = cfg.envelope_inflation * envelope_constant(&h, abs_h2);
    let chunks = cfg.samples.div_ceil(SCALING_CHUNK);

    let mut rows = Vec::with_capacity(cfg.dims.len());
    for (di, &d) in cfg.dims.iter().enumerate() {
        let beta = cfg.ell * d as f64;
        let prec = beta * abs_h2;
        let env_sd = (c / prec).sqrt();
        let prop_sd = prec.sqrt().recip();
        // β h(v) - log φ_β(v), up to a constant that cancels in B
        let g = |v: f64| beta * h(v) + 0.5 * prec * v * v;
        let partial: Vec<Result<(f64, f64)>> = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut rng = stream(cfg.seed, StreamKind::Scaling, di, chunk as u64);
                let n = SCALING_CHUNK.min(cfg.samples - chunk * SCALING_CHUNK);
                let (mut s1, mut s2) = (0.0, 0.0);
                for _ in 0..n {
                    let mut b = 0.0;
                    for _ in 0..d {
                        let x = loop {
                            let z: f64 = env_sd * rng.sample::<f64, _>(StandardNormal);
                            let log_ratio = beta * h(z) + 0.5 * prec * z * z / c;
                            if log_ratio > 1e-10 * (1.0 + (beta * h(z)).abs()) {
                                return Err(Error::EnvelopeViolation { abscissa: z });
                            }
                            if rng.random::<f64>().ln() < log_ratio {
                                break z;
                            }
                        };
                        let y: f64 = prop_sd * rng.sample::<f64, _>(StandardNormal);
                        b += g(y) - g(x);
                    }
                    let a = b.min(0.0).exp();
                    s1 += a;
                    s2 += a * a;
                }
                Ok((s1, s2))
            })
            .collect();
        let (mut s1, mut s2) = (0.0, 0.0);
        for p in partial {
            let (a, b) = p?;
            s1 += a;
            s2 += b;
        }
        let n = cfg.samples as f64;
        let mean = s1 / n;
        let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
        rows.push(ScalingRow {
            d,
            beta,
            observed_rate: mean,
            mc_stderr: (var / n).sqrt(),
            predicted_rate: predicted,
        });
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
