//! Parallel-annealing kernels: within-level RWM, temperature swaps and the
//! mode-leaping independence sampler, plus the sweep that strings them together.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hat::TemperedTarget;
use crate::mode_registry::ModeRegistry;
use crate::numeric::{chol_quad_form, logsumexp, LN_2PI};
use crate::rng::{stream, StreamKind};

/// `Δ = {β_hot, β_0 = 1, β_1, …, β_n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureLadder {
    beta_hot: f64,
    betas: Vec<f64>,
}

impl TemperatureLadder {
    pub fn new(beta_hot: f64, betas: Vec<f64>) -> Result<Self> {
        if !(beta_hot > 0.0 && beta_hot < 1.0) {
            return Err(Error::InvalidArgument(format!("beta_hot must lie in (0,1), got {beta_hot}")));
        }
        if betas.first() != Some(&1.0) {
            return Err(Error::InvalidArgument("ladder must start at beta = 1".into()));
        }
        if betas.windows(2).any(|w| !(w[1] > w[0])) || betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("ladder must be finite and strictly increasing".into()));
        }
        Ok(Self { beta_hot, betas })
    }

    /// `n + 1` levels spaced geometrically from 1 to `beta_max`.
    pub fn geometric(beta_hot: f64, beta_max: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Self::new(beta_hot, vec![1.0]);
        }
        let mut betas: Vec<f64> = (0..=n).map(|k| beta_max.powf(k as f64 / n as f64)).collect();
        betas[0] = 1.0;
        betas[n] = beta_max;
        Self::new(beta_hot, betas)
    }

    pub fn beta_hot(&self) -> f64 {
        self.beta_hot
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Index of `β_max`.
    pub fn n(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta_max(&self) -> f64 {
        self.betas[self.n()]
    }
}

/// A chain position with its cached log-density and allocation under the
/// target it currently lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPoint {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub allocation: Option<usize>,
}

impl ChainPoint {
    pub fn new(x: Vec<f64>, target: &dyn TemperedTarget) -> Self {
        let (log_density, allocation) = target.log_density_and_allocation(&x);
        Self {
            x,
            log_density,
            allocation,
        }
    }

    /// Recomputes the cache after the target changed.
    pub fn refresh(&mut self, target: &dyn TemperedTarget) {
        let (lp, a) = target.log_density_and_allocation(&self.x);
        self.log_density = lp;
        self.allocation = a;
    }
}

/// `X = (x_hot, x_0, …, x_n)`.
#[derive(Debug, Clone)]
pub struct LadderState {
    pub hot: ChainPoint,
    pub levels: Vec<ChainPoint>,
    pub registry_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    /// `chol(Σ_Â/β)` at the current point, proposal treated as symmetric.
    ModeLocalFrozen,
    /// As above, with the reverse density evaluated at the proposal's allocation.
    #[default]
    ModeLocalCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RwmConfig {
    pub step_scale: f64,
    pub preconditioner: Preconditioner,
}

impl RwmConfig {
    /// `2.38/√d`.
    pub fn default_for_dim(dim: usize, preconditioner: Preconditioner) -> Self {
        Self {
            step_scale: 2.38 / (dim as f64).sqrt(),
            preconditioner,
        }
    }
}

/// Outcome of a single Metropolis decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Decision {
    pub accepted: bool,
    /// The proposal's log-density (or the ratio) was not finite.
    pub non_finite: bool,
}

/// Metropolis test on a log-ratio with one uniform draw. NaN rejects.
fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

fn normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// One random-walk Metropolis step on `target`.
pub fn rwm_step<R: Rng + ?Sized>(
    point: &mut ChainPoint,
    target: &dyn TemperedTarget,
    cfg: &RwmConfig,
    rng: &mut R,
) -> Decision {
    let d = point.x.len();
    let beta = target.beta();
    let z = normal_vec(d, rng);
    let local = match (cfg.preconditioner, target.registry(), point.allocation) {
        (Preconditioner::None, _, _) | (_, None, _) | (_, _, None) => None,
        (_, Some(reg), Some(a)) => Some((reg, a)),
    };
    let step: DVector<f64> = match local {
        Some((reg, a)) => reg.mode(a).sigma_chol() * &z * (cfg.step_scale / beta.sqrt()),
        None => &z * cfg.step_scale,
    };
    let y: Vec<f64> = point.x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
    let (lp_y, alloc_y) = target.log_density_and_allocation(&y);
    if !lp_y.is_finite() {
        // still consume the decision draw so the stream position does not depend on the outcome
        let _: f64 = rng.random();
        return Decision {
            accepted: false,
            non_finite: true,
        };
    }
    let mut log_ratio = lp_y - point.log_density;
    if let (Preconditioner::ModeLocalCorrected, Some((reg, a)), Some(b)) = (cfg.preconditioner, local, alloc_y) {
        if a != b {
            let (ma, mb) = (reg.mode(a), reg.mode(b));
            let back: Vec<f64> = point.x.iter().zip(&y).map(|(x, y)| x - y).collect();
            let scale = beta / (cfg.step_scale * cfg.step_scale);
            let log_q_rev = -0.5 * mb.log_det_sigma() - 0.5 * scale * chol_quad_form(mb.sigma_chol(), &back);
            let log_q_fwd = -0.5 * ma.log_det_sigma() - 0.5 * z.norm_squared();
            log_ratio += log_q_rev - log_q_fwd;
        }
    }
    let accepted = accept(log_ratio, rng);
    if accepted {
        point.x = y;
        point.log_density = lp_y;
        point.allocation = alloc_y;
    }
    Decision {
        accepted,
        non_finite: false,
    }
}

/// `T(x, β, β', μ) = √(β/β')(x - μ) + μ`.
pub fn quanta_transform(x: &[f64], beta_from: f64, beta_to: f64, mu: &[f64]) -> Vec<f64> {
    let s = (beta_from / beta_to).sqrt();
    x.iter().zip(mu).map(|(xi, mi)| s * (xi - mi) + mi).collect()
}

/// Result of a swap proposal.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SwapDecision {
    pub decision: Decision,
    pub log_ratio: f64,
    /// Rejected because the transformed points changed allocation.
    pub allocation_changed: bool,
}

/// Classic PT exchange of levels `k` and `k+1`.
pub fn standard_swap<R: Rng + ?Sized>(
    levels: &mut [ChainPoint],
    k: usize,
    targets: &[Arc<dyn TemperedTarget>],
    rng: &mut R,
) -> SwapDecision {
    let (lo, hi) = (&levels[k], &levels[k + 1]);
    let (lp_k_new, a_k_new) = targets[k].log_density_and_allocation(&hi.x);
    let (lp_k1_new, a_k1_new) = targets[k + 1].log_density_and_allocation(&lo.x);
    let log_ratio = lp_k_new + lp_k1_new - lo.log_density - hi.log_density;
    let non_finite = !(lp_k_new.is_finite() && lp_k1_new.is_finite());
    let accepted = accept(if non_finite { f64::NAN } else { log_ratio }, rng);
    if accepted {
        levels.swap(k, k + 1);
        levels[k].log_density = lp_k_new;
        levels[k].allocation = a_k_new;
        levels[k + 1].log_density = lp_k1_new;
        levels[k + 1].allocation = a_k1_new;
    }
    SwapDecision {
        decision: Decision {
            accepted,
            non_finite,
        },
        log_ratio,
        allocation_changed: false,
    }
}

/// Transformation-aided swap of levels `k` and `k+1`.
///
/// Proposals whose transformed points fall in a different allocation than
/// the one used to build them are rejected; this keeps the move an
/// involution and hence reversible.
pub fn quanta_swap<R: Rng + ?Sized>(
    levels: &mut [ChainPoint],
    k: usize,
    targets: &[Arc<dyn TemperedTarget>],
    rng: &mut R,
) -> Result<SwapDecision> {
    let registry = targets[k].registry().ok_or(Error::NoModes)?;
    let (bk, bk1) = (targets[k].beta(), targets[k + 1].beta());
    let m1 = levels[k].allocation.ok_or(Error::NoModes)?;
    let m2 = levels[k + 1].allocation.ok_or(Error::NoModes)?;
    let y_k = quanta_transform(&levels[k].x, bk, bk1, registry.mode(m1).mu().as_slice());
    let y_k1 = quanta_transform(&levels[k + 1].x, bk1, bk, registry.mode(m2).mu().as_slice());
    let (lp_a, alloc_a) = targets[k + 1].log_density_and_allocation(&y_k);
    let (lp_b, alloc_b) = targets[k].log_density_and_allocation(&y_k1);
    let log_ratio = lp_a + lp_b - levels[k].log_density - levels[k + 1].log_density;
    let non_finite = !(lp_a.is_finite() && lp_b.is_finite());
    let allocation_changed = alloc_a != Some(m1) || alloc_b != Some(m2);
    let u_ratio = if non_finite || allocation_changed {
        f64::NAN
    } else {
        log_ratio
    };
    let accepted = accept(u_ratio, rng);
    if accepted {
        levels[k] = ChainPoint {
            x: y_k1,
            log_density: lp_b,
            allocation: alloc_b,
        };
        levels[k + 1] = ChainPoint {
            x: y_k,
            log_density: lp_a,
            allocation: alloc_a,
        };
    }
    Ok(SwapDecision {
        decision: Decision {
            accepted,
            non_finite,
        },
        log_ratio,
        allocation_changed,
    })
}

/// Draws from `q_β = Σ ŵ_j N(μ_j, Σ_j/β)`.
pub fn mixture_propose<R: Rng + ?Sized>(registry: &ModeRegistry, beta: f64, rng: &mut R) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut j = registry.len() - 1;
    for (i, lw) in registry.log_weights().iter().enumerate() {
        acc += lw.exp();
        if u < acc {
            j = i;
            break;
        }
    }
    let m = registry.mode(j);
    let z = normal_vec(registry.dim(), rng);
    let step = m.sigma_chol() * z / beta.sqrt();
    m.mu().iter().zip(step.iter()).map(|(a, b)| a + b).collect()
}

/// `log q_β(y)`.
pub fn mixture_log_density(registry: &ModeRegistry, beta: f64, y: &[f64]) -> f64 {
    let d = registry.dim() as f64;
    let c = 0.5 * d * (beta.ln() - LN_2PI);
    let terms: Vec<f64> = registry
        .modes()
        .iter()
        .zip(registry.log_weights())
        .map(|(m, lw)| lw + c - 0.5 * m.log_det_sigma() - 0.5 * beta * m.mahalanobis_sq(y))
        .collect();
    logsumexp(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveType {
    Local,
    Leap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeapDecision {
    pub move_type: MoveType,
    pub decision: Decision,
    pub log_ratio: f64,
}

/// One step of the mode-leaping sampler at `β_max`: a local RWM move or an
/// independence proposal from the Laplace mixture, each with probability ½.
pub fn mode_leap_step<R: Rng + ?Sized>(
    point: &mut ChainPoint,
    target: &dyn TemperedTarget,
    rwm: &RwmConfig,
    leap_prob: f64,
    rng: &mut R,
) -> Result<LeapDecision> {
    let registry = target.registry().ok_or(Error::NoModes)?;
    let coin: f64 = rng.random();
    if coin >= leap_prob {
        let decision = rwm_step(point, target, rwm, rng);
        return Ok(LeapDecision {
            move_type: MoveType::Local,
            decision,
            log_ratio: f64::NAN,
        });
    }
    let beta = target.beta();
    let y = mixture_propose(registry, beta, rng);
    let (lp_y, alloc_y) = target.log_density_and_allocation(&y);
    let log_ratio = lp_y + mixture_log_density(registry, beta, &point.x)
        - point.log_density
        - mixture_log_density(registry, beta, &y);
    let non_finite = !lp_y.is_finite();
    let accepted = accept(if non_finite { f64::NAN } else { log_ratio }, rng);
    if accepted {
        point.x = y;
        point.log_density = lp_y;
        point.allocation = alloc_y;
    }
    Ok(LeapDecision {
        move_type: MoveType::Leap,
        decision: Decision {
            accepted,
            non_finite,
        },
        log_ratio,
    })
}

/// Robbins–Monro adaptation of `log step_scale` toward a target acceptance rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTuner {
    pub target_rate: f64,
    updates: u64,
    frozen: bool,
}

impl StepTuner {
    pub fn new(target_rate: f64) -> Self {
        Self {
            target_rate,
            updates: 0,
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn update(&mut self, cfg: &mut RwmConfig, accepted: bool) {
        if self.frozen {
            return;
        }
        self.updates += 1;
        let gain = (self.updates as f64 + 10.0).powf(-0.6) * 3.0;
        let delta = gain * (accepted as u8 as f64 - self.target_rate);
        cfg.step_scale = (cfg.step_scale.ln() + delta).clamp(-25.0, 10.0).exp();
    }
}

impl Default for StepTuner {
    fn default() -> Self {
        Self::new(0.234)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwapSelection {
    #[default]
    Uniform,
    EvenOdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Within-level moves per level (and leap moves at level n) per sweep.
    pub v: usize,
    /// Swap proposals per sweep; `None` means `n`.
    pub s: Option<usize>,
    /// Probability that a swap proposal is QuanTA rather than standard.
    pub quanta_prob: f64,
    pub leap_prob: f64,
    pub swap_selection: SwapSelection,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            v: 5,
            s: None,
            quanta_prob: 0.5,
            leap_prob: 0.5,
            swap_selection: SwapSelection::Uniform,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counter {
    pub proposed: u64,
    pub accepted: u64,
    pub non_finite: u64,
}

impl Counter {
    pub fn record(&mut self, d: Decision) {
        self.proposed += 1;
        self.accepted += d.accepted as u64;
        self.non_finite += d.non_finite as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &Counter) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.non_finite += other.non_finite;
    }
}

/// Acceptance counts for the PA part of the chain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepStats {
    /// Per level; at level n this counts the local half of the leap kernel.
    pub within: Vec<Counter>,
    pub leap: Counter,
    /// Per adjacent pair `(k, k+1)`.
    pub quanta: Vec<Counter>,
    pub standard: Vec<Counter>,
    pub quanta_allocation_rejects: u64,
}

impl SweepStats {
    pub fn new(levels: usize) -> Self {
        let pairs = levels.saturating_sub(1);
        Self {
            within: vec![Counter::default(); levels],
            leap: Counter::default(),
            quanta: vec![Counter::default(); pairs],
            standard: vec![Counter::default(); pairs],
            quanta_allocation_rejects: 0,
        }
    }

    pub fn merge(&mut self, other: &SweepStats) {
        for (a, b) in self.within.iter_mut().zip(&other.within) {
            a.merge(b);
        }
        self.leap.merge(&other.leap);
        for (a, b) in self.quanta.iter_mut().zip(&other.quanta) {
            a.merge(b);
        }
        for (a, b) in self.standard.iter_mut().zip(&other.standard) {
            a.merge(b);
        }
        self.quanta_allocation_rejects += other.quanta_allocation_rejects;
    }
}

/// Per-level kernel state: proposal configuration and its tuner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelKernel {
    pub rwm: RwmConfig,
    pub tuner: StepTuner,
}

#[allow(clippy::too_many_arguments)]
fn level_moves(
    level: usize,
    point: &mut ChainPoint,
    target: &dyn TemperedTarget,
    kernel: &mut LevelKernel,
    cfg: &SweepConfig,
    is_top: bool,
    seed: u64,
    sweep: u64,
) -> Result<(Counter, Counter)> {
    let mut within = Counter::default();
    let mut leap = Counter::default();
    let kind = if is_top { StreamKind::Leap } else { StreamKind::Within };
    let mut rng = stream(seed, kind, level, sweep);
    for _ in 0..cfg.v {
        if is_top && target.registry().is_some() {
            let out = mode_leap_step(point, target, &kernel.rwm, cfg.leap_prob, &mut rng)?;
            match out.move_type {
                MoveType::Local => {
                    within.record(out.decision);
                    kernel.tuner.update(&mut kernel.rwm, out.decision.accepted);
                }
                MoveType::Leap => leap.record(out.decision),
            }
        } else {
            let d = rwm_step(point, target, &kernel.rwm, &mut rng);
            within.record(d);
            kernel.tuner.update(&mut kernel.rwm, d.accepted);
        }
        if point.log_density.is_nan() {
            return Err(Error::Numerical {
                sweep,
                level,
                message: "log-density became NaN".into(),
            });
        }
    }
    Ok((within, leap))
}

/// One PA sweep: `v` within-level moves at levels `0..n`, `v` mode-leap
/// moves at level `n`, then `s` swap proposals.
pub fn pa_sweep(
    levels: &mut [ChainPoint],
    targets: &[Arc<dyn TemperedTarget>],
    kernels: &mut [LevelKernel],
    cfg: &SweepConfig,
    seed: u64,
    sweep: u64,
    stats: &mut SweepStats,
) -> Result<()> {
    let n = levels.len() - 1;
    let run = |(ell, (point, kernel)): (usize, (&mut ChainPoint, &mut LevelKernel))| {
        level_moves(ell, point, targets[ell].as_ref(), kernel, cfg, ell == n, seed, sweep)
    };
    let results: Vec<Result<(Counter, Counter)>> = if cfg.parallel {
        levels
            .par_iter_mut()
            .zip(kernels.par_iter_mut())
            .enumerate()
            .map(run)
            .collect()
    } else {
        levels.iter_mut().zip(kernels.iter_mut()).enumerate().map(run).collect()
    };
    for (ell, r) in results.into_iter().enumerate() {
        let (w, l) = r?;
        stats.within[ell].merge(&w);
        stats.leap.merge(&l);
    }

    if n == 0 {
        return Ok(());
    }
    let mut rng = stream(seed, StreamKind::Swap, 0, sweep);
    let s = cfg.s.unwrap_or(n);
    for i in 0..s {
        let k = match cfg.swap_selection {
            SwapSelection::Uniform => rng.random_range(0..n),
            SwapSelection::EvenOdd => {
                let parity = (sweep as usize + i) % 2;
                let slots = (n + 1 - parity) / 2;
                if slots == 0 {
                    continue;
                }
                parity + 2 * rng.random_range(0..slots)
            }
        };
        let use_quanta = targets[k].registry().is_some() && rng.random::<f64>() < cfg.quanta_prob;
        if use_quanta {
            let out = quanta_swap(levels, k, targets, &mut rng)?;
            stats.quanta[k].record(out.decision);
            stats.quanta_allocation_rejects += out.allocation_changed as u64;
        } else {
            let out = standard_swap(levels, k, targets, &mut rng);
            stats.standard[k].record(out.decision);
        }
    }
    Ok(())
}
