//! The exploration component: a hot chain on `π^{β_hot}` whose positions seed
//! BFGS searches for new mode points.

use std::io::Write;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{rwm_step, ChainPoint, Decision, LevelKernel, Preconditioner, RwmConfig, StepTuner};
use crate::error::{Error, Result};
use crate::hat::{PowerTarget, TargetDensity};
use crate::mode_registry::{ModeInfo, ModeRegistry};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// On the infinity-norm of `∇ log π`.
    pub gradient_tolerance: f64,
    pub armijo: f64,
    pub shrink: f64,
    /// Relative finite-difference step; `None` uses the cube root of machine epsilon.
    pub finite_difference_step: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            armijo: 1e-4,
            shrink: 0.5,
            finite_difference_step: None,
        }
    }
}

impl OptimizerConfig {
    fn fd_step(&self) -> f64 {
        self.finite_difference_step.unwrap_or_else(|| f64::EPSILON.cbrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    /// Not read from config files; a run takes it from its ladder.
    #[serde(skip)]
    pub beta_hot: f64,
    /// Hot steps between optimisations are `v + 1`.
    pub v: usize,
    /// `None` uses `2.38/√(d β_hot)`.
    pub hot_step_scale: Option<f64>,
    pub hot_target_rate: f64,
    pub n_hot_chains: usize,
    /// Probability of restarting a hot chain at a registered mode before its steps.
    pub refresh_from_modes: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            beta_hot: 5e-6,
            v: 5,
            hot_step_scale: None,
            hot_target_rate: 0.234,
            n_hot_chains: 1,
            refresh_from_modes: 0.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_hot > 0.0 && self.beta_hot < 1.0) {
            return Err(Error::Config(format!("beta_hot must lie in (0,1), got {}", self.beta_hot)));
        }
        if self.n_hot_chains == 0 {
            return Err(Error::Config("n_hot_chains must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.refresh_from_modes) {
            return Err(Error::Config("refresh_from_modes must be a probability".into()));
        }
        let o = &self.optimizer;
        if o.max_iterations == 0 || !(o.gradient_tolerance > 0.0) || !(o.armijo > 0.0) || !(o.shrink > 0.0 && o.shrink < 1.0) {
            return Err(Error::Config("optimizer settings must be positive (shrink in (0,1))".into()));
        }
        Ok(())
    }

    pub fn hot_kernel(&self, dim: usize) -> LevelKernel {
        LevelKernel {
            rwm: RwmConfig {
                step_scale: self
                    .hot_step_scale
                    .unwrap_or_else(|| 2.38 / (dim as f64 * self.beta_hot).sqrt()),
                preconditioner: Preconditioner::None,
            },
            tuner: StepTuner::new(self.hot_target_rate),
        }
    }
}

/// One Metropolis step of the hot chain on `β_hot log π`.
pub fn hot_step<R: Rng + ?Sized>(
    point: &mut ChainPoint,
    target: &PowerTarget,
    rwm: &RwmConfig,
    rng: &mut R,
) -> Decision {
    rwm_step(point, target, rwm, rng)
}

/// `∇ log π`, analytic when available, otherwise central differences.
pub fn gradient(base: &dyn TargetDensity, x: &[f64], rel_step: f64) -> DVector<f64> {
    if let Some(g) = base.gradient(x) {
        return g;
    }
    let mut xp = x.to_vec();
    DVector::from_fn(x.len(), |i, _| {
        let h = rel_step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = base.log_density(&xp);
        xp[i] = x[i] - h;
        let fm = base.log_density(&xp);
        xp[i] = x[i];
        (fp - fm) / (2.0 * h)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub mu: DVector<f64>,
    pub log_pi: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// BFGS ascent on `log π` with Armijo backtracking.
pub fn local_optimize(x0: &[f64], base: &dyn TargetDensity, cfg: &OptimizerConfig) -> Result<OptimResult> {
    let d = x0.len();
    let h = cfg.fd_step();
    let mut x = DVector::from_row_slice(x0);
    let mut f = -base.log_density(x0);
    if !f.is_finite() {
        return Err(Error::InvalidArgument("log-density is not finite at the optimiser start".into()));
    }
    let mut g = -gradient(base, x.as_slice(), h);
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut fresh = true;
    for it in 0..cfg.max_iterations {
        let gnorm = g.amax();
        if gnorm < cfg.gradient_tolerance {
            return Ok(OptimResult {
                mu: x,
                log_pi: -f,
                converged: true,
                iterations: it,
                gradient_norm: gnorm,
            });
        }
        let mut p = -(&hinv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(d, d);
            fresh = true;
            p = -&g;
            slope = g.dot(&p);
        }
        if fresh {
            // keep the first trial step at unit length
            let pn = p.norm();
            if pn > 1.0 {
                p /= pn;
                slope /= pn;
            }
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let xn = &x + &p * alpha;
            let fn_ = -base.log_density(xn.as_slice());
            if fn_.is_finite() && fn_ <= f + cfg.armijo * alpha * slope {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= cfg.shrink;
        }
        let Some((xn, fn_)) = accepted else {
            debug!("line search failed at iteration {it}");
            return Ok(OptimResult {
                mu: x,
                log_pi: -f,
                converged: false,
                iterations: it,
                gradient_norm: gnorm,
            });
        };
        let gn = -gradient(base, xn.as_slice(), h);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = xn;
        f = fn_;
        g = gn;
    }
    let gnorm = g.amax();
    Ok(OptimResult {
        mu: x,
        log_pi: -f,
        converged: gnorm < cfg.gradient_tolerance,
        iterations: cfg.max_iterations,
        gradient_norm: gnorm,
    })
}

/// Hessian of `log π` at `mu`: analytic, else central differences of the
/// gradient, else second differences of the density; symmetrised.
pub fn hessian_at(base: &dyn TargetDensity, mu: &[f64], rel_step: Option<f64>) -> Result<DMatrix<f64>> {
    let d = mu.len();
    let mut hess = if let Some(h) = base.hessian(mu) {
        h
    } else if base.gradient(mu).is_some() {
        let step = rel_step.unwrap_or_else(|| f64::EPSILON.cbrt());
        let mut x = mu.to_vec();
        let mut h = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let hj = step * mu[j].abs().max(1.0);
            x[j] = mu[j] + hj;
            let gp = base.gradient(&x).expect("gradient availability changed");
            x[j] = mu[j] - hj;
            let gm = base.gradient(&x).expect("gradient availability changed");
            x[j] = mu[j];
            h.set_column(j, &((gp - gm) / (2.0 * hj)));
        }
        h
    } else {
        let step = rel_step.unwrap_or_else(|| f64::EPSILON.powf(0.25));
        let hs: Vec<f64> = mu.iter().map(|m| step * m.abs().max(1.0)).collect();
        let f0 = base.log_density(mu);
        let mut x = mu.to_vec();
        let mut h = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            x[i] = mu[i] + hs[i];
            let fp = base.log_density(&x);
            x[i] = mu[i] - hs[i];
            let fm = base.log_density(&x);
            x[i] = mu[i];
            h[(i, i)] = (fp - 2.0 * f0 + fm) / (hs[i] * hs[i]);
            for j in 0..i {
                let mut e = |si: f64, sj: f64| {
                    x[i] = mu[i] + si * hs[i];
                    x[j] = mu[j] + sj * hs[j];
                    let v = base.log_density(&x);
                    x[i] = mu[i];
                    x[j] = mu[j];
                    v
                };
                let v = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * hs[i] * hs[j]);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        h
    };
    hess = (&hess + hess.transpose()) * 0.5;
    let bad: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .filter(|&(i, j)| !hess[(i, j)].is_finite())
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteHessian { indices: bad });
    }
    Ok(hess)
}

/// One line of the mode-discovery log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRecord {
    pub sweep: u64,
    /// Cumulative hot-chain iterations of the chain that produced the candidate.
    pub iteration: u64,
    pub found_new: bool,
    pub log_pi_at_mode: f64,
    pub min_pseudo_distance: f64,
}

pub fn write_discovery_log<W: Write>(records: &[DiscoveryRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep", "iteration", "found_new", "log_pi_at_mode", "min_pseudo_distance"])?;
    for r in records {
        w.write_record([
            r.sweep.to_string(),
            r.iteration.to_string(),
            r.found_new.to_string(),
            r.log_pi_at_mode.to_string(),
            r.min_pseudo_distance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A hot chain with its kernel and counters.
#[derive(Debug, Clone)]
pub struct HotChain {
    pub point: ChainPoint,
    pub kernel: LevelKernel,
    pub iterations: u64,
    pub proposed: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MfindOutcome {
    pub found_new: bool,
    pub records: Vec<DiscoveryRecord>,
}

enum Candidate {
    Mode(ModeInfo),
    Rejected(String),
}

#[allow(clippy::too_many_arguments)]
fn advance_and_search(
    idx: usize,
    chain: &mut HotChain,
    hot: &PowerTarget,
    registry: &ModeRegistry,
    base: &dyn TargetDensity,
    cfg: &ExplorationConfig,
    seed: u64,
    sweep: u64,
) -> Candidate {
    let mut rng = stream(seed, StreamKind::Explore, idx, sweep);
    if cfg.refresh_from_modes > 0.0 && !registry.is_empty() && rng.random::<f64>() < cfg.refresh_from_modes {
        let j = rng.random_range(0..registry.len());
        chain.point = ChainPoint::new(registry.mode(j).mu().as_slice().to_vec(), hot);
    }
    for _ in 0..=cfg.v {
        let d = hot_step(&mut chain.point, hot, &chain.kernel.rwm, &mut rng);
        chain.kernel.tuner.update(&mut chain.kernel.rwm, d.accepted);
        chain.iterations += 1;
        chain.proposed += 1;
        chain.accepted += d.accepted as u64;
    }
    let start_lp = base.log_density(&chain.point.x);
    let opt = match local_optimize(&chain.point.x, base, &cfg.optimizer) {
        Ok(o) => o,
        Err(e) => return Candidate::Rejected(e.to_string()),
    };
    if !opt.converged {
        return Candidate::Rejected(format!(
            "optimiser did not converge after {} iterations (|grad| = {:.3e})",
            opt.iterations, opt.gradient_norm
        ));
    }
    debug_assert!(opt.log_pi >= start_lp);
    let hess = match hessian_at(base, opt.mu.as_slice(), cfg.optimizer.finite_difference_step) {
        Ok(h) => h,
        Err(e) => return Candidate::Rejected(e.to_string()),
    };
    match ModeInfo::from_hessian(opt.mu, &hess, opt.log_pi) {
        Ok(m) => Candidate::Mode(m),
        Err(e) => Candidate::Rejected(e.to_string()),
    }
}

/// One exploration step for every hot chain: `v + 1` hot moves, BFGS from the
/// final point, Hessian, and a dedup-checked insertion.
///
/// Chains run in parallel; candidates are inserted in chain order so the
/// outcome does not depend on scheduling.
pub fn mfind(
    chains: &mut [HotChain],
    hot: &PowerTarget,
    registry: &mut ModeRegistry,
    base: &dyn TargetDensity,
    cfg: &ExplorationConfig,
    seed: u64,
    sweep: u64,
) -> Result<MfindOutcome> {
    let snapshot = &*registry;
    let candidates: Vec<Candidate> = if chains.len() > 1 {
        chains
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| advance_and_search(i, c, hot, snapshot, base, cfg, seed, sweep))
            .collect()
    } else {
        chains
            .iter_mut()
            .enumerate()
            .map(|(i, c)| advance_and_search(i, c, hot, snapshot, base, cfg, seed, sweep))
            .collect()
    };
    let mut out = MfindOutcome::default();
    for (chain, cand) in chains.iter().zip(candidates) {
        match cand {
            Candidate::Mode(m) => {
                let lp = m.log_pi_at_mode();
                let ins = registry.try_insert(m)?;
                if ins.inserted {
                    debug!("sweep {sweep}: new mode with log pi {lp:.4}");
                }
                out.found_new |= ins.inserted;
                out.records.push(DiscoveryRecord {
                    sweep,
                    iteration: chain.iterations,
                    found_new: ins.inserted,
                    log_pi_at_mode: lp,
                    min_pseudo_distance: ins.min_distance,
                });
            }
            Candidate::Rejected(why) => warn!("sweep {sweep}: mode candidate discarded: {why}"),
        }
    }
    Ok(out)
}

/// Hot chains started at `x0`.
pub fn init_hot_chains(x0: &[f64], hot: &PowerTarget, cfg: &ExplorationConfig) -> Vec<HotChain> {
    (0..cfg.n_hot_chains)
        .map(|_| HotChain {
            point: ChainPoint::new(x0.to_vec(), hot),
            kernel: cfg.hot_kernel(x0.len()),
            iterations: 0,
            proposed: 0,
            accepted: 0,
        })
        .collect()
}

/// Power target for the hot chain.
pub fn hot_target(base: Arc<dyn TargetDensity>, cfg: &ExplorationConfig) -> Result<PowerTarget> {
    cfg.validate()?;
    PowerTarget::new(base, cfg.beta_hot)
}
