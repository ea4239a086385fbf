//! Posterior sampling by Hamiltonian Monte Carlo with NUTS.
//!
//! The likelihood is Gaussian per observed channel with covariance
//! `sigma_meas^2 I + Sigma_ROM`, where `Sigma_ROM` is the Gram matrix of an
//! exponentiated quadratic kernel modeling the correlated reduced-order
//! approximation error. Channel covariances are factorized once (Cholesky)
//! and reused for every density evaluation; the density gradient rides the
//! adjoint engine with the per-sample weights `Sigma^{-1} r`.
//!
//! The sampler is multinomial NUTS with tree doubling, a generalized U-turn
//! criterion, divergence detection at an energy error of 1000, optional
//! dual-averaging step-size adaptation and windowed diagonal mass-matrix
//! adaptation during warmup. Bounded posteriors sample in logit-transformed
//! coordinates so every draw stays strictly inside the prior box.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_gradient, CoupledSensitivity, Protocol, TraceObjective};
use crate::error::{Error, Result};
use crate::map_estimate::BoxTransform;
use crate::ode::SolverConfig;
use crate::qoi::ChannelId;

/// Published reduced-order-model error amplitudes per channel (mL for
/// volumes, mmHg for the arterial pressure).
pub fn rom_sigma(ch: ChannelId) -> f64 {
    match ch {
        ChannelId::VLa => 0.79,
        ChannelId::VLv => 0.80,
        ChannelId::VRa => 0.07,
        ChannelId::VRv => 0.12,
        ChannelId::PArSys => 0.54,
        // chamber pressures are not part of the published set; reuse the
        // arterial amplitude as a conservative stand-in
        _ => 0.54,
    }
}

/// Published kernel correlation length (s).
pub const ROM_LAMBDA: f64 = 0.04;

/// Relative jitter added to kernel diagonals before factorization.
///
/// Acts as a noise floor: the exponentiated quadratic Gram matrix has a
/// super-exponentially decaying spectrum, and with no measurement noise the
/// inverse would amplify integrator-level trace wiggle (~1e-4 of signal at
/// default tolerances) by ten orders of magnitude into the log-density.
/// 1e-6 of the squared amplitude caps those weights while leaving the
/// smooth (informative) directions untouched.
const KERNEL_JITTER: f64 = 1e-6;

/// Gram matrix of the exponentiated quadratic kernel on a sample grid.
pub fn rom_error_covariance(grid: &[f64], sigma: f64, lambda: f64) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |j, k| {
        let d = grid[j] - grid[k];
        sigma * sigma * (-d * d / (2.0 * lambda * lambda)).exp()
    })
}

/// One channel's factorized covariance.
pub struct ChannelCovariance {
    pub id: ChannelId,
    pub sigma_meas: f64,
    pub sigma_rom: f64,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    n: usize,
}

impl ChannelCovariance {
    /// Quadratic form `r^T Sigma^{-1} r`.
    pub fn quadratic_form(&self, r: &[f64]) -> f64 {
        let v = DVector::from_column_slice(r);
        let w = self.chol.solve(&v);
        v.dot(&w)
    }

    /// `Sigma^{-1} r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(r);
        self.chol.solve(&v).as_slice().to_vec()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }
}

/// Per-channel full covariances `sigma_meas^2 I + Sigma_ROM` with their
/// factorizations.
pub struct CovarianceModel {
    pub channels: Vec<ChannelCovariance>,
}

impl CovarianceModel {
    /// Builds covariances for `channels` on `grid`. `sigma_meas` is in the
    /// channel's own units (the SNR protocol uses the same numeric value
    /// for pressures and volumes).
    pub fn build(
        channels: &[ChannelId],
        grid: &[f64],
        sigma_meas: f64,
        lambda: f64,
    ) -> Result<CovarianceModel> {
        CovarianceModel::build_with_jitter(channels, grid, sigma_meas, lambda, KERNEL_JITTER)
    }

    /// [`CovarianceModel::build`] with an explicit relative jitter.
    pub fn build_with_jitter(
        channels: &[ChannelId],
        grid: &[f64],
        sigma_meas: f64,
        lambda: f64,
        jitter: f64,
    ) -> Result<CovarianceModel> {
        if !(lambda > 0.0) {
            return Err(Error::config("kernel correlation length must be positive"));
        }
        let mut out = Vec::with_capacity(channels.len());
        for &ch in channels {
            let sigma = rom_sigma(ch);
            let mut m = rom_error_covariance(grid, sigma, lambda);
            let diag_add = sigma_meas * sigma_meas + jitter * sigma * sigma;
            for i in 0..grid.len() {
                m[(i, i)] += diag_add;
            }
            let chol = Cholesky::new(m).ok_or(Error::CovarianceNotPositiveDefinite {
                channel: ch.name().to_string(),
            })?;
            let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            out.push(ChannelCovariance {
                id: ch,
                sigma_meas,
                sigma_rom: sigma,
                chol,
                logdet,
                n: grid.len(),
            });
        }
        Ok(CovarianceModel { channels: out })
    }
}

/// Negative log-likelihood of the observed traces as a trace objective
/// (the likelihood part of the HMC potential energy). Channel order must
/// match the model adapter's observable order.
pub struct GaussianPotential {
    pub obs: Vec<Vec<f64>>,
    pub cov: CovarianceModel,
}

impl GaussianPotential {
    pub fn new(obs: Vec<Vec<f64>>, cov: CovarianceModel) -> Result<GaussianPotential> {
        if obs.len() != cov.channels.len() {
            return Err(Error::DimensionMismatch {
                expected: cov.channels.len(),
                got: obs.len(),
            });
        }
        for (trace, ch) in obs.iter().zip(&cov.channels) {
            if trace.len() != ch.n {
                return Err(Error::GridMismatch(format!(
                    "channel {}: {} observation samples vs {} covariance rows",
                    ch.id.name(),
                    trace.len(),
                    ch.n
                )));
            }
        }
        Ok(GaussianPotential { obs, cov })
    }
}

impl TraceObjective for GaussianPotential {
    fn value(&self, sim: &[Vec<f64>]) -> Result<f64> {
        let mut u = 0.0;
        for (c, ch) in self.cov.channels.iter().enumerate() {
            let r: Vec<f64> = sim[c].iter().zip(&self.obs[c]).map(|(a, b)| a - b).collect();
            u += 0.5 * ch.quadratic_form(&r)
                + 0.5 * ch.logdet()
                + 0.5 * ch.n as f64 * (2.0 * std::f64::consts::PI).ln();
        }
        Ok(u)
    }

    fn sample_gradient(&self, sim: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(sim.len());
        for (c, ch) in self.cov.channels.iter().enumerate() {
            let r: Vec<f64> = sim[c].iter().zip(&self.obs[c]).map(|(a, b)| a - b).collect();
            out.push(ch.solve(&r));
        }
        Ok(out)
    }
}

/// Log-posterior (up to the uniform-prior constant) and its gradient at a
/// parameter point inside the prior box; `-inf` outside.
pub fn log_posterior(
    sys: &mut CoupledSensitivity,
    potential: &GaussianPotential,
    prior_lo: &[f64],
    prior_hi: &[f64],
    protocol: &Protocol,
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    let theta = crate::adjoint::SensitivityModel::theta(sys);
    for i in 0..theta.len() {
        if theta[i] < prior_lo[i] || theta[i] > prior_hi[i] {
            return Ok((f64::NEG_INFINITY, vec![0.0; theta.len()]));
        }
    }
    let res = adjoint_gradient(sys, potential, protocol, cfg)?;
    Ok((-res.value, res.gradient.iter().map(|g| -g).collect()))
}

/// A log-density with gradient, the sampler's target.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn logp_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Diagonal-mass momentum settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumConfig {
    pub mass_diag: Vec<f64>,
    pub step_size: f64,
    pub max_depth: usize,
}

impl MomentumConfig {
    pub fn unit(dim: usize) -> MomentumConfig {
        MomentumConfig {
            mass_diag: vec![1.0; dim],
            step_size: 1e-3,
            max_depth: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mass_diag.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::config("mass matrix diagonal must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::config("leapfrog step must be positive"));
        }
        Ok(())
    }
}

/// One leapfrog step (half-kick, drift, half-kick) under `H = U + K`,
/// `K = rho^T M^{-1} rho / 2`. Returns the new point, momentum and cached
/// gradient of `U` there. Non-finite gradients surface as errors and flag a
/// divergent transition upstream.
pub fn leapfrog<F>(
    theta: &[f64],
    rho: &[f64],
    dt: f64,
    grad_u: &mut F,
    mass_diag: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + ?Sized,
{
    let (_, g0) = grad_u(theta)?;
    let mut rho_half: Vec<f64> = rho.iter().zip(&g0).map(|(r, g)| r - 0.5 * dt * g).collect();
    let theta_new: Vec<f64> = theta
        .iter()
        .zip(&rho_half)
        .zip(mass_diag)
        .map(|((t, r), m)| t + dt * r / m)
        .collect();
    let (u_new, g_new) = grad_u(&theta_new)?;
    for (r, g) in rho_half.iter_mut().zip(&g_new) {
        *r -= 0.5 * dt * g;
    }
    if theta_new.iter().chain(rho_half.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("leapfrog state"));
    }
    Ok((theta_new, rho_half, g_new, u_new))
}

/// Sampler options. Defaults follow the estimation protocol: 750 iterations
/// with a 250-iteration warmup and a fixed 1e-3 leapfrog step; step-size
/// dual averaging and diagonal mass adaptation are opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutsConfig {
    pub iters: usize,
    pub warmup: usize,
    pub step_size: f64,
    pub adapt_step: bool,
    pub adapt_mass: bool,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            iters: 750,
            warmup: 250,
            step_size: 1e-3,
            adapt_step: false,
            adapt_mass: false,
            target_accept: 0.8,
            max_depth: 10,
            seed: 0,
        }
    }
}

/// Retained draws with diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// Post-warmup draws, one row per iteration.
    pub draws: Vec<Vec<f64>>,
    pub logp: Vec<f64>,
    pub warmup: usize,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub accept_mean: f64,
    pub max_depth_hits: usize,
    pub step_size_final: f64,
    pub mass_diag: Vec<f64>,
    pub rhat: Vec<f64>,
}

const DIVERGENCE_ENERGY: f64 = 1000.0;

struct Tree {
    theta_minus: Vec<f64>,
    rho_minus: Vec<f64>,
    grad_minus: Vec<f64>,
    theta_plus: Vec<f64>,
    rho_plus: Vec<f64>,
    grad_plus: Vec<f64>,
    proposal: Vec<f64>,
    proposal_logp: f64,
    proposal_grad: Vec<f64>,
    log_weight: f64,
    sum_accept: f64,
    n_leapfrog: usize,
    turning: bool,
    diverged: bool,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn uturn(
    theta_minus: &[f64],
    theta_plus: &[f64],
    rho_minus: &[f64],
    rho_plus: &[f64],
    mass: &[f64],
) -> bool {
    let mut dot_minus = 0.0;
    let mut dot_plus = 0.0;
    for i in 0..theta_minus.len() {
        let dx = theta_plus[i] - theta_minus[i];
        dot_minus += dx * rho_minus[i] / mass[i];
        dot_plus += dx * rho_plus[i] / mass[i];
    }
    dot_minus < 0.0 || dot_plus < 0.0
}

struct NutsState<'a, T: LogDensity> {
    target: &'a mut T,
    mass: Vec<f64>,
    step: f64,
    rng: ChaCha12Rng,
    h0: f64,
    grad_evals: usize,
}

impl<T: LogDensity> NutsState<'_, T> {
    fn hamiltonian(&self, logp: f64, rho: &[f64]) -> f64 {
        let k: f64 = rho
            .iter()
            .zip(&self.mass)
            .map(|(r, m)| 0.5 * r * r / m)
            .sum();
        -logp + k
    }

    /// One leaf: a single leapfrog step in `direction`.
    #[allow(clippy::too_many_arguments)]
    fn leaf(
        &mut self,
        theta: &[f64],
        rho: &[f64],
        grad: &[f64],
        logp: f64,
        direction: f64,
    ) -> Result<Tree> {
        let dt = direction * self.step;
        // half-kick / drift / half-kick with the cached gradient
        let mut rho_half: Vec<f64> = rho
            .iter()
            .zip(grad)
            .map(|(r, g)| r + 0.5 * dt * g) // grad of logp = -grad U
            .collect();
        let theta_new: Vec<f64> = theta
            .iter()
            .zip(&rho_half)
            .zip(&self.mass)
            .map(|((t, r), m)| t + dt * r / m)
            .collect();
        self.grad_evals += 1;
        let (logp_new, grad_new) = match self.target.logp_grad(&theta_new) {
            Ok(v) if v.0.is_finite() => v,
            _ => {
                // unrecoverable density evaluation: divergent leaf
                return Ok(Tree {
                    theta_minus: theta_new.clone(),
                    rho_minus: rho_half.clone(),
                    grad_minus: vec![0.0; theta.len()],
                    theta_plus: theta_new.clone(),
                    rho_plus: rho_half,
                    grad_plus: vec![0.0; theta.len()],
                    proposal: theta_new,
                    proposal_logp: f64::NEG_INFINITY,
                    proposal_grad: vec![0.0; theta.len()],
                    log_weight: f64::NEG_INFINITY,
                    sum_accept: 0.0,
                    n_leapfrog: 1,
                    turning: false,
                    diverged: true,
                });
            }
        };
        for (r, g) in rho_half.iter_mut().zip(&grad_new) {
            *r += 0.5 * dt * g;
        }
        let h_new = self.hamiltonian(logp_new, &rho_half);
        let energy_error = h_new - self.h0;
        let diverged = !h_new.is_finite() || energy_error > DIVERGENCE_ENERGY;
        let _ = logp;
        Ok(Tree {
            theta_minus: theta_new.clone(),
            rho_minus: rho_half.clone(),
            grad_minus: grad_new.clone(),
            theta_plus: theta_new.clone(),
            rho_plus: rho_half,
            grad_plus: grad_new.clone(),
            proposal: theta_new,
            proposal_logp: logp_new,
            proposal_grad: grad_new,
            log_weight: if diverged { f64::NEG_INFINITY } else { -energy_error },
            sum_accept: (-energy_error).exp().min(1.0),
            n_leapfrog: 1,
            turning: false,
            diverged,
        })
    }

    /// Builds a subtree of `depth` doublings starting from one end.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        theta: &[f64],
        rho: &[f64],
        grad: &[f64],
        logp: f64,
        direction: f64,
        depth: usize,
    ) -> Result<Tree> {
        if depth == 0 {
            return self.leaf(theta, rho, grad, logp, direction);
        }
        let mut first = self.build(theta, rho, grad, logp, direction, depth - 1)?;
        if first.turning || first.diverged {
            return Ok(first);
        }
        let second = if direction > 0.0 {
            self.build(
                &first.theta_plus.clone(),
                &first.rho_plus.clone(),
                &first.grad_plus.clone(),
                first.proposal_logp,
                direction,
                depth - 1,
            )?
        } else {
            self.build(
                &first.theta_minus.clone(),
                &first.rho_minus.clone(),
                &first.grad_minus.clone(),
                first.proposal_logp,
                direction,
                depth - 1,
            )?
        };

        let total = log_add_exp(first.log_weight, second.log_weight);
        // multinomial sampling within the subtree
        if (self.rng.gen::<f64>().ln()) < second.log_weight - total {
            first.proposal = second.proposal.clone();
            first.proposal_logp = second.proposal_logp;
            first.proposal_grad = second.proposal_grad.clone();
        }
        if direction > 0.0 {
            first.theta_plus = second.theta_plus;
            first.rho_plus = second.rho_plus;
            first.grad_plus = second.grad_plus;
        } else {
            first.theta_minus = second.theta_minus;
            first.rho_minus = second.rho_minus;
            first.grad_minus = second.grad_minus;
        }
        first.log_weight = total;
        first.sum_accept += second.sum_accept;
        first.n_leapfrog += second.n_leapfrog;
        first.diverged = second.diverged;
        first.turning = second.turning
            || uturn(
                &first.theta_minus,
                &first.theta_plus,
                &first.rho_minus,
                &first.rho_plus,
                &self.mass,
            );
        Ok(first)
    }
}

/// Stan-style initial step-size search: double/halve until the acceptance
/// probability of a single leapfrog step crosses one half.
fn find_reasonable_step<T: LogDensity>(
    state: &mut NutsState<'_, T>,
    theta: &[f64],
    logp: f64,
    grad: &[f64],
    step0: f64,
) -> Result<f64> {
    let dim = theta.len();
    let rho: Vec<f64> = state
        .mass
        .iter()
        .map(|m| sample_standard_normal(&mut state.rng) * m.sqrt())
        .collect();
    let h0 = state.hamiltonian(logp, &rho);
    let mut step = step0;
    let mut direction: Option<bool> = None;
    for _ in 0..60 {
        // one leapfrog at the trial step
        let mut rho_half: Vec<f64> = rho.iter().zip(grad).map(|(r, g)| r + 0.5 * step * g).collect();
        let theta_new: Vec<f64> = theta
            .iter()
            .zip(&rho_half)
            .zip(&state.mass)
            .map(|((t, r), m)| t + step * r / m)
            .collect();
        state.grad_evals += 1;
        let delta_h = match state.target.logp_grad(&theta_new) {
            Ok((lp, g)) if lp.is_finite() => {
                for (r, gi) in rho_half.iter_mut().zip(&g) {
                    *r += 0.5 * step * gi;
                }
                state.hamiltonian(lp, &rho_half) - h0
            }
            _ => f64::INFINITY,
        };
        let grow = delta_h < std::f64::consts::LN_2; // accept prob > 1/2
        match direction {
            None => direction = Some(grow),
            Some(d) if d != grow => return Ok(step.clamp(1e-12, 1e3)),
            _ => {}
        }
        step *= if grow { 2.0 } else { 0.5 };
        if !(1e-14..=1e4).contains(&step) {
            break;
        }
    }
    let _ = dim;
    Ok(step.clamp(1e-12, 1e3))
}

/// Dual-averaging state (step-size adaptation toward a target acceptance).
struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: usize,
}

impl DualAveraging {
    fn new(eps0: f64) -> DualAveraging {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            count: 0,
        }
    }

    fn update(&mut self, accept: f64, target: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.count += 1;
        let m = self.count as f64;
        self.h_bar = (1.0 - 1.0 / (m + T0)) * self.h_bar + (target - accept) / (m + T0);
        self.log_eps = self.mu - m.sqrt() / GAMMA * self.h_bar;
        let w = m.powf(-KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }
}

/// Welford accumulator for the mass-matrix windows.
struct RunningVar {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVar {
    fn new(dim: usize) -> RunningVar {
        RunningVar {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n as f64;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate (Stan-style shrinkage toward 1e-3).
    fn variance(&self) -> Option<Vec<f64>> {
        if self.n < 5 {
            return None;
        }
        let n = self.n as f64;
        Some(
            self.m2
                .iter()
                .map(|m2| (n / ((n - 1.0) * (n + 5.0))) * m2 * (n - 1.0) / n * (n + 5.0) / n
                    * (n / (n + 5.0))
                    + 1e-3 * (5.0 / (n + 5.0)))
                .collect(),
        )
    }
}

/// Runs NUTS from `x0`. Retains `iters - warmup` draws; deterministic for a
/// fixed seed.
pub fn nuts_sample<T: LogDensity>(
    target: &mut T,
    x0: &[f64],
    names: Vec<String>,
    cfg: &NutsConfig,
) -> Result<PosteriorSamples> {
    if cfg.warmup >= cfg.iters {
        return Err(Error::config("warmup must be below the iteration count"));
    }
    let dim = target.dim();
    let (logp0, grad0) = target.logp_grad(x0)?;
    if !logp0.is_finite() {
        return Err(Error::config(
            "the chain must start inside the posterior support",
        ));
    }

    let mut state = NutsState {
        target,
        mass: vec![1.0; dim],
        step: cfg.step_size,
        rng: ChaCha12Rng::seed_from_u64(cfg.seed),
        h0: 0.0,
        grad_evals: 0,
    };
    let mut theta = x0.to_vec();
    let mut logp = logp0;
    let mut grad = grad0;

    if cfg.adapt_step {
        state.step = find_reasonable_step(&mut state, &theta, logp, &grad, cfg.step_size)?;
    }
    let mut dual = DualAveraging::new(state.step);
    // Stan-style windows: settle, then doubling variance windows, then a
    // final step-size-only buffer.
    let init_buffer = (cfg.warmup / 10).clamp(10, 75);
    let term_buffer = (cfg.warmup / 5).clamp(10, 50);
    let mut window_end = init_buffer + 25;
    let mut var_acc = RunningVar::new(dim);

    let retained = cfg.iters - cfg.warmup;
    let mut draws = Vec::with_capacity(retained);
    let mut logps = Vec::with_capacity(retained);
    let mut divergences = 0usize;
    let mut warmup_divergences = 0usize;
    let mut accept_sum = 0.0;
    let mut accept_n = 0usize;
    let mut max_depth_hits = 0usize;
    let mut all_divergent = true;

    for iter in 0..cfg.iters {
        // fresh momentum
        let rho: Vec<f64> = state
            .mass
            .iter()
            .map(|m| {
                let z: f64 = sample_standard_normal(&mut state.rng);
                z * m.sqrt()
            })
            .collect();
        state.h0 = state.hamiltonian(logp, &rho);

        let mut tree = Tree {
            theta_minus: theta.clone(),
            rho_minus: rho.clone(),
            grad_minus: grad.clone(),
            theta_plus: theta.clone(),
            rho_plus: rho.clone(),
            grad_plus: grad.clone(),
            proposal: theta.clone(),
            proposal_logp: logp,
            proposal_grad: grad.clone(),
            log_weight: 0.0,
            sum_accept: 0.0,
            n_leapfrog: 0,
            turning: false,
            diverged: false,
        };

        let mut depth = 0usize;
        let mut diverged_this_iter = false;
        while depth < cfg.max_depth {
            let direction: f64 = if state.rng.gen::<bool>() { 1.0 } else { -1.0 };
            let sub = if direction > 0.0 {
                state.build(
                    &tree.theta_plus.clone(),
                    &tree.rho_plus.clone(),
                    &tree.grad_plus.clone(),
                    tree.proposal_logp,
                    direction,
                    depth,
                )?
            } else {
                state.build(
                    &tree.theta_minus.clone(),
                    &tree.rho_minus.clone(),
                    &tree.grad_minus.clone(),
                    tree.proposal_logp,
                    direction,
                    depth,
                )?
            };
            tree.n_leapfrog += sub.n_leapfrog;
            tree.sum_accept += sub.sum_accept;
            if sub.diverged {
                diverged_this_iter = true;
                break;
            }
            if sub.turning {
                break;
            }
            // progressive (biased) sampling across the doubling
            let accept_prob = (sub.log_weight - tree.log_weight).exp().min(1.0);
            if state.rng.gen::<f64>() < accept_prob {
                tree.proposal = sub.proposal.clone();
                tree.proposal_logp = sub.proposal_logp;
                tree.proposal_grad = sub.proposal_grad.clone();
            }
            if direction > 0.0 {
                tree.theta_plus = sub.theta_plus;
                tree.rho_plus = sub.rho_plus;
                tree.grad_plus = sub.grad_plus;
            } else {
                tree.theta_minus = sub.theta_minus;
                tree.rho_minus = sub.rho_minus;
                tree.grad_minus = sub.grad_minus;
            }
            tree.log_weight = log_add_exp(tree.log_weight, sub.log_weight);
            if uturn(
                &tree.theta_minus,
                &tree.theta_plus,
                &tree.rho_minus,
                &tree.rho_plus,
                &state.mass,
            ) {
                break;
            }
            depth += 1;
        }
        if depth == cfg.max_depth {
            max_depth_hits += 1;
        }

        let accept_stat = if tree.n_leapfrog > 0 {
            tree.sum_accept / tree.n_leapfrog as f64
        } else {
            0.0
        };

        all_divergent &= diverged_this_iter;

        theta = tree.proposal;
        logp = tree.proposal_logp;
        grad = tree.proposal_grad;

        if iter < cfg.warmup {
            if diverged_this_iter {
                warmup_divergences += 1;
            }
            if cfg.adapt_step {
                dual.update(accept_stat, cfg.target_accept);
                state.step = dual.log_eps.exp().clamp(1e-10, 1e3);
            }
            let adapt_end = cfg.warmup.saturating_sub(term_buffer);
            if cfg.adapt_mass && iter >= init_buffer && iter < adapt_end {
                var_acc.push(&theta);
            }
            // window boundaries restart dual averaging so the frozen step
            // reflects the final geometry, not the initial transient
            let boundary = iter + 1 == init_buffer || iter + 1 == window_end.min(adapt_end);
            if boundary && iter + 1 <= adapt_end {
                if cfg.adapt_mass && iter + 1 == window_end.min(adapt_end) {
                    if let Some(var) = var_acc.variance() {
                        state.mass = var.iter().map(|v| 1.0 / v.max(1e-12)).collect();
                    }
                    var_acc = RunningVar::new(dim);
                    window_end = init_buffer + 2 * (window_end - init_buffer);
                }
                if cfg.adapt_step {
                    dual = DualAveraging::new(state.step);
                }
            }
            if iter + 1 == cfg.warmup && cfg.adapt_step {
                state.step = dual.log_eps_bar.exp().clamp(1e-10, 1e3);
            }
        } else {
            if diverged_this_iter {
                divergences += 1;
            }
            accept_sum += accept_stat;
            accept_n += 1;
            draws.push(theta.clone());
            logps.push(logp);
        }
    }

    if all_divergent {
        return Err(Error::DivergentStart);
    }

    let rhat = gelman_rubin_draws(&draws);
    Ok(PosteriorSamples {
        names,
        draws,
        logp: logps,
        warmup: cfg.warmup,
        divergences,
        warmup_divergences,
        accept_mean: if accept_n > 0 {
            accept_sum / accept_n as f64
        } else {
            0.0
        },
        max_depth_hits,
        step_size_final: state.step,
        mass_diag: state.mass,
        rhat,
    })
}

fn sample_standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms per normal keeps the stream simple
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Split-Rhat of a single chain: the retained draws are halved and treated
/// as two chains.
pub fn gelman_rubin_draws(draws: &[Vec<f64>]) -> Vec<f64> {
    if draws.len() < 4 {
        return vec![f64::NAN; draws.first().map_or(0, Vec::len)];
    }
    let p = draws[0].len();
    let n = draws.len() / 2;
    (0..p)
        .map(|j| {
            let a: Vec<f64> = draws[..n].iter().map(|d| d[j]).collect();
            let b: Vec<f64> = draws[draws.len() - n..].iter().map(|d| d[j]).collect();
            let mean_a = a.iter().sum::<f64>() / n as f64;
            let mean_b = b.iter().sum::<f64>() / n as f64;
            let w = 0.5 * (variance(&a) + variance(&b));
            let grand = 0.5 * (mean_a + mean_b);
            let bn = (mean_a - grand).powi(2) + (mean_b - grand).powi(2); // B/n
            if w == 0.0 {
                if bn == 0.0 {
                    return 1.0;
                }
                return f64::INFINITY;
            }
            let v_hat = (n as f64 - 1.0) / n as f64 * w + bn;
            (v_hat / w).sqrt()
        })
        .collect()
}

/// Convergence diagnostic of retained samples.
pub fn gelman_rubin(samples: &PosteriorSamples) -> Vec<f64> {
    gelman_rubin_draws(&samples.draws)
}

/// Per-parameter summary of the retained draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Equal-tailed 90% credible interval (5th and 95th percentiles).
    pub ci90: Vec<(f64, f64)>,
    pub correlation: Vec<Vec<f64>>,
    pub rhat: Vec<f64>,
    pub divergences: usize,
    pub n_draws: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Sample moments, credible intervals and the Pearson correlation matrix.
pub fn posterior_summary(samples: &PosteriorSamples) -> Result<PosteriorSummary> {
    if samples.draws.is_empty() {
        return Err(Error::config("no retained draws to summarize"));
    }
    let n = samples.draws.len();
    let p = samples.draws[0].len();
    let mut mean = vec![0.0; p];
    for d in &samples.draws {
        for j in 0..p {
            mean[j] += d[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![vec![0.0; p]; p];
    for d in &samples.draws {
        for j in 0..p {
            for k in j..p {
                cov[j][k] += (d[j] - mean[j]) * (d[k] - mean[k]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for j in 0..p {
        for k in j..p {
            cov[j][k] /= denom;
            cov[k][j] = cov[j][k];
        }
    }
    let std: Vec<f64> = (0..p).map(|j| cov[j][j].sqrt()).collect();
    let correlation: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            (0..p)
                .map(|k| {
                    if std[j] > 0.0 && std[k] > 0.0 {
                        cov[j][k] / (std[j] * std[k])
                    } else if j == k {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut ci90 = Vec::with_capacity(p);
    for j in 0..p {
        let mut col: Vec<f64> = samples.draws.iter().map(|d| d[j]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ci90.push((percentile(&col, 0.05), percentile(&col, 0.95)));
    }

    Ok(PosteriorSummary {
        names: samples.names.clone(),
        mean,
        std,
        ci90,
        correlation,
        rhat: samples.rhat.clone(),
        divergences: samples.divergences,
        n_draws: n,
    })
}

/// The cardiovascular posterior in logit-transformed coordinates: uniform
/// prior box intersected with the global bounds, Gaussian trace likelihood,
/// gradients through the adjoint engine.
pub struct BoundedPosterior {
    pub sys: CoupledSensitivity,
    pub potential: GaussianPotential,
    pub protocol: Protocol,
    pub solver: SolverConfig,
    transform: BoxTransform,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoundedPosterior {
    /// Prior box `theta_center ± iota*|theta_center|` intersected with the
    /// admissible bounds of the estimated parameters.
    pub fn around_map(
        sys: CoupledSensitivity,
        potential: GaussianPotential,
        theta_map: &[f64],
        iota: f64,
        protocol: Protocol,
        solver: SolverConfig,
    ) -> Result<BoundedPosterior> {
        use crate::adjoint::SensitivityModel;
        let (glo, ghi) = sys.theta_bounds();
        let mut lo = Vec::with_capacity(theta_map.len());
        let mut hi = Vec::with_capacity(theta_map.len());
        for i in 0..theta_map.len() {
            let half = iota * theta_map[i].abs();
            lo.push((theta_map[i] - half).max(glo[i]));
            hi.push((theta_map[i] + half).min(ghi[i]));
            if !(lo[i] < hi[i]) {
                return Err(Error::config(format!(
                    "empty prior box for component {i}"
                )));
            }
        }
        let transform = BoxTransform::new(&lo, &hi)?;
        Ok(BoundedPosterior {
            sys,
            potential,
            protocol,
            solver,
            transform,
            lo,
            hi,
        })
    }

    pub fn prior_box(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn to_unconstrained(&self, theta: &[f64]) -> Vec<f64> {
        self.transform.to_unconstrained(theta)
    }

    pub fn to_theta(&self, u: &[f64]) -> Vec<f64> {
        self.transform.to_bounded(u)
    }

    /// Log-posterior (likelihood only, the prior being flat) at a bounded
    /// parameter point.
    pub fn logp_theta(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        use crate::adjoint::SensitivityModel;
        self.sys.set_theta(theta)?;
        let res = adjoint_gradient(&mut self.sys, &self.potential, &self.protocol, &self.solver)?;
        Ok((-res.value, res.gradient.iter().map(|g| -g).collect()))
    }
}

impl LogDensity for BoundedPosterior {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn logp_grad(&mut self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let theta = self.transform.to_bounded(u);
        let (logp, grad_theta) = self.logp_theta(&theta)?;
        let jac = self.transform.jacobian_diag(u);
        // log|d theta/d u| terms keep the density proper in u-space
        let log_jac: f64 = jac.iter().map(|j| j.ln()).sum();
        let mut grad_u = vec![0.0; u.len()];
        for i in 0..u.len() {
            let s = 1.0 / (1.0 + (-u[i]).exp());
            grad_u[i] = grad_theta[i] * jac[i] + (1.0 - 2.0 * s);
        }
        Ok((logp + log_jac, grad_u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kernel_matrix_examples() {
        let grid: Vec<f64> = (0..81).map(|k| 3.2 + 0.01 * k as f64).collect();
        let sigma = 0.8;
        let m = rom_error_covariance(&grid, sigma, ROM_LAMBDA);
        assert_relative_eq!(m[(7, 7)], sigma * sigma, epsilon = 1e-15);
        // |t_j - t_k| = lambda -> sigma^2 e^{-1/2}
        let j = 0;
        let k = 4; // 0.04 s apart
        assert_relative_eq!(
            m[(j, k)],
            sigma * sigma * (-0.5f64).exp(),
            max_relative = 1e-12
        );
        // symmetric positive definite with the published amplitudes and
        // jitter down at 1e-10
        for ch in ChannelId::NON_INVASIVE {
            let cov = CovarianceModel::build_with_jitter(&[ch], &grid, 0.0, ROM_LAMBDA, 1e-10);
            assert!(cov.is_ok(), "channel {} not factorizable", ch.name());
        }
    }

    #[test]
    fn quadratic_form_matches_dense_solve_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let grid: Vec<f64> = (0..81).map(|k| 3.2 + 0.01 * k as f64).collect();
        let cov = CovarianceModel::build(&[ChannelId::VLv], &grid, 1.0, ROM_LAMBDA).unwrap();
        let ch = &cov.channels[0];
        for _ in 0..3 {
            let r: Vec<f64> = (0..81).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = ch.quadratic_form(&r);
            // oracle: dense LU solve on the reconstructed matrix
            let mut m = rom_error_covariance(&grid, rom_sigma(ChannelId::VLv), ROM_LAMBDA);
            for i in 0..81 {
                m[(i, i)] += 1.0 + KERNEL_JITTER * rom_sigma(ChannelId::VLv).powi(2);
            }
            // (diagonal uses the production jitter so the oracle matches)
            let lu = m.lu();
            let x = lu.solve(&DVector::from_column_slice(&r)).unwrap();
            let q_oracle = DVector::from_column_slice(&r).dot(&x);
            assert_relative_eq!(q, q_oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn diagonal_case_reduces_to_scaled_norm() {
        // With a huge measurement variance the ROM term is negligible.
        let grid: Vec<f64> = (0..50).map(|k| 0.01 * k as f64).collect();
        let sigma_meas = 1e4;
        let cov = CovarianceModel::build(&[ChannelId::PArSys], &grid, sigma_meas, ROM_LAMBDA)
            .unwrap();
        let obs = vec![vec![0.0; 50]];
        let pot = GaussianPotential::new(obs, cov).unwrap();
        let sim = vec![vec![2.0; 50]];
        let u = pot.value(&sim).unwrap();
        let norm_const: f64 = 0.5 * pot.cov.channels[0].logdet()
            + 25.0 * (2.0 * std::f64::consts::PI).ln();
        let quad = u - norm_const;
        assert_relative_eq!(
            quad,
            50.0 * 4.0 / (2.0 * sigma_meas * sigma_meas),
            max_relative = 1e-3
        );
        // zero residual: only the normalization remains (the maximum)
        let u0 = pot.value(&vec![vec![0.0; 50]]).unwrap();
        assert_relative_eq!(u0, norm_const, max_relative = 1e-12);
    }

    #[test]
    fn leapfrog_free_particle_and_reversibility() {
        let mut grad_zero =
            |_x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((0.0, vec![0.0, 0.0])) };
        let (theta, rho, _, _) =
            leapfrog(&[1.0, -2.0], &[0.5, 0.25], 1e-3, &mut grad_zero, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(theta[0], 1.0 + 1e-3 * 0.5, epsilon = 1e-15);
        assert_eq!(rho, vec![0.5, 0.25]);

        // reversibility on a quadratic potential
        let mut grad_u = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()))
        };
        let x0 = [0.3, -1.1];
        let p0 = [0.8, 0.2];
        let (x1, p1, _, _) = leapfrog(&x0, &p0, 0.1, &mut grad_u, &[1.0, 1.0]).unwrap();
        let p1_neg: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (x2, p2, _, _) = leapfrog(&x1, &p1_neg, 0.1, &mut grad_u, &[1.0, 1.0]).unwrap();
        for i in 0..2 {
            assert_relative_eq!(x2[i], x0[i], epsilon = 1e-14);
            assert_relative_eq!(-p2[i], p0[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn leapfrog_energy_drift_on_harmonic_oscillator() {
        let mut grad_u =
            |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((0.5 * x[0] * x[0], vec![x[0]])) };
        let mut x = vec![1.0];
        let mut p = vec![0.0];
        let h = |x: &[f64], p: &[f64]| 0.5 * x[0] * x[0] + 0.5 * p[0] * p[0];
        let h0 = h(&x, &p);
        let mut max_drift: f64 = 0.0;
        for _ in 0..1000 {
            let (xn, pn, _, _) = leapfrog(&x, &p, 1e-3, &mut grad_u, &[1.0]).unwrap();
            x = xn;
            p = pn;
            max_drift = max_drift.max((h(&x, &p) - h0).abs());
        }
        assert!(max_drift < 1e-6, "drift {max_drift}");
    }

    #[test]
    fn leapfrog_preserves_phase_space_volume() {
        // Jacobian determinant of one step = 1, by finite differences.
        let mut grad_u = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let u = 0.5 * (x[0] * x[0] + 2.0 * x[1] * x[1] + 0.5 * x[2] * x[2])
                + 0.3 * x[0] * x[1];
            Ok((
                u,
                vec![x[0] + 0.3 * x[1], 2.0 * x[1] + 0.3 * x[0], 0.5 * x[2]],
            ))
        };
        let x0 = [0.4, -0.7, 1.2];
        let p0 = [0.1, 0.5, -0.3];
        let mass = [1.0, 2.0, 0.5];
        let step = 0.05;
        let map = |z: &[f64], g: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>| {
            let (x, p, _, _) = leapfrog(&z[..3], &z[3..], step, g, &mass).unwrap();
            [x, p].concat()
        };
        let z0: Vec<f64> = [x0.as_slice(), p0.as_slice()].concat();
        let h = 1e-6;
        let mut jac = nalgebra::DMatrix::zeros(6, 6);
        for j in 0..6 {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = map(&zp, &mut grad_u);
            let fm = map(&zm, &mut grad_u);
            for i in 0..6 {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let det = jac.determinant();
        assert!((det - 1.0).abs() < 1e-8, "det {det}");
    }

    #[test]
    fn log_posterior_peaks_at_the_twin_truth() {
        use crate::coupled::CoupledModel;
        use crate::ode::integrate;
        use crate::params::{ParamId, ParameterSet, ParameterVector};

        let params = ParameterSet::baseline();
        let model = CoupledModel::elastance(params.clone()).unwrap();
        let ids = [ParamId::AXb, ParamId::RArSys];
        let theta = ParameterVector::from_set(&ids, &params).unwrap();
        let channels = vec![ChannelId::PArSys, ChannelId::VLv];
        let mut sys = CoupledSensitivity::new(model, theta.clone(), channels.clone()).unwrap();
        let protocol = Protocol::beats(2, 0.8, 0.01);
        let cfg = SolverConfig::default();

        // twin observations at the truth, no noise
        let grid = protocol.grid();
        let s0 = crate::adjoint::SensitivityModel::init_state(&sys);
        let sol = integrate(&mut sys, &s0, (0.0, protocol.t_end), &cfg, &grid).unwrap();
        let sim = crate::adjoint::sample_channels(&sys, &grid, &sol.samples);
        let cov = CovarianceModel::build(&channels, &grid, 0.0, ROM_LAMBDA).unwrap();
        let norm_const: f64 = cov
            .channels
            .iter()
            .map(|c| 0.5 * c.logdet() + 0.5 * c.n as f64 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        let potential = GaussianPotential::new(sim, cov).unwrap();

        let (lo, hi) = (vec![200.0, 0.55], vec![300.0, 0.75]);
        let (logp_truth, grad) =
            log_posterior(&mut sys, &potential, &lo, &hi, &protocol, &cfg).unwrap();
        // zero residual: the log-likelihood is exactly the normalization
        assert_relative_eq!(logp_truth, -norm_const, max_relative = 1e-9);
        assert!(grad.iter().all(|g| g.abs() < 1e-3), "gradient {grad:?}");

        crate::adjoint::SensitivityModel::set_theta(&mut sys, &[260.0, 0.66]).unwrap();
        let (logp_off, _) =
            log_posterior(&mut sys, &potential, &lo, &hi, &protocol, &cfg).unwrap();
        assert!(logp_off < logp_truth);

        // outside the prior box: -inf
        crate::adjoint::SensitivityModel::set_theta(&mut sys, &[310.0, 0.66]).unwrap();
        let (logp_out, _) =
            log_posterior(&mut sys, &potential, &[200.0, 0.55], &[300.0, 0.75], &protocol, &cfg)
                .unwrap();
        assert_eq!(logp_out, f64::NEG_INFINITY);
    }

    struct GaussianTarget {
        prec: Vec<f64>,
    }

    impl LogDensity for GaussianTarget {
        fn dim(&self) -> usize {
            self.prec.len()
        }
        fn logp_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let logp = -0.5
                * x.iter()
                    .zip(&self.prec)
                    .map(|(v, p)| v * v * p)
                    .sum::<f64>();
            let grad = x.iter().zip(&self.prec).map(|(v, p)| -v * p).collect();
            Ok((logp, grad))
        }
    }

    fn standard_nuts_cfg(seed: u64) -> NutsConfig {
        NutsConfig {
            iters: 750,
            warmup: 250,
            step_size: 0.5,
            adapt_step: true,
            adapt_mass: true,
            seed,
            ..NutsConfig::default()
        }
    }

    #[test]
    fn nuts_recovers_a_standard_gaussian() {
        let mut target = GaussianTarget {
            prec: vec![1.0, 1.0],
        };
        let cfg = standard_nuts_cfg(7);
        let samples = nuts_sample(
            &mut target,
            &[0.3, -0.2],
            vec!["x".into(), "y".into()],
            &cfg,
        )
        .unwrap();
        assert_eq!(samples.draws.len(), 500);
        let summary = posterior_summary(&samples).unwrap();
        // mean within 3 MC standard errors of 0 (sd/sqrt(n), conservative n)
        let mcse = 1.0 / (samples.draws.len() as f64 / 4.0).sqrt();
        for j in 0..2 {
            assert!(
                summary.mean[j].abs() < 3.0 * mcse,
                "mean {} vs mcse {mcse}",
                summary.mean[j]
            );
            assert!((summary.std[j] - 1.0).abs() < 0.15, "std {}", summary.std[j]);
            assert!(summary.rhat[j] < 1.05, "rhat {}", summary.rhat[j]);
        }
        assert_eq!(samples.divergences, 0);
    }

    #[test]
    fn nuts_is_deterministic_for_a_seed() {
        let mut t1 = GaussianTarget { prec: vec![2.0] };
        let mut t2 = GaussianTarget { prec: vec![2.0] };
        let cfg = standard_nuts_cfg(99);
        let a = nuts_sample(&mut t1, &[0.5], vec!["x".into()], &cfg).unwrap();
        let b = nuts_sample(&mut t2, &[0.5], vec!["x".into()], &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        let c = nuts_sample(&mut t1, &[0.5], vec!["x".into()], &standard_nuts_cfg(100)).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn nuts_draws_match_the_analytic_cdf() {
        // detailed-balance smoke test: KS statistic against the normal CDF
        let mut target = GaussianTarget { prec: vec![1.0] };
        let cfg = NutsConfig {
            iters: 1250,
            warmup: 250,
            ..standard_nuts_cfg(21)
        };
        let samples = nuts_sample(&mut target, &[0.0], vec!["x".into()], &cfg).unwrap();
        let mut xs: Vec<f64> = samples.draws.iter().map(|d| d[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        let normal_cdf = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = normal_cdf(x);
            d = d.max((f - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // asymptotic Kolmogorov p-value
        let lambda = (n as f64).sqrt() * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            p += 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        }
        assert!(p > 0.01, "KS statistic {d} (p ~ {p})");
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26
        let sign = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn anisotropic_gaussian_covariance_is_recovered() {
        let mut target = GaussianTarget {
            prec: vec![1.0, 4.0, 0.25],
        };
        let cfg = NutsConfig {
            iters: 1750,
            warmup: 250,
            ..standard_nuts_cfg(5)
        };
        let samples = nuts_sample(
            &mut target,
            &[0.1, 0.1, 0.1],
            vec!["a".into(), "b".into(), "c".into()],
            &cfg,
        )
        .unwrap();
        let summary = posterior_summary(&samples).unwrap();
        let expected: [f64; 3] = [1.0, 0.5, 2.0];
        let mut frob_num = 0.0;
        let mut frob_den = 0.0;
        for j in 0..3 {
            frob_num += (summary.std[j].powi(2) - expected[j].powi(2)).powi(2);
            frob_den += expected[j].powi(4);
        }
        assert!(
            (frob_num / frob_den).sqrt() < 0.10,
            "covariance error {} (stds {:?})",
            (frob_num / frob_den).sqrt(),
            summary.std
        );
        assert_eq!(samples.divergences, 0);
    }

    #[test]
    fn rhat_detects_disjoint_halves() {
        // i.i.d. draws: rhat near 1
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let draws: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![sample_standard_normal(&mut rng)])
            .collect();
        let r = gelman_rubin_draws(&draws);
        assert!(r[0] < 1.05, "rhat {}", r[0]);

        // identical halves: rhat ~ 1 by construction
        let half: Vec<Vec<f64>> = (0..250)
            .map(|_| vec![sample_standard_normal(&mut rng)])
            .collect();
        let doubled: Vec<Vec<f64>> = half.iter().chain(half.iter()).cloned().collect();
        let r = gelman_rubin_draws(&doubled);
        assert!((r[0] - 1.0).abs() < 0.01, "rhat {}", r[0]);

        // disjoint supports: rhat far above 1.1
        let shifted: Vec<Vec<f64>> = (0..500)
            .map(|i| vec![if i < 250 { 0.0 } else { 50.0 } + 0.001 * (i % 7) as f64])
            .collect();
        let r = gelman_rubin_draws(&shifted);
        assert!(r[0] > 1.1, "rhat {}", r[0]);
    }

    #[test]
    fn summary_handles_degenerate_draws() {
        let samples = PosteriorSamples {
            names: vec!["a".into(), "b".into()],
            draws: (0..100).map(|i| vec![3.0, i as f64]).collect(),
            logp: vec![0.0; 100],
            warmup: 0,
            divergences: 0,
            warmup_divergences: 0,
            accept_mean: 1.0,
            max_depth_hits: 0,
            step_size_final: 0.1,
            mass_diag: vec![1.0, 1.0],
            rhat: vec![1.0, 1.0],
        };
        let s = posterior_summary(&samples).unwrap();
        assert_eq!(s.std[0], 0.0);
        assert_eq!(s.ci90[0], (3.0, 3.0));
        // perfectly anticorrelated pair
        let anti = PosteriorSamples {
            draws: (0..100).map(|i| vec![i as f64, -(i as f64)]).collect(),
            ..samples
        };
        let s = posterior_summary(&anti).unwrap();
        assert_relative_eq!(s.correlation[0][1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn metropolis_rule_accepts_equal_energy() {
        // min(1, exp(H0 - H*)) = 1 when H* = H0: with a flat potential the
        // proposal is always accepted and the chain moves ballistically.
        struct Flat;
        impl LogDensity for Flat {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&mut self, _x: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((0.0, vec![0.0]))
            }
        }
        let cfg = NutsConfig {
            iters: 12,
            warmup: 2,
            step_size: 0.3,
            max_depth: 3,
            seed: 1,
            ..NutsConfig::default()
        };
        let samples = nuts_sample(&mut Flat, &[0.0], vec!["x".into()], &cfg).unwrap();
        assert!(samples.accept_mean > 0.999);
        // every iteration moved
        for w in samples.draws.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }
}
