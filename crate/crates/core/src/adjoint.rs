//! Continuous adjoint gradients of trace objectives, with a central
//! finite-difference oracle.
//!
//! The engine runs one forward solve with dense output, evaluates the
//! objective on the sampled observation grid, then integrates the adjoint
//! state backward in time with a jump `a(t_k^-) = a(t_k^+) + dJ_k/ds(t_k)`
//! at every observation sample (the terminal condition being the last
//! sample's jump). The parameter gradient accumulates
//!
//! `dJ/dtheta = sum_k dJ_k/dtheta + integral_0^T a^T dg/dtheta dt
//!             + a(0)^T ds0/dtheta`,
//!
//! the quadrature term riding along the backward solve as extra state.
//! All Jacobian products are matrix-free.

use crate::coupled::CoupledModel;
use crate::error::{Error, Result};
use crate::ode::{integrate, integrate_dense, DenseOutput, OdeSystem, SolveStats, SolverConfig};
use crate::params::ParameterVector;
use crate::qoi::{qois_from_samples, ChannelId, CostWeights, QoISet};

/// Simulation protocol: total horizon, observation window at the end of the
/// horizon, and the uniform sampling step inside the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Protocol {
    pub t_end: f64,
    pub obs_window: f64,
    pub dt_sample: f64,
}

impl Protocol {
    /// `n_beats` heartbeats, observations on the last one.
    pub fn beats(n_beats: usize, t_hb: f64, dt_sample: f64) -> Protocol {
        Protocol {
            t_end: n_beats as f64 * t_hb,
            obs_window: t_hb,
            dt_sample,
        }
    }

    /// Observation grid, ending exactly at `t_end`.
    pub fn grid(&self) -> Vec<f64> {
        let n = (self.obs_window / self.dt_sample).round() as usize;
        (0..=n)
            .map(|k| self.t_end - self.dt_sample * (n - k) as f64)
            .collect()
    }
}

/// Model interface required by the adjoint engine: a parameterized ODE with
/// matrix-free Jacobian products, a parameter-dependent initial state and a
/// set of observable channels.
pub trait SensitivityModel: OdeSystem {
    fn theta_dim(&self) -> usize;
    fn theta(&self) -> Vec<f64>;
    fn set_theta(&mut self, values: &[f64]) -> Result<()>;
    /// Closed per-component bounds; unbounded models return infinities.
    fn theta_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![f64::NEG_INFINITY; self.theta_dim()],
            vec![f64::INFINITY; self.theta_dim()],
        )
    }
    fn init_state(&self) -> Vec<f64>;
    /// One column (length `dim`) per parameter.
    fn init_jacobian(&self) -> Vec<Vec<f64>>;
    fn vjp_state(&mut self, t: f64, y: &[f64], v: &[f64], out: &mut [f64]);
    fn vjp_params(&mut self, t: f64, y: &[f64], v: &[f64], out: &mut [f64]) -> Result<()>;
    /// Both pullbacks at once; override when one linearization pass can feed
    /// both (the backward sweep calls this at every stage).
    fn vjp_both(
        &mut self,
        t: f64,
        y: &[f64],
        v: &[f64],
        out_state: &mut [f64],
        out_theta: &mut [f64],
    ) -> Result<()> {
        self.vjp_state(t, y, v, out_state);
        self.vjp_params(t, y, v, out_theta)
    }
    fn n_observables(&self) -> usize;
    fn observe(&self, t: f64, y: &[f64], out: &mut [f64]);
    /// Pullback of per-channel cotangents at one sample: accumulates
    /// `gbar_c * d(channel_c)/d(state)` into `jump` and
    /// `gbar_c * d(channel_c)/d(theta)` into `theta_grad`.
    fn observation_pullback(
        &self,
        t: f64,
        y: &[f64],
        gbar: &[f64],
        jump: &mut [f64],
        theta_grad: &mut [f64],
    );
}

/// A scalar objective of the sampled observable traces. Trace layout is
/// channel-major and must match the model's observable ordering.
pub trait TraceObjective {
    fn value(&self, sim: &[Vec<f64>]) -> Result<f64>;
    /// `d(value)/d(sim[c][k])`, same shape as `sim`.
    fn sample_gradient(&self, sim: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Objective value and its parameter gradient.
#[derive(Debug, Clone)]
pub struct GradientResult {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub forward_stats: SolveStats,
    pub backward_stats: SolveStats,
}

/// Forward solve + objective evaluation (no gradient).
pub fn evaluate_objective<S: SensitivityModel>(
    sys: &mut S,
    objective: &dyn TraceObjective,
    protocol: &Protocol,
    cfg: &SolverConfig,
) -> Result<(f64, SolveStats)> {
    let grid = protocol.grid();
    let s0 = sys.init_state();
    let sol = integrate(sys, &s0, (0.0, protocol.t_end), cfg, &grid)?;
    let sim = sample_channels(sys, &grid, &sol.samples);
    Ok((objective.value(&sim)?, sol.stats))
}

/// Simulated channel traces on the observation grid (channel-major).
pub fn sample_channels<S: SensitivityModel>(
    sys: &S,
    grid: &[f64],
    states: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let n_ch = sys.n_observables();
    let mut out = vec![vec![0.0; grid.len()]; n_ch];
    let mut buf = vec![0.0; n_ch];
    for (k, y) in states.iter().enumerate() {
        sys.observe(grid[k], y, &mut buf);
        for c in 0..n_ch {
            out[c][k] = buf[c];
        }
    }
    out
}

/// Backward-time adjoint system `[a (dim) | q (theta_dim)]` with
/// `da/dtau = +a^T dg/ds` and `dq/dtau = +a^T dg/dtheta` at `t = t_hi - tau`,
/// the forward state interpolated from stored dense output.
struct BackwardSystem<'a, S: SensitivityModel> {
    sys: &'a mut S,
    dense: &'a DenseOutput,
    t_hi: f64,
    dim: usize,
    p: usize,
    state_buf: Vec<f64>,
    seg_hint: usize,
}

impl<S: SensitivityModel> OdeSystem for BackwardSystem<'_, S> {
    fn dim(&self) -> usize {
        self.dim + self.p
    }

    fn rhs(&mut self, tau: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let t = self.t_hi - tau;
        self.dense.eval_hinted(t, &mut self.seg_hint, &mut self.state_buf);
        let (a, _) = y.split_at(self.dim);
        let (da, dq) = dy.split_at_mut(self.dim);
        self.sys.vjp_both(t, &self.state_buf, a, da, dq)
    }
}

/// Gradient of `objective` with respect to the model parameters via the
/// continuous adjoint method with per-sample checkpoints.
pub fn adjoint_gradient<S: SensitivityModel>(
    sys: &mut S,
    objective: &dyn TraceObjective,
    protocol: &Protocol,
    cfg: &SolverConfig,
) -> Result<GradientResult> {
    let grid = protocol.grid();
    let dim = sys.dim();
    let p = sys.theta_dim();
    let s0 = sys.init_state();
    let (sol, dense) = integrate_dense(sys, &s0, (0.0, protocol.t_end), cfg, &grid)?;
    let sim = sample_channels(sys, &grid, &sol.samples);
    let value = objective.value(&sim)?;
    let gbar = objective.sample_gradient(&sim)?;

    let mut gradient = vec![0.0; p];
    let n_ch = sys.n_observables();
    let mut gbar_k = vec![0.0; n_ch];
    let mut jump = vec![0.0; dim];
    let mut aug = vec![0.0; dim + p]; // [a | q]
    let mut backward_stats = SolveStats::default();

    let mut bw = BackwardSystem {
        sys,
        dense: &dense,
        t_hi: 0.0,
        dim,
        p,
        state_buf: vec![0.0; dim],
        seg_hint: 0,
    };

    for k in (0..grid.len()).rev() {
        for (c, g) in gbar_k.iter_mut().enumerate() {
            *g = gbar[c][k];
        }
        jump.iter_mut().for_each(|j| *j = 0.0);
        bw.sys
            .observation_pullback(grid[k], &sol.samples[k], &gbar_k, &mut jump, &mut gradient);
        for (a, j) in aug.iter_mut().zip(&jump) {
            *a += j;
        }

        let t_lo = if k == 0 { 0.0 } else { grid[k - 1] };
        let span = grid[k] - t_lo;
        if span > 0.0 {
            bw.t_hi = grid[k];
            let seg = integrate(&mut bw, &aug, (0.0, span), cfg, &[])?;
            aug = seg.final_state;
            backward_stats.steps_accepted += seg.stats.steps_accepted;
            backward_stats.steps_rejected += seg.stats.steps_rejected;
            backward_stats.rhs_evals += seg.stats.rhs_evals;
        }
    }

    // quadrature term + initial-condition pathway a(0)^T ds0/dtheta
    let init_jac = bw.sys.init_jacobian();
    for (i, col) in init_jac.iter().enumerate() {
        let mut acc = aug[dim + i];
        for j in 0..dim {
            acc += aug[j] * col[j];
        }
        gradient[i] += acc;
    }

    for g in &gradient {
        if !g.is_finite() {
            return Err(Error::non_finite("adjoint gradient"));
        }
    }

    Ok(GradientResult {
        value,
        gradient,
        forward_stats: sol.stats,
        backward_stats,
    })
}

/// Central-difference oracle: `2 * theta_dim` forward solves. Steps that
/// would exit the admissible box are shrunk toward the interior.
pub fn finite_difference_gradient<S: SensitivityModel>(
    sys: &mut S,
    objective: &dyn TraceObjective,
    protocol: &Protocol,
    cfg: &SolverConfig,
    rel_step: f64,
) -> Result<GradientResult> {
    if !(rel_step > 0.0) {
        return Err(Error::config("rel_step must be positive"));
    }
    let theta = sys.theta();
    let (lo, hi) = sys.theta_bounds();
    let (value, forward_stats) = evaluate_objective(sys, objective, protocol, cfg)?;
    let mut gradient = vec![0.0; theta.len()];
    let mut total_stats = forward_stats;
    for i in 0..theta.len() {
        let mut h = rel_step * theta[i].abs().max(1e-8);
        if hi[i].is_finite() {
            h = h.min((hi[i] - theta[i]).max(0.0));
        }
        if lo[i].is_finite() {
            h = h.min((theta[i] - lo[i]).max(0.0));
        }
        if h == 0.0 {
            return Err(Error::InvalidParameter {
                name: format!("theta[{i}]"),
                reason: "parameter sits on a bound; no room for a central difference".to_string(),
            });
        }
        let mut trial = theta.clone();
        trial[i] = theta[i] + h;
        sys.set_theta(&trial)?;
        let (jp, sp) = evaluate_objective(sys, objective, protocol, cfg)?;
        trial[i] = theta[i] - h;
        sys.set_theta(&trial)?;
        let (jm, sm) = evaluate_objective(sys, objective, protocol, cfg)?;
        gradient[i] = (jp - jm) / (2.0 * h);
        total_stats.rhs_evals += sp.rhs_evals + sm.rhs_evals;
        total_stats.steps_accepted += sp.steps_accepted + sm.steps_accepted;
    }
    sys.set_theta(&theta)?;
    Ok(GradientResult {
        value,
        gradient,
        forward_stats: total_stats,
        backward_stats: SolveStats::default(),
    })
}

/// The coupled cardiovascular model wired for sensitivity analysis over an
/// estimated parameter vector and a set of observed channels.
#[derive(Debug, Clone)]
pub struct CoupledSensitivity {
    pub model: CoupledModel,
    pub theta: ParameterVector,
    pub channels: Vec<ChannelId>,
    base: CoupledModel,
}

impl CoupledSensitivity {
    pub fn new(
        base: CoupledModel,
        theta: ParameterVector,
        channels: Vec<ChannelId>,
    ) -> Result<CoupledSensitivity> {
        theta.validate()?;
        let model = base.with_theta(&theta);
        Ok(CoupledSensitivity {
            model,
            theta,
            channels,
            base,
        })
    }
}

impl OdeSystem for CoupledSensitivity {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.model.rhs(t, y, dy)
    }
}

impl SensitivityModel for CoupledSensitivity {
    fn theta_dim(&self) -> usize {
        self.theta.len()
    }

    fn theta(&self) -> Vec<f64> {
        self.theta.values.clone()
    }

    fn set_theta(&mut self, values: &[f64]) -> Result<()> {
        let vector = self.theta.with_values(values.to_vec());
        vector.validate()?;
        self.model = self.base.with_theta(&vector);
        self.theta = vector;
        Ok(())
    }

    fn theta_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.theta.lower.clone(), self.theta.upper.clone())
    }

    fn init_state(&self) -> Vec<f64> {
        self.model.initial_state()
    }

    fn init_jacobian(&self) -> Vec<Vec<f64>> {
        self.model.initial_state_jacobian(&self.theta.ids)
    }

    fn vjp_state(&mut self, t: f64, y: &[f64], v: &[f64], out: &mut [f64]) {
        self.model.vjp_state(t, y, v, out);
    }

    fn vjp_params(&mut self, t: f64, y: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        self.model.vjp_params(t, y, v, &self.theta.ids, out)
    }

    fn vjp_both(
        &mut self,
        t: f64,
        y: &[f64],
        v: &[f64],
        out_state: &mut [f64],
        out_theta: &mut [f64],
    ) -> Result<()> {
        self.model
            .vjp_fused(t, y, v, &self.theta.ids, out_state, out_theta)
    }

    fn n_observables(&self) -> usize {
        self.channels.len()
    }

    fn observe(&self, t: f64, y: &[f64], out: &mut [f64]) {
        for (c, &ch) in self.channels.iter().enumerate() {
            out[c] = self.model.channel_value(ch, t, y);
        }
    }

    fn observation_pullback(
        &self,
        t: f64,
        y: &[f64],
        gbar: &[f64],
        jump: &mut [f64],
        theta_grad: &mut [f64],
    ) {
        for (c, &ch) in self.channels.iter().enumerate() {
            if gbar[c] == 0.0 {
                continue;
            }
            let lin = self.model.channel_linearization(ch, t, y);
            jump[lin.state_index] += gbar[c] * lin.d_state;
            for (id, d) in &lin.theta {
                if let Some(i) = self.theta.ids.iter().position(|x| x == id) {
                    theta_grad[i] += gbar[c] * d;
                }
            }
        }
    }
}

/// The fitting cost `J` as a trace objective: observation QoIs, weights and
/// the channel ordering shared with the model adapter.
pub struct CostObjective {
    pub obs: QoISet,
    pub weights: CostWeights,
    pub channels: Vec<ChannelId>,
    pub dt_sample: f64,
}

impl CostObjective {
    fn sim_qois(&self, sim: &[Vec<f64>]) -> QoISet {
        let pairs: Vec<(ChannelId, Vec<f64>)> = self
            .channels
            .iter()
            .cloned()
            .zip(sim.iter().cloned())
            .collect();
        qois_from_samples(self.dt_sample, &pairs)
    }
}

impl TraceObjective for CostObjective {
    fn value(&self, sim: &[Vec<f64>]) -> Result<f64> {
        crate::qoi::cost_functional(&self.sim_qois(sim), &self.obs, &self.weights)
    }

    fn sample_gradient(&self, sim: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        crate::qoi::cost_sample_gradient(&self.sim_qois(sim), &self.obs, &self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamId, ParameterSet};
    use approx::assert_relative_eq;

    /// `ds/dt = theta * s`, one observable (s itself).
    struct Exponential {
        theta: f64,
        s0: f64,
    }

    impl OdeSystem for Exponential {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = self.theta * y[0];
            Ok(())
        }
    }

    impl SensitivityModel for Exponential {
        fn theta_dim(&self) -> usize {
            1
        }
        fn theta(&self) -> Vec<f64> {
            vec![self.theta]
        }
        fn set_theta(&mut self, values: &[f64]) -> Result<()> {
            self.theta = values[0];
            Ok(())
        }
        fn init_state(&self) -> Vec<f64> {
            vec![self.s0]
        }
        fn init_jacobian(&self) -> Vec<Vec<f64>> {
            vec![vec![0.0]]
        }
        fn vjp_state(&mut self, _t: f64, _y: &[f64], v: &[f64], out: &mut [f64]) {
            out[0] = v[0] * self.theta;
        }
        fn vjp_params(&mut self, _t: f64, y: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = v[0] * y[0];
            Ok(())
        }
        fn n_observables(&self) -> usize {
            1
        }
        fn observe(&self, _t: f64, y: &[f64], out: &mut [f64]) {
            out[0] = y[0];
        }
        fn observation_pullback(
            &self,
            _t: f64,
            _y: &[f64],
            gbar: &[f64],
            jump: &mut [f64],
            _theta_grad: &mut [f64],
        ) {
            jump[0] += gbar[0];
        }
    }

    /// J = value of channel 0 at the final sample.
    struct TerminalValue;
    impl TraceObjective for TerminalValue {
        fn value(&self, sim: &[Vec<f64>]) -> Result<f64> {
            Ok(*sim[0].last().unwrap())
        }
        fn sample_gradient(&self, sim: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            let mut g = vec![vec![0.0; sim[0].len()]];
            *g[0].last_mut().unwrap() = 1.0;
            Ok(g)
        }
    }

    #[test]
    fn scalar_exponential_sensitivity_is_analytic() {
        // J = s(T): dJ/dtheta = T * s0 * exp(theta T)
        let mut sys = Exponential { theta: 0.7, s0: 1.3 };
        let protocol = Protocol {
            t_end: 1.0,
            obs_window: 1.0,
            dt_sample: 0.25,
        };
        let cfg = SolverConfig {
            rtol: 1e-10,
            atol: 1e-12,
            dt_max: 0.05,
            ..SolverConfig::default()
        };
        let res = adjoint_gradient(&mut sys, &TerminalValue, &protocol, &cfg).unwrap();
        let exact = 1.3 * (0.7f64).exp();
        assert_relative_eq!(res.value, exact, max_relative = 1e-8);
        assert_relative_eq!(res.gradient[0], exact, max_relative = 1e-7);

        let fd =
            finite_difference_gradient(&mut sys, &TerminalValue, &protocol, &cfg, 1e-6).unwrap();
        assert_relative_eq!(res.gradient[0], fd.gradient[0], max_relative = 1e-6);
    }

    #[test]
    fn fd_oracle_truncation_shrinks_with_the_step() {
        let mut sys = Exponential { theta: 0.7, s0: 1.3 };
        let protocol = Protocol {
            t_end: 1.0,
            obs_window: 1.0,
            dt_sample: 0.5,
        };
        let cfg = SolverConfig {
            rtol: 1e-12,
            atol: 1e-14,
            dt_max: 0.02,
            ..SolverConfig::default()
        };
        let exact = 1.3 * (0.7f64).exp();
        let err_at = |step: f64, sys: &mut Exponential| {
            (finite_difference_gradient(sys, &TerminalValue, &protocol, &cfg, step)
                .unwrap()
                .gradient[0]
                - exact)
                .abs()
        };
        let e1 = err_at(1e-3, &mut sys);
        let e2 = err_at(5e-4, &mut sys);
        // central differences: O(h^2) truncation
        assert!(e1 / e2 > 3.0 && e1 / e2 < 5.0, "ratio {}", e1 / e2);
    }

    fn t_lv_sensitivity(theta_values: Option<Vec<f64>>) -> CoupledSensitivity {
        let params = ParameterSet::baseline();
        let model = CoupledModel::elastance(params.clone()).unwrap();
        let ids = [ParamId::AXb, ParamId::RArSys, ParamId::VHeartTot];
        let mut theta = ParameterVector::from_set(&ids, &params).unwrap();
        if let Some(v) = theta_values {
            theta = theta.with_values(v);
        }
        CoupledSensitivity::new(model, theta, vec![ChannelId::PArSys, ChannelId::VLv]).unwrap()
    }

    fn t_lv_objective(protocol: &Protocol, cfg: &SolverConfig) -> CostObjective {
        // twin observations generated at the truth
        let mut sys = t_lv_sensitivity(None);
        let grid = protocol.grid();
        let s0 = sys.init_state();
        let sol = integrate(&mut sys, &s0, (0.0, protocol.t_end), cfg, &grid).unwrap();
        let sim = sample_channels(&sys, &grid, &sol.samples);
        let pairs: Vec<(ChannelId, Vec<f64>)> = vec![
            (ChannelId::PArSys, sim[0].clone()),
            (ChannelId::VLv, sim[1].clone()),
        ];
        CostObjective {
            obs: qois_from_samples(protocol.dt_sample, &pairs),
            weights: CostWeights::traces_only(&[ChannelId::PArSys, ChannelId::VLv]),
            channels: vec![ChannelId::PArSys, ChannelId::VLv],
            dt_sample: protocol.dt_sample,
        }
    }

    #[test]
    fn cardiovascular_gradient_matches_finite_differences() {
        let protocol = Protocol::beats(5, 0.8, 0.01);
        let cfg = SolverConfig::tight();
        let objective = t_lv_objective(&protocol, &cfg);

        // an interior point away from the truth
        let mut sys = t_lv_sensitivity(Some(vec![230.0, 0.75, 450.0]));
        let adj = adjoint_gradient(&mut sys, &objective, &protocol, &cfg).unwrap();
        let fd = finite_difference_gradient(&mut sys, &objective, &protocol, &cfg, 1e-5).unwrap();
        for i in 0..3 {
            let denom = fd.gradient[i].abs().max(1e-12);
            let rel = (adj.gradient[i] - fd.gradient[i]).abs() / denom;
            assert!(
                rel < 1e-4,
                "component {i}: adjoint {} vs fd {} (rel {rel})",
                adj.gradient[i],
                fd.gradient[i]
            );
        }
        assert!(adj.value > 0.0);
    }

    #[test]
    fn gradient_vanishes_at_twin_truth() {
        let protocol = Protocol::beats(5, 0.8, 0.01);
        let cfg = SolverConfig::tight();
        let objective = t_lv_objective(&protocol, &cfg);
        let mut sys = t_lv_sensitivity(None);
        let adj = adjoint_gradient(&mut sys, &objective, &protocol, &cfg).unwrap();
        // J is a sum of squares with residual 0 at the truth
        assert!(adj.value < 1e-16, "J at truth {}", adj.value);
        for (i, g) in adj.gradient.iter().enumerate() {
            assert!(g.abs() < 1e-8, "component {i}: {g}");
        }
    }

    #[test]
    fn theta_independent_objective_has_zero_gradient() {
        struct Constant;
        impl TraceObjective for Constant {
            fn value(&self, _sim: &[Vec<f64>]) -> Result<f64> {
                Ok(4.2)
            }
            fn sample_gradient(&self, sim: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
                Ok(sim.iter().map(|c| vec![0.0; c.len()]).collect())
            }
        }
        let protocol = Protocol::beats(2, 0.8, 0.01);
        let cfg = SolverConfig::default();
        let mut sys = t_lv_sensitivity(None);
        let adj = adjoint_gradient(&mut sys, &Constant, &protocol, &cfg).unwrap();
        assert_eq!(adj.value, 4.2);
        assert!(adj.gradient.iter().all(|g| *g == 0.0));
    }
}
