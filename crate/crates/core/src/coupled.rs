//! The coupled surrogate–circulation system.
//!
//! The augmented state is `[z (n_z) | c (12) | p_LV]`: surrogate latent
//! variables (first coordinate = surrogate LV volume), the circulation
//! state, and the left-ventricular pressure promoted to a state by the
//! penalized volumetric constraint
//!
//! `epsilon * dp_LV/dt = V_LV_circ(c) - V_LV_srg(z)`.
//!
//! The pressure integrates the volume mismatch in the orientation that damps
//! it: a chamber inflates under pressure and the circulation drains faster
//! under pressure, so the gap must push `p_LV` down when the surrogate
//! volume exceeds the circulation volume. As `epsilon -> 0` the trajectory
//! approaches the algebraically constrained system.
//!
//! Alongside the right-hand side, this module carries the hand-derived
//! vector-Jacobian products with respect to state and estimable parameters
//! (matrix-free, exact to machine precision) and the parameter sensitivity
//! of the initial state, which is what makes adjoint gradients of the total
//! heart volume possible.

use crate::circulation::{self, idx, FlowEval};
use crate::error::{Error, Result};
use crate::ode::{ChannelModel, OdeSystem};
use crate::params::{ParamId, ParameterSet, ParameterVector};
use crate::qoi::ChannelId;
use crate::surrogate::{lv_elastance_scaled, LvSurrogate, SurrogateScratch};

/// Default penalty for the volumetric constraint (s * mL per mmHg... the
/// pressure responds on a 0.1 ms scale).
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Default valve smoothing width (mmHg) whenever gradients are required.
pub const GRADIENT_SMOOTHING: f64 = 0.1;

/// Read-only view of an augmented state vector.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedView<'a> {
    pub z: &'a [f64],
    pub c: &'a [f64],
    pub p_lv: f64,
}

/// Coupled model: parameters, surrogate, penalty and valve smoothing.
#[derive(Debug, Clone)]
pub struct CoupledModel {
    pub params: ParameterSet,
    pub surrogate: LvSurrogate,
    pub epsilon: f64,
    pub smoothing: f64,
    scratch: SurrogateScratch,
}

impl CoupledModel {
    pub fn new(
        params: ParameterSet,
        surrogate: LvSurrogate,
        epsilon: f64,
        smoothing: f64,
    ) -> Result<CoupledModel> {
        if !(epsilon > 0.0) {
            return Err(Error::config(format!(
                "constraint penalty must be positive, got {epsilon}"
            )));
        }
        if smoothing < 0.0 {
            return Err(Error::config("valve smoothing width must be >= 0"));
        }
        params.validate()?;
        let scratch = SurrogateScratch::for_surrogate(&surrogate);
        Ok(CoupledModel {
            params,
            surrogate,
            epsilon,
            smoothing,
            scratch,
        })
    }

    /// Elastance-surrogate model with default penalty and smoothed valves.
    pub fn elastance(params: ParameterSet) -> Result<CoupledModel> {
        CoupledModel::new(
            params,
            LvSurrogate::elastance(),
            DEFAULT_EPSILON,
            GRADIENT_SMOOTHING,
        )
    }

    pub fn n_z(&self) -> usize {
        self.surrogate.n_z()
    }

    /// Index of the circulation block within the augmented state.
    pub fn c_offset(&self) -> usize {
        self.n_z()
    }

    /// Index of the `p_LV` state.
    pub fn p_lv_index(&self) -> usize {
        self.n_z() + circulation::STATE_DIM
    }

    pub fn view<'a>(&self, y: &'a [f64]) -> AugmentedView<'a> {
        let n_z = self.n_z();
        AugmentedView {
            z: &y[..n_z],
            c: &y[n_z..n_z + circulation::STATE_DIM],
            p_lv: y[self.p_lv_index()],
        }
    }

    /// Applies an estimated parameter vector on top of the current set.
    pub fn with_theta(&self, theta: &ParameterVector) -> CoupledModel {
        let mut m = self.clone();
        m.params = theta.apply_to(&self.params);
        m
    }

    /// Augmented initial state: the circulation split of `V_heart_tot`, the
    /// surrogate volume aligned with the circulation LV volume, latent
    /// variables at rest, and `p_LV` started on the elastance law.
    pub fn initial_state(&self) -> Vec<f64> {
        let c0 = circulation::initial_state(&self.params);
        let mut s = vec![0.0; self.dim()];
        s[0] = c0[idx::V_LV];
        s[self.c_offset()..self.c_offset() + circulation::STATE_DIM].copy_from_slice(&c0);
        s[self.p_lv_index()] =
            lv_elastance_scaled(0.0, self.params.a_xb, &self.params) * (c0[idx::V_LV] - self.params.v0_lv);
        s
    }

    /// Derivative of the initial state with respect to the estimated
    /// parameters (column-per-parameter).
    pub fn initial_state_jacobian(&self, theta_ids: &[ParamId]) -> Vec<Vec<f64>> {
        let c_off = self.c_offset();
        let p_idx = self.p_lv_index();
        let v_lv0 = circulation::INITIAL_VOLUME_FRACTIONS[1] * self.params.v_heart_tot;
        let e0 = lv_elastance_scaled(0.0, self.params.a_xb, &self.params);
        theta_ids
            .iter()
            .map(|&id| {
                let mut col = vec![0.0; self.dim()];
                match id {
                    ParamId::VHeartTot => {
                        for (i, f) in circulation::INITIAL_VOLUME_FRACTIONS.iter().enumerate() {
                            col[c_off + i] = *f;
                        }
                        let f_lv = circulation::INITIAL_VOLUME_FRACTIONS[1];
                        col[0] = f_lv;
                        col[p_idx] = e0 * f_lv;
                    }
                    ParamId::AXb => {
                        let phi0 = crate::circulation::chamber_activation(
                            crate::params::Chamber::Lv,
                            0.0,
                            &self.params,
                        );
                        let de_da =
                            self.params.e_lv_act_max * phi0 / ParamId::AXb.baseline();
                        col[p_idx] = de_da * (v_lv0 - self.params.v0_lv);
                    }
                    _ => {}
                }
                col
            })
            .collect()
    }

    fn flows(&self, t: f64, y: &[f64]) -> FlowEval {
        let v = self.view(y);
        circulation::evaluate_flows(t, v.c, &self.params, Some(v.p_lv), self.smoothing)
    }

    /// Accumulates `v^T dg/ds` into `out` (both of augmented dimension).
    pub fn vjp_state(&mut self, t: f64, y: &[f64], v: &[f64], out: &mut [f64]) {
        self.vjp_fused(t, y, v, &[], out, &mut [])
            .expect("state-only pullback cannot fail");
    }

    /// Accumulates `v^T dg/d(theta)` into `out` (one entry per id).
    ///
    /// Supports the estimable set (contractility, chamber elastances,
    /// systemic resistances, total heart volume); the latter has no direct
    /// right-hand-side dependence, only an initial-condition one.
    pub fn vjp_params(
        &mut self,
        t: f64,
        y: &[f64],
        v: &[f64],
        theta_ids: &[ParamId],
        out: &mut [f64],
    ) -> Result<()> {
        let mut state_scratch = vec![0.0; self.dim()];
        self.vjp_fused(t, y, v, theta_ids, &mut state_scratch, out)
    }

    /// Both pullbacks from one linearization pass (the backward adjoint
    /// evaluates them together at every stage).
    pub fn vjp_fused(
        &mut self,
        t: f64,
        y: &[f64],
        v: &[f64],
        theta_ids: &[ParamId],
        out: &mut [f64],
        out_theta: &mut [f64],
    ) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        out_theta.iter_mut().for_each(|o| *o = 0.0);
        let n_z = self.n_z();
        let base = self.c_offset();
        let p_idx = self.p_lv_index();
        let p = &self.params;
        let f = self.flows(t, y);

        let (r_vla, r_vlv, r_vra, r_vrv) = (base, base + 1, base + 2, base + 3);
        let (r_pas, r_pvs, r_pap, r_pvp) = (base + 4, base + 5, base + 6, base + 7);
        let (r_qas, r_qvs, r_qap, r_qvp) = (base + 8, base + 9, base + 10, base + 11);
        let (c_vla, c_vra, c_vrv) = (base, base + 2, base + 3);
        let (c_pas, c_pvs, c_pap, c_pvp) = (base + 4, base + 5, base + 6, base + 7);
        let (c_qas, c_qvs, c_qap, c_qvp) = (base + 8, base + 9, base + 10, base + 11);
        let c_vlv = base + 1;

        // dV_LA/dt = Q_VEN_PUL - Q_MV
        out[c_vla] += v[r_vla] * (-f.dq_mv * f.e_la);
        out[p_idx] += v[r_vla] * f.dq_mv;
        out[c_qvp] += v[r_vla];
        // dV_LV/dt = Q_MV - Q_AV
        out[c_vla] += v[r_vlv] * (f.dq_mv * f.e_la);
        out[p_idx] += v[r_vlv] * (-f.dq_mv - f.dq_av);
        out[c_pas] += v[r_vlv] * f.dq_av;
        // dV_RA/dt = Q_VEN_SYS - Q_TV
        out[c_vra] += v[r_vra] * (-f.dq_tv * f.e_ra);
        out[c_vrv] += v[r_vra] * (f.dq_tv * f.e_rv);
        out[c_qvs] += v[r_vra];
        // dV_RV/dt = Q_TV - Q_PV
        out[c_vra] += v[r_vrv] * (f.dq_tv * f.e_ra);
        out[c_vrv] += v[r_vrv] * (-(f.dq_tv + f.dq_pv) * f.e_rv);
        out[c_pap] += v[r_vrv] * f.dq_pv;
        // dp_AR_SYS/dt = (Q_AV - Q_AR_SYS)/C_AR_SYS
        out[p_idx] += v[r_pas] * f.dq_av / p.c_ar_sys;
        out[c_pas] += v[r_pas] * (-f.dq_av / p.c_ar_sys);
        out[c_qas] += v[r_pas] * (-1.0 / p.c_ar_sys);
        // dp_VEN_SYS/dt = (Q_AR_SYS - Q_VEN_SYS)/C_VEN_SYS
        out[c_qas] += v[r_pvs] / p.c_ven_sys;
        out[c_qvs] += v[r_pvs] * (-1.0 / p.c_ven_sys);
        // dp_AR_PUL/dt = (Q_PV - Q_AR_PUL)/C_AR_PUL
        out[c_vrv] += v[r_pap] * f.dq_pv * f.e_rv / p.c_ar_pul;
        out[c_pap] += v[r_pap] * (-f.dq_pv / p.c_ar_pul);
        out[c_qap] += v[r_pap] * (-1.0 / p.c_ar_pul);
        // dp_VEN_PUL/dt = (Q_AR_PUL - Q_VEN_PUL)/C_VEN_PUL
        out[c_qap] += v[r_pvp] / p.c_ven_pul;
        out[c_qvp] += v[r_pvp] * (-1.0 / p.c_ven_pul);
        // dQ_AR_SYS/dt = -(R/L) Q - (p_VEN_SYS - p_AR_SYS)/L
        out[c_qas] += v[r_qas] * (-p.r_ar_sys / p.l_ar_sys);
        out[c_pvs] += v[r_qas] * (-1.0 / p.l_ar_sys);
        out[c_pas] += v[r_qas] / p.l_ar_sys;
        // dQ_VEN_SYS/dt = -(R/L) Q - (p_RA - p_VEN_SYS)/L
        out[c_qvs] += v[r_qvs] * (-p.r_ven_sys / p.l_ven_sys);
        out[c_vra] += v[r_qvs] * (-f.e_ra / p.l_ven_sys);
        out[c_pvs] += v[r_qvs] / p.l_ven_sys;
        // dQ_AR_PUL/dt
        out[c_qap] += v[r_qap] * (-p.r_ar_pul / p.l_ar_pul);
        out[c_pvp] += v[r_qap] * (-1.0 / p.l_ar_pul);
        out[c_pap] += v[r_qap] / p.l_ar_pul;
        // dQ_VEN_PUL/dt
        out[c_qvp] += v[r_qvp] * (-p.r_ven_pul / p.l_ven_pul);
        out[c_vla] += v[r_qvp] * (-f.e_la / p.l_ven_pul);
        out[c_pvp] += v[r_qvp] / p.l_ven_pul;
        // eps dp_LV/dt = V_LV_circ - V_LV_srg
        out[c_vlv] += v[p_idx] / self.epsilon;
        out[0] += v[p_idx] * (-1.0 / self.epsilon);

        // explicit parameter dependencies of the circulation block
        let s_la = y[base + idx::V_LA] - p.v0_la;
        let s_ra = y[base + idx::V_RA] - p.v0_ra;
        let s_rv = y[base + idx::V_RV] - p.v0_rv;
        for (i, &id) in theta_ids.iter().enumerate() {
            out_theta[i] = match id {
                ParamId::ELaPass | ParamId::ELaActMax => {
                    let s = if id == ParamId::ELaPass {
                        s_la
                    } else {
                        s_la * f.phi_la
                    };
                    v[r_vla] * (-f.dq_mv * s) + v[r_vlv] * (f.dq_mv * s)
                        + v[r_qvp] * (-s / p.l_ven_pul)
                }
                ParamId::ERaPass | ParamId::ERaActMax => {
                    let s = if id == ParamId::ERaPass {
                        s_ra
                    } else {
                        s_ra * f.phi_ra
                    };
                    v[r_vra] * (-f.dq_tv * s) + v[r_vrv] * (f.dq_tv * s)
                        + v[r_qvs] * (-s / p.l_ven_sys)
                }
                ParamId::ERvPass | ParamId::ERvAct => {
                    let s = if id == ParamId::ERvPass {
                        s_rv
                    } else {
                        s_rv * f.phi_rv
                    };
                    v[r_vra] * (f.dq_tv * s)
                        + v[r_vrv] * (-(f.dq_tv + f.dq_pv) * s)
                        + v[r_pap] * (f.dq_pv * s / p.c_ar_pul)
                }
                ParamId::RArSys => v[r_qas] * (-y[base + idx::Q_AR_SYS] / p.l_ar_sys),
                ParamId::RVenSys => v[r_qvs] * (-y[base + idx::Q_VEN_SYS] / p.l_ven_sys),
                ParamId::VHeartTot | ParamId::AXb => 0.0,
                other => {
                    return Err(Error::NotEstimable {
                        name: other.name().to_string(),
                    })
                }
            };
        }

        // surrogate block: state pullback, p_LV coupling and its own
        // parameter dependencies (contractility or network inputs)
        let (z_slice, rest) = y.split_at(n_z);
        let p_lv = rest[circulation::STATE_DIM];
        let (out_z, out_rest) = out.split_at_mut(n_z);
        let d_plv = self.surrogate.vjp(
            t,
            z_slice,
            p_lv,
            &self.params,
            &v[..n_z],
            &mut self.scratch,
            out_z,
            theta_ids,
            out_theta,
        );
        out_rest[circulation::STATE_DIM] += d_plv;
        Ok(())
    }

    /// Value of an observable channel at `(t, y)`.
    pub fn channel_value(&self, ch: ChannelId, t: f64, y: &[f64]) -> f64 {
        let v = self.view(y);
        let p = &self.params;
        match ch {
            ChannelId::VLa => v.c[idx::V_LA],
            ChannelId::VLv => v.c[idx::V_LV],
            ChannelId::VRa => v.c[idx::V_RA],
            ChannelId::VRv => v.c[idx::V_RV],
            ChannelId::PArSys => v.c[idx::P_AR_SYS],
            ChannelId::PLv => v.p_lv,
            ChannelId::PLa => {
                crate::circulation::chamber_elastance(crate::params::Chamber::La, t, p)
                    * (v.c[idx::V_LA] - p.v0_la)
            }
            ChannelId::PRa => {
                crate::circulation::chamber_elastance(crate::params::Chamber::Ra, t, p)
                    * (v.c[idx::V_RA] - p.v0_ra)
            }
            ChannelId::PRv => {
                crate::circulation::chamber_elastance(crate::params::Chamber::Rv, t, p)
                    * (v.c[idx::V_RV] - p.v0_rv)
            }
        }
    }

    /// Linearization of a channel: the single state it reads (all channels
    /// here are either raw states or elastance laws of one volume) plus its
    /// explicit parameter derivatives.
    pub fn channel_linearization(&self, ch: ChannelId, t: f64, y: &[f64]) -> ChannelLin {
        let base = self.c_offset();
        let p = &self.params;
        use crate::circulation::chamber_activation;
        use crate::params::Chamber;
        match ch {
            ChannelId::VLa => ChannelLin::state(base + idx::V_LA),
            ChannelId::VLv => ChannelLin::state(base + idx::V_LV),
            ChannelId::VRa => ChannelLin::state(base + idx::V_RA),
            ChannelId::VRv => ChannelLin::state(base + idx::V_RV),
            ChannelId::PArSys => ChannelLin::state(base + idx::P_AR_SYS),
            ChannelId::PLv => ChannelLin::state(self.p_lv_index()),
            ChannelId::PLa => {
                let phi = chamber_activation(Chamber::La, t, p);
                let stretch = y[base + idx::V_LA] - p.v0_la;
                ChannelLin {
                    state_index: base + idx::V_LA,
                    d_state: p.e_la_pass + p.e_la_act_max * phi,
                    theta: vec![
                        (ParamId::ELaPass, stretch),
                        (ParamId::ELaActMax, phi * stretch),
                    ],
                }
            }
            ChannelId::PRa => {
                let phi = chamber_activation(Chamber::Ra, t, p);
                let stretch = y[base + idx::V_RA] - p.v0_ra;
                ChannelLin {
                    state_index: base + idx::V_RA,
                    d_state: p.e_ra_pass + p.e_ra_act_max * phi,
                    theta: vec![
                        (ParamId::ERaPass, stretch),
                        (ParamId::ERaActMax, phi * stretch),
                    ],
                }
            }
            ChannelId::PRv => {
                let phi = chamber_activation(Chamber::Rv, t, p);
                let stretch = y[base + idx::V_RV] - p.v0_rv;
                ChannelLin {
                    state_index: base + idx::V_RV,
                    d_state: p.e_rv_pass + p.e_rv_act * phi,
                    theta: vec![(ParamId::ERvPass, stretch), (ParamId::ERvAct, phi * stretch)],
                }
            }
        }
    }

    /// Total blood volume diagnostic on the augmented state.
    pub fn total_blood_volume(&self, y: &[f64]) -> f64 {
        circulation::total_blood_volume(&y[self.c_offset()..], &self.params)
    }
}

/// Channel linearization: `value = d_state * s[state_index] + const`, with
/// explicit parameter derivatives for elastance-law channels.
#[derive(Debug, Clone)]
pub struct ChannelLin {
    pub state_index: usize,
    pub d_state: f64,
    pub theta: Vec<(ParamId, f64)>,
}

impl ChannelLin {
    fn state(i: usize) -> ChannelLin {
        ChannelLin {
            state_index: i,
            d_state: 1.0,
            theta: Vec::new(),
        }
    }
}

impl OdeSystem for CoupledModel {
    fn dim(&self) -> usize {
        self.n_z() + circulation::STATE_DIM + 1
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n_z = self.n_z();
        let (z, rest) = y.split_at(n_z);
        let (c, p_lv_slice) = rest.split_at(circulation::STATE_DIM);
        let p_lv = p_lv_slice[0];

        let (dz, drest) = dy.split_at_mut(n_z);
        let (dc, dp_lv) = drest.split_at_mut(circulation::STATE_DIM);

        let params = &self.params;
        self.surrogate.rhs(t, z, p_lv, params, &mut self.scratch, dz)?;
        circulation::circulation_rhs(t, c, params, Some(p_lv), self.smoothing, dc)?;
        dp_lv[0] = (c[idx::V_LV] - self.surrogate.volume(z)) / self.epsilon;
        if !dp_lv[0].is_finite() || dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("coupled rhs at t = {t:.6}")));
        }
        Ok(())
    }
}

/// Channels emitted in simulation traces: the twelve circulation states,
/// the coupled LV pressure, derived chamber pressures and valve flows, and
/// the surrogate LV volume.
pub const TRACE_CHANNELS: [&str; 21] = [
    "V_LA",
    "V_LV",
    "V_RA",
    "V_RV",
    "p_AR_SYS",
    "p_VEN_SYS",
    "p_AR_PUL",
    "p_VEN_PUL",
    "Q_AR_SYS",
    "Q_VEN_SYS",
    "Q_AR_PUL",
    "Q_VEN_PUL",
    "p_LV",
    "p_LA",
    "p_RA",
    "p_RV",
    "Q_MV",
    "Q_AV",
    "Q_TV",
    "Q_PV",
    "V_LV_srg",
];

impl ChannelModel for CoupledModel {
    fn channel_names(&self) -> Vec<String> {
        TRACE_CHANNELS.iter().map(|s| s.to_string()).collect()
    }

    fn channels(&self, t: f64, y: &[f64], out: &mut [f64]) {
        let v = self.view(y);
        let f = circulation::evaluate_flows(t, v.c, &self.params, Some(v.p_lv), self.smoothing);
        out[..circulation::STATE_DIM].copy_from_slice(v.c);
        out[12] = v.p_lv;
        out[13] = f.p_la;
        out[14] = f.p_ra;
        out[15] = f.p_rv;
        out[16] = f.q_mv;
        out[17] = f.q_av;
        out[18] = f.q_tv;
        out[19] = f.q_pv;
        out[20] = self.surrogate.volume(v.z);
    }
}

/// The directly coupled elastance model: the plain 12-state circulation with
/// `p_LV` taken from the contractility-scaled elastance law. Reference for
/// the penalty-convergence checks and available for forward simulation.
#[derive(Debug, Clone)]
pub struct DirectModel {
    pub params: ParameterSet,
    pub smoothing: f64,
}

impl DirectModel {
    pub fn new(params: ParameterSet, smoothing: f64) -> Result<DirectModel> {
        params.validate()?;
        Ok(DirectModel { params, smoothing })
    }

    pub fn initial_state(&self) -> Vec<f64> {
        circulation::initial_state(&self.params).to_vec()
    }

    fn p_lv(&self, t: f64, y: &[f64]) -> f64 {
        lv_elastance_scaled(t, self.params.a_xb, &self.params) * (y[idx::V_LV] - self.params.v0_lv)
    }
}

impl OdeSystem for DirectModel {
    fn dim(&self) -> usize {
        circulation::STATE_DIM
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let p_lv = self.p_lv(t, y);
        circulation::circulation_rhs(t, y, &self.params, Some(p_lv), self.smoothing, dy)
    }
}

impl ChannelModel for DirectModel {
    fn channel_names(&self) -> Vec<String> {
        TRACE_CHANNELS.iter().map(|s| s.to_string()).collect()
    }

    fn channels(&self, t: f64, y: &[f64], out: &mut [f64]) {
        let p_lv = self.p_lv(t, y);
        let f = circulation::evaluate_flows(t, y, &self.params, Some(p_lv), self.smoothing);
        out[..circulation::STATE_DIM].copy_from_slice(&y[..circulation::STATE_DIM]);
        out[12] = p_lv;
        out[13] = f.p_la;
        out[14] = f.p_ra;
        out[15] = f.p_rv;
        out[16] = f.q_mv;
        out[17] = f.q_av;
        out[18] = f.q_tv;
        out[19] = f.q_pv;
        out[20] = y[idx::V_LV];
    }
}
