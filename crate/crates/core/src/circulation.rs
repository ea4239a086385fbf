//! Closed-loop 0D circulation model: four time-varying-elastance chambers,
//! four diode valves and RLC compartments for the systemic and pulmonary
//! arterial/venous branches.
//!
//! The twelve dynamical variables are, in canonical order: chamber volumes
//! `V_LA, V_LV, V_RA, V_RV` (mL), compartment pressures `p_AR_SYS,
//! p_VEN_SYS, p_AR_PUL, p_VEN_PUL` (mmHg) and fluxes `Q_AR_SYS, Q_VEN_SYS,
//! Q_AR_PUL, Q_VEN_PUL` (mL/s).
//!
//! All functions here are pure in `(t, state, params)` and reentrant.

use crate::error::{Error, Result};
use crate::params::{Chamber, ParameterSet};

/// Number of circulation state variables.
pub const STATE_DIM: usize = 12;

/// Canonical state indices.
pub mod idx {
    pub const V_LA: usize = 0;
    pub const V_LV: usize = 1;
    pub const V_RA: usize = 2;
    pub const V_RV: usize = 3;
    pub const P_AR_SYS: usize = 4;
    pub const P_VEN_SYS: usize = 5;
    pub const P_AR_PUL: usize = 6;
    pub const P_VEN_PUL: usize = 7;
    pub const Q_AR_SYS: usize = 8;
    pub const Q_VEN_SYS: usize = 9;
    pub const Q_AR_PUL: usize = 10;
    pub const Q_VEN_PUL: usize = 11;

    pub const NAMES: [&str; 12] = [
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
    ];
}

/// Raised-cosine activation, periodic with period `t_hb`, continuous in `t`.
///
/// `t_contr`/`t_rel` are the contraction/relaxation onsets (with
/// `t_rel = t_contr + dur_contr`), `dur_contr`/`dur_rel` the durations.
pub fn elastance_phi(
    t: f64,
    t_contr: f64,
    t_rel: f64,
    dur_contr: f64,
    dur_rel: f64,
    t_hb: f64,
) -> f64 {
    let m_contr = (t - t_contr).rem_euclid(t_hb);
    if m_contr < dur_contr {
        return 0.5 * (1.0 - (std::f64::consts::PI * m_contr / dur_contr).cos());
    }
    let m_rel = (t - t_rel).rem_euclid(t_hb);
    if m_rel < dur_rel {
        return 0.5 * (1.0 + (std::f64::consts::PI * m_rel / dur_rel).cos());
    }
    0.0
}

/// Activation of one chamber at time `t`.
pub fn chamber_activation(ch: Chamber, t: f64, params: &ParameterSet) -> f64 {
    let (t_contr, dur_contr, dur_rel) = params.chamber_timing(ch);
    elastance_phi(t, t_contr, t_contr + dur_contr, dur_contr, dur_rel, params.t_hb)
}

/// Time-varying elastance `E(t) = E_pass + E_act_max * phi(t)` in mmHg/mL.
pub fn chamber_elastance(ch: Chamber, t: f64, params: &ParameterSet) -> f64 {
    let (e_pass, e_act_max, _) = params.chamber_elastance_constants(ch);
    e_pass + e_act_max * chamber_activation(ch, t, params)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Valve resistance as a function of the transvalvular pressure difference.
///
/// With zero smoothing this is the diode law: `R_min` while the upstream
/// pressure is at or above the downstream pressure (forward gradient, valve
/// open), `R_max` otherwise. With positive smoothing the log-resistance
/// interpolates between the two asymptotes through a logistic in
/// `(p_up - p_down) / width`, which keeps the flow differentiable.
pub fn valve_resistance(p_up: f64, p_down: f64, params: &ParameterSet, width: f64) -> f64 {
    let dp = p_up - p_down;
    if width == 0.0 {
        return if dp >= 0.0 { params.r_min } else { params.r_max };
    }
    let s = sigmoid(dp / width);
    let ln_ratio = (params.r_min / params.r_max).ln();
    params.r_max * (ln_ratio * s).exp()
}

/// Valve flow `q = dp / R(dp)` and its derivative with respect to `dp`.
#[inline]
pub fn valve_flow(dp: f64, r_min: f64, r_max: f64, width: f64) -> (f64, f64) {
    if width == 0.0 {
        let r = if dp >= 0.0 { r_min } else { r_max };
        return (dp / r, 1.0 / r);
    }
    let s = sigmoid(dp / width);
    let ln_ratio = (r_min / r_max).ln();
    let r = r_max * (ln_ratio * s).exp();
    let q = dp / r;
    // dR/d(dp) = R * ln_ratio * s(1-s)/width
    let dq = (1.0 - dp * ln_ratio * s * (1.0 - s) / width) / r;
    (q, dq)
}

/// Chamber pressures and valve flows derived from the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedFlows {
    pub p_la: f64,
    pub p_lv: f64,
    pub p_ra: f64,
    pub p_rv: f64,
    pub q_mv: f64,
    pub q_av: f64,
    pub q_tv: f64,
    pub q_pv: f64,
}

/// Everything the right-hand side and its linearization need at `(t, state)`:
/// activations, elastances, chamber pressures, valve flows and the flow
/// slopes `dq/d(dp)`.
#[derive(Debug, Clone, Copy)]
pub struct FlowEval {
    pub phi_la: f64,
    pub phi_lv: f64,
    pub phi_ra: f64,
    pub phi_rv: f64,
    pub e_la: f64,
    pub e_lv: f64,
    pub e_ra: f64,
    pub e_rv: f64,
    pub p_la: f64,
    pub p_lv: f64,
    pub p_ra: f64,
    pub p_rv: f64,
    pub q_mv: f64,
    pub q_av: f64,
    pub q_tv: f64,
    pub q_pv: f64,
    pub dq_mv: f64,
    pub dq_av: f64,
    pub dq_tv: f64,
    pub dq_pv: f64,
    /// True when `p_lv` was supplied externally rather than taken from the
    /// elastance law (surrogate coupling).
    pub lv_pressure_external: bool,
}

/// Evaluates chamber pressures and valve flows. When `lv_pressure` is given
/// it replaces the elastance-based left-ventricular pressure.
pub fn evaluate_flows(
    t: f64,
    state: &[f64],
    params: &ParameterSet,
    lv_pressure: Option<f64>,
    smoothing: f64,
) -> FlowEval {
    debug_assert!(state.len() >= STATE_DIM);
    let phi_la = chamber_activation(Chamber::La, t, params);
    let phi_lv = chamber_activation(Chamber::Lv, t, params);
    let phi_ra = chamber_activation(Chamber::Ra, t, params);
    let phi_rv = chamber_activation(Chamber::Rv, t, params);

    let e_la = params.e_la_pass + params.e_la_act_max * phi_la;
    let e_lv = params.e_lv_pass + params.e_lv_act_max * phi_lv;
    let e_ra = params.e_ra_pass + params.e_ra_act_max * phi_ra;
    let e_rv = params.e_rv_pass + params.e_rv_act * phi_rv;

    let p_la = e_la * (state[idx::V_LA] - params.v0_la);
    let p_ra = e_ra * (state[idx::V_RA] - params.v0_ra);
    let p_rv = e_rv * (state[idx::V_RV] - params.v0_rv);
    let (p_lv, lv_pressure_external) = match lv_pressure {
        Some(p) => (p, true),
        None => (e_lv * (state[idx::V_LV] - params.v0_lv), false),
    };

    let (r_min, r_max) = (params.r_min, params.r_max);
    let (q_mv, dq_mv) = valve_flow(p_la - p_lv, r_min, r_max, smoothing);
    let (q_av, dq_av) = valve_flow(p_lv - state[idx::P_AR_SYS], r_min, r_max, smoothing);
    let (q_tv, dq_tv) = valve_flow(p_ra - p_rv, r_min, r_max, smoothing);
    let (q_pv, dq_pv) = valve_flow(p_rv - state[idx::P_AR_PUL], r_min, r_max, smoothing);

    FlowEval {
        phi_la,
        phi_lv,
        phi_ra,
        phi_rv,
        e_la,
        e_lv,
        e_ra,
        e_rv,
        p_la,
        p_lv,
        p_ra,
        p_rv,
        q_mv,
        q_av,
        q_tv,
        q_pv,
        dq_mv,
        dq_av,
        dq_tv,
        dq_pv,
        lv_pressure_external,
    }
}

/// Chamber pressures and valve fluxes at `(t, state)`.
pub fn derived_flows(
    t: f64,
    state: &[f64],
    params: &ParameterSet,
    lv_pressure: Option<f64>,
    smoothing: f64,
) -> DerivedFlows {
    let f = evaluate_flows(t, state, params, lv_pressure, smoothing);
    DerivedFlows {
        p_la: f.p_la,
        p_lv: f.p_lv,
        p_ra: f.p_ra,
        p_rv: f.p_rv,
        q_mv: f.q_mv,
        q_av: f.q_av,
        q_tv: f.q_tv,
        q_pv: f.q_pv,
    }
}

/// Writes the twelve state derivatives given a precomputed [`FlowEval`].
pub fn rhs_from_flows(flows: &FlowEval, state: &[f64], params: &ParameterSet, out: &mut [f64]) {
    debug_assert!(out.len() >= STATE_DIM);
    out[idx::V_LA] = state[idx::Q_VEN_PUL] - flows.q_mv;
    out[idx::V_LV] = flows.q_mv - flows.q_av;
    out[idx::V_RA] = state[idx::Q_VEN_SYS] - flows.q_tv;
    out[idx::V_RV] = flows.q_tv - flows.q_pv;
    out[idx::P_AR_SYS] = (flows.q_av - state[idx::Q_AR_SYS]) / params.c_ar_sys;
    out[idx::P_VEN_SYS] = (state[idx::Q_AR_SYS] - state[idx::Q_VEN_SYS]) / params.c_ven_sys;
    out[idx::P_AR_PUL] = (flows.q_pv - state[idx::Q_AR_PUL]) / params.c_ar_pul;
    out[idx::P_VEN_PUL] = (state[idx::Q_AR_PUL] - state[idx::Q_VEN_PUL]) / params.c_ven_pul;
    out[idx::Q_AR_SYS] = -(params.r_ar_sys / params.l_ar_sys) * state[idx::Q_AR_SYS]
        - (state[idx::P_VEN_SYS] - state[idx::P_AR_SYS]) / params.l_ar_sys;
    out[idx::Q_VEN_SYS] = -(params.r_ven_sys / params.l_ven_sys) * state[idx::Q_VEN_SYS]
        - (flows.p_ra - state[idx::P_VEN_SYS]) / params.l_ven_sys;
    out[idx::Q_AR_PUL] = -(params.r_ar_pul / params.l_ar_pul) * state[idx::Q_AR_PUL]
        - (state[idx::P_VEN_PUL] - state[idx::P_AR_PUL]) / params.l_ar_pul;
    out[idx::Q_VEN_PUL] = -(params.r_ven_pul / params.l_ven_pul) * state[idx::Q_VEN_PUL]
        - (flows.p_la - state[idx::P_VEN_PUL]) / params.l_ven_pul;
}

/// The twelve right-hand sides of the closed loop. A non-finite output
/// signals an invalid state and is reported, never clamped.
pub fn circulation_rhs(
    t: f64,
    state: &[f64],
    params: &ParameterSet,
    lv_pressure: Option<f64>,
    smoothing: f64,
    out: &mut [f64],
) -> Result<()> {
    let flows = evaluate_flows(t, state, params, lv_pressure, smoothing);
    rhs_from_flows(&flows, state, params, out);
    for (i, v) in out.iter().enumerate().take(STATE_DIM) {
        if !v.is_finite() {
            return Err(Error::non_finite(format!(
                "circulation rhs component {} at t = {t:.6}",
                idx::NAMES[i]
            )));
        }
    }
    Ok(())
}

/// Conserved total: chamber volumes plus capacitive compartment volumes
/// `sum_i C_i * p_i`.
pub fn total_blood_volume(state: &[f64], params: &ParameterSet) -> f64 {
    state[idx::V_LA]
        + state[idx::V_LV]
        + state[idx::V_RA]
        + state[idx::V_RV]
        + params.c_ar_sys * state[idx::P_AR_SYS]
        + params.c_ven_sys * state[idx::P_VEN_SYS]
        + params.c_ar_pul * state[idx::P_AR_PUL]
        + params.c_ven_pul * state[idx::P_VEN_PUL]
}

/// Chamber share of the initial heart volume, in canonical chamber order
/// (LA, LV, RA, RV).
pub const INITIAL_VOLUME_FRACTIONS: [f64; 4] = [0.16, 0.34, 0.16, 0.34];

/// Initial compartment pressures (AR-SYS, VEN-SYS, AR-PUL, VEN-PUL) in mmHg.
///
/// Fitted so that, at baseline parameters, the periodic attractor holds the
/// full `V_heart_tot` in the chambers at the beat boundary; starting
/// pressures far from the attractor excite the slow venous redistribution
/// mode (time constant R_VEN_SYS * C_VEN_SYS ~ 19 s), which five beats
/// cannot damp.
pub const INITIAL_PRESSURES: [f64; 4] = [100.6, 46.9, 21.5, 19.3];

/// Initial condition: chamber volumes split `V_heart_tot` by fixed fractions,
/// compartment pressures start near the baseline attractor, fluxes at zero.
pub fn initial_state(params: &ParameterSet) -> [f64; STATE_DIM] {
    let v = params.v_heart_tot;
    let mut s = [0.0; STATE_DIM];
    s[idx::V_LA] = INITIAL_VOLUME_FRACTIONS[0] * v;
    s[idx::V_LV] = INITIAL_VOLUME_FRACTIONS[1] * v;
    s[idx::V_RA] = INITIAL_VOLUME_FRACTIONS[2] * v;
    s[idx::V_RV] = INITIAL_VOLUME_FRACTIONS[3] * v;
    s[idx::P_AR_SYS] = INITIAL_PRESSURES[0];
    s[idx::P_VEN_SYS] = INITIAL_PRESSURES[1];
    s[idx::P_AR_PUL] = INITIAL_PRESSURES[2];
    s[idx::P_VEN_PUL] = INITIAL_PRESSURES[3];
    s
}
