//! Quantity-of-interest extraction and the multi-term fitting cost.
//!
//! The cost sums, over pressure channels (LA, LV, RA, RV, AR-SYS) and volume
//! channels (LA, LV, RA, RV), weighted discrete-L2 trace terms and pointwise
//! max/min/stroke-volume terms, each normalized by the time-average of the
//! squared observed signal. Extrema are taken over the discrete sample grid
//! of the last heartbeat.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::TimeTrace;
use crate::params::ParameterVector;

/// Observable channels of the coupled model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelId {
    PLa,
    PLv,
    PRa,
    PRv,
    PArSys,
    VLa,
    VLv,
    VRa,
    VRv,
}

impl ChannelId {
    pub const ALL: [ChannelId; 9] = [
        ChannelId::PLa,
        ChannelId::PLv,
        ChannelId::PRa,
        ChannelId::PRv,
        ChannelId::PArSys,
        ChannelId::VLa,
        ChannelId::VLv,
        ChannelId::VRa,
        ChannelId::VRv,
    ];

    /// The non-invasively measurable subset (systemic arterial pressure and
    /// the four chamber volumes).
    pub const NON_INVASIVE: [ChannelId; 5] = [
        ChannelId::PArSys,
        ChannelId::VLa,
        ChannelId::VLv,
        ChannelId::VRa,
        ChannelId::VRv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::PLa => "p_LA",
            ChannelId::PLv => "p_LV",
            ChannelId::PRa => "p_RA",
            ChannelId::PRv => "p_RV",
            ChannelId::PArSys => "p_AR_SYS",
            ChannelId::VLa => "V_LA",
            ChannelId::VLv => "V_LV",
            ChannelId::VRa => "V_RA",
            ChannelId::VRv => "V_RV",
        }
    }

    /// Short compartment label used in weight files ("LA" ... "AR-SYS").
    pub fn label(self) -> &'static str {
        match self {
            ChannelId::PLa | ChannelId::VLa => "LA",
            ChannelId::PLv | ChannelId::VLv => "LV",
            ChannelId::PRa | ChannelId::VRa => "RA",
            ChannelId::PRv | ChannelId::VRv => "RV",
            ChannelId::PArSys => "AR-SYS",
        }
    }

    pub fn is_pressure(self) -> bool {
        matches!(
            self,
            ChannelId::PLa | ChannelId::PLv | ChannelId::PRa | ChannelId::PRv | ChannelId::PArSys
        )
    }

    pub fn parse(name: &str) -> Result<ChannelId> {
        ChannelId::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }
}

impl Serialize for ChannelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ChannelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        ChannelId::parse(&name).map_err(serde::de::Error::custom)
    }
}

/// Pressure channels in weight-array order.
pub const PRESSURE_CHANNELS: [ChannelId; 5] = [
    ChannelId::PLa,
    ChannelId::PLv,
    ChannelId::PRa,
    ChannelId::PRv,
    ChannelId::PArSys,
];

/// Volume channels in weight-array order.
pub const VOLUME_CHANNELS: [ChannelId; 4] =
    [ChannelId::VLa, ChannelId::VLv, ChannelId::VRa, ChannelId::VRv];

/// Scalar summaries of one channel over a beat.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQoi {
    pub id: ChannelId,
    pub trace: Vec<f64>,
    pub max: f64,
    pub min: f64,
    pub argmax: usize,
    pub argmin: usize,
    /// max - min; the stroke volume for volume channels.
    pub sv: f64,
    /// Time-average of the squared signal (trapezoidal), the normalizer.
    pub mu_sq: f64,
}

/// QoIs for a set of channels sharing one uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QoISet {
    pub dt: f64,
    pub channels: Vec<ChannelQoi>,
}

impl QoISet {
    pub fn channel(&self, id: ChannelId) -> Result<&ChannelQoi> {
        self.channels
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::MissingChannel(id.name().to_string()))
    }

    pub fn has(&self, id: ChannelId) -> bool {
        self.channels.iter().any(|c| c.id == id)
    }
}

fn trapezoid_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k + 1 == n {
        0.5
    } else {
        1.0
    }
}

fn summarize(id: ChannelId, trace: &[f64], dt: f64) -> ChannelQoi {
    let n = trace.len();
    let (mut max, mut min) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut argmax, mut argmin) = (0, 0);
    let mut sq_sum = 0.0;
    for (k, &v) in trace.iter().enumerate() {
        if v > max {
            max = v;
            argmax = k;
        }
        if v < min {
            min = v;
            argmin = k;
        }
        sq_sum += trapezoid_weight(k, n) * v * v;
    }
    let window = dt * (n - 1) as f64;
    ChannelQoi {
        id,
        trace: trace.to_vec(),
        max,
        min,
        argmax,
        argmin,
        sv: max - min,
        mu_sq: sq_sum * dt / window,
    }
}

/// Extracts the requested channel QoIs from a last-beat trace.
pub fn extract_qois(trace: &TimeTrace, channels: &[ChannelId]) -> Result<QoISet> {
    if trace.n_samples() < 2 {
        return Err(Error::GridMismatch(
            "trace must cover one full beat (>= 2 samples)".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(channels.len());
    for &id in channels {
        let data = trace.channel(id.name())?;
        out.push(summarize(id, data, trace.dt_sample));
    }
    Ok(QoISet {
        dt: trace.dt_sample,
        channels: out,
    })
}

/// Builds a QoI set directly from per-channel sample vectors on a uniform
/// grid (used for observation data).
pub fn qois_from_samples(dt: f64, channels: &[(ChannelId, Vec<f64>)]) -> QoISet {
    QoISet {
        dt,
        channels: channels
            .iter()
            .map(|(id, tr)| summarize(*id, tr, dt))
            .collect(),
    }
}

/// Nonnegative weights of the cost terms. Array order follows
/// [`PRESSURE_CHANNELS`] / [`VOLUME_CHANNELS`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// Pressure trace terms.
    pub alpha: [f64; 5],
    /// Pressure maximum terms.
    pub beta: [f64; 5],
    /// Pressure minimum terms.
    pub gamma: [f64; 5],
    /// Volume trace terms.
    pub delta: [f64; 4],
    /// Volume maximum terms.
    pub epsilon: [f64; 4],
    /// Volume minimum terms.
    pub zeta: [f64; 4],
    /// Stroke-volume terms.
    pub eta: [f64; 4],
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            alpha: [0.0; 5],
            beta: [0.0; 5],
            gamma: [0.0; 5],
            delta: [0.0; 4],
            epsilon: [0.0; 4],
            zeta: [0.0; 4],
            eta: [0.0; 4],
        }
    }
}

impl CostWeights {
    /// Unit trace weights for the observed channels, zero elsewhere (the
    /// default weighting of the twin experiments).
    pub fn traces_only(observed: &[ChannelId]) -> CostWeights {
        let mut w = CostWeights::default();
        for &ch in observed {
            if ch.is_pressure() {
                let i = PRESSURE_CHANNELS.iter().position(|c| *c == ch).unwrap();
                w.alpha[i] = 1.0;
            } else {
                let i = VOLUME_CHANNELS.iter().position(|c| *c == ch).unwrap();
                w.delta[i] = 1.0;
            }
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain(&self.gamma)
            .chain(&self.delta)
            .chain(&self.epsilon)
            .chain(&self.zeta)
            .chain(&self.eta);
        for &v in all {
            if !(v >= 0.0) {
                return Err(Error::config(format!("cost weights must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Channels with any nonzero weight.
    pub fn active_channels(&self) -> Vec<ChannelId> {
        let mut out = Vec::new();
        for (i, &ch) in PRESSURE_CHANNELS.iter().enumerate() {
            if self.alpha[i] != 0.0 || self.beta[i] != 0.0 || self.gamma[i] != 0.0 {
                out.push(ch);
            }
        }
        for (i, &ch) in VOLUME_CHANNELS.iter().enumerate() {
            if self.delta[i] != 0.0 || self.epsilon[i] != 0.0 || self.zeta[i] != 0.0
                || self.eta[i] != 0.0
            {
                out.push(ch);
            }
        }
        out
    }
}

impl Serialize for CostWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        fn family<const N: usize>(
            weights: &[f64; N],
            channels: &[ChannelId; N],
        ) -> BTreeMap<String, f64> {
            let mut m = BTreeMap::new();
            for (i, &c) in channels.iter().enumerate() {
                if weights[i] != 0.0 {
                    m.insert(c.label().to_string(), weights[i]);
                }
            }
            m
        }
        let mut map = BTreeMap::new();
        map.insert("alpha", family(&self.alpha, &PRESSURE_CHANNELS));
        map.insert("beta", family(&self.beta, &PRESSURE_CHANNELS));
        map.insert("gamma", family(&self.gamma, &PRESSURE_CHANNELS));
        map.insert("delta", family(&self.delta, &VOLUME_CHANNELS));
        map.insert("epsilon", family(&self.epsilon, &VOLUME_CHANNELS));
        map.insert("zeta", family(&self.zeta, &VOLUME_CHANNELS));
        map.insert("eta", family(&self.eta, &VOLUME_CHANNELS));
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CostWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::deserialize(d)?;
        let mut w = CostWeights::default();
        fn fill<const N: usize, E: serde::de::Error>(
            dst: &mut [f64; N],
            channels: &[ChannelId; N],
            src: Option<&BTreeMap<String, f64>>,
            family: &str,
        ) -> std::result::Result<(), E> {
            if let Some(src) = src {
                for (label, &v) in src {
                    let i = channels
                        .iter()
                        .position(|c| c.label() == label)
                        .ok_or_else(|| {
                            E::custom(format!("unknown channel label `{label}` in `{family}`"))
                        })?;
                    dst[i] = v;
                }
            }
            Ok(())
        }
        fill(&mut w.alpha, &PRESSURE_CHANNELS, raw.get("alpha"), "alpha")?;
        fill(&mut w.beta, &PRESSURE_CHANNELS, raw.get("beta"), "beta")?;
        fill(&mut w.gamma, &PRESSURE_CHANNELS, raw.get("gamma"), "gamma")?;
        fill(&mut w.delta, &VOLUME_CHANNELS, raw.get("delta"), "delta")?;
        fill(&mut w.epsilon, &VOLUME_CHANNELS, raw.get("epsilon"), "epsilon")?;
        fill(&mut w.zeta, &VOLUME_CHANNELS, raw.get("zeta"), "zeta")?;
        fill(&mut w.eta, &VOLUME_CHANNELS, raw.get("eta"), "eta")?;
        for (k, _) in raw.iter() {
            if !["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta"]
                .contains(&k.as_str())
            {
                return Err(serde::de::Error::custom(format!(
                    "unknown weight family `{k}`"
                )));
            }
        }
        w.validate().map_err(serde::de::Error::custom)?;
        Ok(w)
    }
}

struct TermWeights {
    trace: f64,
    max: f64,
    min: f64,
    sv: f64,
}

fn weights_for(w: &CostWeights, ch: ChannelId) -> TermWeights {
    if ch.is_pressure() {
        let i = PRESSURE_CHANNELS.iter().position(|c| *c == ch).unwrap();
        TermWeights {
            trace: w.alpha[i],
            max: w.beta[i],
            min: w.gamma[i],
            sv: 0.0,
        }
    } else {
        let i = VOLUME_CHANNELS.iter().position(|c| *c == ch).unwrap();
        TermWeights {
            trace: w.delta[i],
            max: w.epsilon[i],
            min: w.zeta[i],
            sv: w.eta[i],
        }
    }
}

fn check_grids(sim: &ChannelQoi, obs: &ChannelQoi, dt_sim: f64, dt_obs: f64) -> Result<()> {
    if sim.trace.len() != obs.trace.len() || (dt_sim - dt_obs).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "channel {}: sim {} samples @ {dt_sim}, obs {} samples @ {dt_obs}",
            sim.id.name(),
            sim.trace.len(),
            obs.trace.len()
        )));
    }
    Ok(())
}

/// The multi-term fitting cost `J`.
///
/// Trace terms are trapezoidal discrete-L2 norms over the beat divided by
/// the observation-side normalizer; pointwise terms are squared differences
/// of extrema (and stroke volumes for volume channels) over the same
/// normalizer. Channels with all-zero weights may be absent from either set.
pub fn cost_functional(sim: &QoISet, obs: &QoISet, w: &CostWeights) -> Result<f64> {
    w.validate()?;
    let mut j = 0.0;
    for ch in ChannelId::ALL {
        let tw = weights_for(w, ch);
        if tw.trace == 0.0 && tw.max == 0.0 && tw.min == 0.0 && tw.sv == 0.0 {
            continue;
        }
        let s = sim.channel(ch)?;
        let o = obs.channel(ch)?;
        check_grids(s, o, sim.dt, obs.dt)?;
        let mu = o.mu_sq;
        if !(mu > 0.0) {
            return Err(Error::config(format!(
                "normalizer for channel {} is not positive",
                ch.name()
            )));
        }
        if tw.trace != 0.0 {
            let n = s.trace.len();
            let mut accum = 0.0;
            for k in 0..n {
                let d = s.trace[k] - o.trace[k];
                accum += trapezoid_weight(k, n) * d * d;
            }
            j += tw.trace * accum * sim.dt / mu;
        }
        if tw.max != 0.0 {
            let d = s.max - o.max;
            j += tw.max * d * d / mu;
        }
        if tw.min != 0.0 {
            let d = s.min - o.min;
            j += tw.min * d * d / mu;
        }
        if tw.sv != 0.0 {
            let d = s.sv - o.sv;
            j += tw.sv * d * d / mu;
        }
    }
    Ok(j)
}

/// Per-sample derivative of `J` with respect to the simulated traces, one
/// vector per channel of `sim` (zeros for unweighted channels). Extrema and
/// stroke-volume terms attribute their derivative to the argmax/argmin
/// samples (first occurrence on ties).
pub fn cost_sample_gradient(sim: &QoISet, obs: &QoISet, w: &CostWeights) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(sim.channels.len());
    for s in &sim.channels {
        let mut g = vec![0.0; s.trace.len()];
        let tw = weights_for(w, s.id);
        if tw.trace != 0.0 || tw.max != 0.0 || tw.min != 0.0 || tw.sv != 0.0 {
            let o = obs.channel(s.id)?;
            check_grids(s, o, sim.dt, obs.dt)?;
            let mu = o.mu_sq;
            let n = s.trace.len();
            if tw.trace != 0.0 {
                for k in 0..n {
                    g[k] += 2.0 * tw.trace * trapezoid_weight(k, n) * sim.dt
                        * (s.trace[k] - o.trace[k])
                        / mu;
                }
            }
            if tw.max != 0.0 {
                g[s.argmax] += 2.0 * tw.max * (s.max - o.max) / mu;
            }
            if tw.min != 0.0 {
                g[s.argmin] += 2.0 * tw.min * (s.min - o.min) / mu;
            }
            if tw.sv != 0.0 {
                let d = 2.0 * tw.sv * (s.sv - o.sv) / mu;
                g[s.argmax] += d;
                g[s.argmin] -= d;
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Root-mean-square relative error over the estimated parameters.
pub fn relative_l2_error(est: &ParameterVector, exact: &ParameterVector) -> Result<f64> {
    if est.ids != exact.ids {
        return Err(Error::config(
            "parameter vectors must share names and ordering",
        ));
    }
    let mut acc = 0.0;
    for i in 0..est.len() {
        if exact.values[i] == 0.0 {
            return Err(Error::InvalidParameter {
                name: est.ids[i].name().to_string(),
                reason: "exact value must be nonzero for a relative error".to_string(),
            });
        }
        let r = (est.values[i] - exact.values[i]) / exact.values[i];
        acc += r * r;
    }
    Ok((acc / est.len() as f64).sqrt())
}
