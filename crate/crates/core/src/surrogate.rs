//! Left-ventricle surrogate layer.
//!
//! Two interchangeable surrogates drive the LV volume state:
//!
//! - [`AnnSurrogate`]: a fully connected feedforward network acting as a
//!   state-space model `dz/dt = NN(z, p_LV, cos(2*pi*t/T_HB),
//!   sin(2*pi*t/T_HB), theta_EM)`, loaded from a JSON weight file. The first
//!   latent coordinate is the LV volume (output-inside-the-state).
//! - [`ElastanceSurrogate`]: a first-order wall model relaxing the volume
//!   toward the time-varying elastance pressure law, with contractility
//!   `a_XB` scaling the active elastance linearly around its baseline. This
//!   is the default when no trained weights exist.
//!
//! Surrogates are immutable after construction; evaluations are pure.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circulation::chamber_activation;
use crate::error::{Error, Result};
use crate::params::{Chamber, ParamId, ParameterSet};

/// Hidden-layer activation of a loaded network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

/// One dense layer, row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnLayer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Weights, biases and input wiring of a network surrogate.
///
/// The input vector is `[z (n_z), p_LV, cos(2*pi*t/T_HB), sin(2*pi*t/T_HB),
/// theta_EM...]`, so the first layer width must be `n_z + 3 + |theta_names|`
/// and the last layer must produce `n_z` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnWeights {
    pub n_z: usize,
    pub theta_names: Vec<ParamId>,
    pub activation: Activation,
    pub layers: Vec<AnnLayer>,
}

impl AnnWeights {
    pub fn input_dim(&self) -> usize {
        self.n_z + 3 + self.theta_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 || self.layers.is_empty() {
            return Err(Error::config("network needs n_z >= 1 and at least one layer"));
        }
        let mut width = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.cols != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    got: layer.cols,
                });
            }
            if layer.w.len() != layer.rows * layer.cols || layer.b.len() != layer.rows {
                return Err(Error::DimensionMismatch {
                    expected: layer.rows * layer.cols,
                    got: layer.w.len(),
                });
            }
            if layer.w.iter().chain(layer.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("weights of layer {i}")));
            }
            width = layer.rows;
        }
        if width != self.n_z {
            return Err(Error::DimensionMismatch {
                expected: self.n_z,
                got: width,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// Loads and validates a weight file.
pub fn load_weights(path: &Path) -> Result<AnnWeights> {
    let file = std::fs::File::open(path)?;
    let weights: AnnWeights = serde_json::from_reader(file)?;
    weights.validate()?;
    Ok(weights)
}

/// Scratch buffers for network evaluation and its reverse pass.
#[derive(Debug, Clone, Default)]
pub struct SurrogateScratch {
    input: Vec<f64>,
    /// Post-activation output of each layer.
    acts: Vec<Vec<f64>>,
    delta_a: Vec<f64>,
    delta_b: Vec<f64>,
}

impl SurrogateScratch {
    pub fn for_surrogate(s: &LvSurrogate) -> SurrogateScratch {
        match s {
            LvSurrogate::Elastance(_) => SurrogateScratch::default(),
            LvSurrogate::Ann(ann) => {
                let w = &ann.weights;
                SurrogateScratch {
                    input: vec![0.0; w.input_dim()],
                    acts: w.layers.iter().map(|l| vec![0.0; l.rows]).collect(),
                    delta_a: vec![0.0; w.layers.iter().map(|l| l.cols.max(l.rows)).max().unwrap()],
                    delta_b: vec![0.0; w.layers.iter().map(|l| l.cols.max(l.rows)).max().unwrap()],
                }
            }
        }
    }
}

/// Network surrogate with its input wiring resolved against the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnSurrogate {
    pub weights: AnnWeights,
}

impl AnnSurrogate {
    pub fn new(weights: AnnWeights) -> Result<AnnSurrogate> {
        weights.validate()?;
        Ok(AnnSurrogate { weights })
    }

    fn assemble_input(
        &self,
        t: f64,
        z: &[f64],
        p_lv: f64,
        params: &ParameterSet,
        input: &mut [f64],
    ) {
        let n_z = self.weights.n_z;
        let omega = 2.0 * std::f64::consts::PI / params.t_hb;
        input[..n_z].copy_from_slice(z);
        input[n_z] = p_lv;
        input[n_z + 1] = (omega * t).cos();
        input[n_z + 2] = (omega * t).sin();
        for (i, &id) in self.weights.theta_names.iter().enumerate() {
            input[n_z + 3 + i] = params.get(id);
        }
    }

    /// Forward pass, caching per-layer activations for the reverse pass.
    fn forward(&self, ws: &mut SurrogateScratch, out: &mut [f64]) {
        let layers = &self.weights.layers;
        let n_layers = layers.len();
        for (li, layer) in layers.iter().enumerate() {
            // Split borrow: read the previous activation, write the current.
            let (prev, cur) = ws.acts.split_at_mut(li);
            let src = if li == 0 { &ws.input[..] } else { &prev[li - 1][..] };
            let dst = &mut cur[0];
            for r in 0..layer.rows {
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                let mut acc = layer.b[r];
                for (x, w) in src.iter().zip(row) {
                    acc += x * w;
                }
                dst[r] = if li + 1 < n_layers && self.weights.activation == Activation::Tanh {
                    acc.tanh()
                } else {
                    acc
                };
            }
        }
        out.copy_from_slice(ws.acts.last().unwrap());
    }

    /// Reverse pass: given `v` on the outputs, writes `v^T dNN/d(input)`.
    fn backward(&self, v: &[f64], ws: &mut SurrogateScratch, d_input: &mut [f64]) {
        let layers = &self.weights.layers;
        let n_layers = layers.len();
        ws.delta_a[..v.len()].copy_from_slice(v);
        for li in (0..n_layers).rev() {
            let layer = &layers[li];
            // delta on the layer's input
            for c in 0..layer.cols {
                let mut acc = 0.0;
                for r in 0..layer.rows {
                    acc += ws.delta_a[r] * layer.w[r * layer.cols + c];
                }
                ws.delta_b[c] = acc;
            }
            if li > 0 {
                // pull back through the previous layer's tanh (every layer
                // but the output one is activated)
                if self.weights.activation == Activation::Tanh {
                    let prev_out = &ws.acts[li - 1];
                    for c in 0..layer.cols {
                        ws.delta_b[c] *= 1.0 - prev_out[c] * prev_out[c];
                    }
                }
                std::mem::swap(&mut ws.delta_a, &mut ws.delta_b);
            } else {
                d_input[..layer.cols].copy_from_slice(&ws.delta_b[..layer.cols]);
            }
        }
    }
}

/// Single forward pass of the network state-space model.
pub fn ann_rhs(
    t: f64,
    z: &[f64],
    p_lv: f64,
    params: &ParameterSet,
    surrogate: &AnnSurrogate,
    ws: &mut SurrogateScratch,
    out: &mut [f64],
) -> Result<()> {
    let w = &surrogate.weights;
    if z.len() != w.n_z || out.len() != w.n_z {
        return Err(Error::DimensionMismatch {
            expected: w.n_z,
            got: z.len(),
        });
    }
    surrogate.assemble_input(t, z, p_lv, params, &mut ws.input);
    surrogate.forward(ws, out);
    Ok(())
}

/// Pressure law of the built-in elastance surrogate:
/// `p = [E_pass + (a_XB / a_XB_baseline) * E_act_max * phi_LV(t)] * (V - V0)`.
///
/// Contractility scales the active elastance linearly and is normalized so
/// that the baseline value reproduces the registry LV law exactly.
pub fn elastance_surrogate_pressure(v_lv: f64, t: f64, a_xb: f64, params: &ParameterSet) -> f64 {
    lv_elastance_scaled(t, a_xb, params) * (v_lv - params.v0_lv)
}

/// Contractility-scaled LV elastance used by the surrogate.
pub fn lv_elastance_scaled(t: f64, a_xb: f64, params: &ParameterSet) -> f64 {
    let phi = chamber_activation(Chamber::Lv, t, params);
    params.e_lv_pass + (a_xb / ParamId::AXb.baseline()) * params.e_lv_act_max * phi
}

/// First-order elastance wall model: the LV volume relaxes toward agreement
/// with the pressure law at rate `wall_rate` (mL per mmHg per s).
///
/// `dV/dt = wall_rate * (p_LV - p_law(V, t))`. Larger rates track the pure
/// elastance closed loop more closely but stiffen the coupled system (the
/// fast mode scales with `wall_rate * E_max`); the default keeps the
/// limit-cycle LV volume within ~0.25 mL of the directly coupled model at
/// the default coupling penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElastanceSurrogate {
    pub wall_rate: f64,
}

impl Default for ElastanceSurrogate {
    fn default() -> Self {
        ElastanceSurrogate { wall_rate: 1e4 }
    }
}

/// The pluggable LV surrogate. Both variants expose the same rhs/volume
/// interface; the first latent coordinate is the LV volume.
#[derive(Debug, Clone)]
pub enum LvSurrogate {
    Elastance(ElastanceSurrogate),
    Ann(AnnSurrogate),
}

impl LvSurrogate {
    pub fn elastance() -> LvSurrogate {
        LvSurrogate::Elastance(ElastanceSurrogate::default())
    }

    pub fn n_z(&self) -> usize {
        match self {
            LvSurrogate::Elastance(_) => 1,
            LvSurrogate::Ann(a) => a.weights.n_z,
        }
    }

    /// LV volume encoded in the latent state.
    pub fn volume(&self, z: &[f64]) -> f64 {
        z[0]
    }

    pub fn rhs(
        &self,
        t: f64,
        z: &[f64],
        p_lv: f64,
        params: &ParameterSet,
        ws: &mut SurrogateScratch,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            LvSurrogate::Elastance(e) => {
                out[0] =
                    e.wall_rate * (p_lv - elastance_surrogate_pressure(z[0], t, params.a_xb, params));
                Ok(())
            }
            LvSurrogate::Ann(a) => ann_rhs(t, z, p_lv, params, a, ws, out),
        }
    }

    /// Reverse-mode products of the z-block right-hand side: accumulates
    /// `v^T dg_z/dz` into `d_z`, returns `v^T dg_z/d(p_LV)`, and adds
    /// parameter contributions for the requested ids into `d_theta`.
    ///
    /// Must be called right after [`LvSurrogate::rhs`] at the same point so
    /// the cached activations match.
    #[allow(clippy::too_many_arguments)]
    pub fn vjp(
        &self,
        t: f64,
        z: &[f64],
        p_lv: f64,
        params: &ParameterSet,
        v: &[f64],
        ws: &mut SurrogateScratch,
        d_z: &mut [f64],
        theta_ids: &[ParamId],
        d_theta: &mut [f64],
    ) -> f64 {
        match self {
            LvSurrogate::Elastance(e) => {
                let elast = lv_elastance_scaled(t, params.a_xb, params);
                d_z[0] += -v[0] * e.wall_rate * elast;
                for (i, id) in theta_ids.iter().enumerate() {
                    if *id == ParamId::AXb {
                        let phi = chamber_activation(Chamber::Lv, t, params);
                        let de_da = params.e_lv_act_max * phi / ParamId::AXb.baseline();
                        d_theta[i] += -v[0] * e.wall_rate * de_da * (z[0] - params.v0_lv);
                    }
                }
                v[0] * e.wall_rate
            }
            LvSurrogate::Ann(a) => {
                let n_z = a.weights.n_z;
                let mut d_input = vec![0.0; a.weights.input_dim()];
                // Re-run the forward pass to refresh cached activations at
                // (t, z, p_lv); the caller's rhs may have moved on.
                a.assemble_input(t, z, p_lv, params, &mut ws.input);
                let mut out = vec![0.0; n_z];
                a.forward(ws, &mut out);
                a.backward(v, ws, &mut d_input);
                for j in 0..n_z {
                    d_z[j] += d_input[j];
                }
                for (i, id) in theta_ids.iter().enumerate() {
                    if let Some(pos) = a.weights.theta_names.iter().position(|n| n == id) {
                        d_theta[i] += d_input[n_z + 3 + pos];
                    }
                }
                d_input[n_z]
            }
        }
    }
}
