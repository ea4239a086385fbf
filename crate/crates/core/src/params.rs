//! Canonical registry of model constants: names, units, baseline values and
//! admissible intervals.
//!
//! Every constant of the circulation model and the left-ventricle surrogate
//! lives in [`ParameterSet`]. Estimation targets are selected by [`ParamId`]
//! into a [`ParameterVector`] carrying per-entry closed bounds. Units are
//! fixed (mmHg, mL, s; MPa for contractility) with no runtime conversion.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cardiac chamber selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chamber {
    La,
    Lv,
    Ra,
    Rv,
}

impl Chamber {
    pub const ALL: [Chamber; 4] = [Chamber::La, Chamber::Lv, Chamber::Ra, Chamber::Rv];

    pub fn label(self) -> &'static str {
        match self {
            Chamber::La => "LA",
            Chamber::Lv => "LV",
            Chamber::Ra => "RA",
            Chamber::Rv => "RV",
        }
    }
}

macro_rules! param_table {
    ($(($variant:ident, $field:ident, $name:literal, $unit:literal, $baseline:expr)),+ $(,)?) => {
        /// Identifier of a registered model constant.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum ParamId {
            $($variant),+
        }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$variant),+];

            /// Canonical display name, used in files and CLI flags.
            pub fn name(self) -> &'static str {
                match self {
                    $(ParamId::$variant => $name),+
                }
            }

            pub fn unit(self) -> &'static str {
                match self {
                    $(ParamId::$variant => $unit),+
                }
            }

            /// Published baseline value.
            pub fn baseline(self) -> f64 {
                match self {
                    $(ParamId::$variant => $baseline),+
                }
            }

            pub fn parse(name: &str) -> Result<ParamId> {
                match name {
                    $($name => Ok(ParamId::$variant),)+
                    _ => Err(Error::UnknownParameter(name.to_string())),
                }
            }
        }

        /// Full named collection of model constants.
        ///
        /// Immutable by convention after construction (clone-and-modify when a
        /// parameter vector is applied); safe to share across threads.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ParameterSet {
            $(pub $field: f64),+
        }

        impl ParameterSet {
            pub fn get(&self, id: ParamId) -> f64 {
                match id {
                    $(ParamId::$variant => self.$field),+
                }
            }

            pub fn set(&mut self, id: ParamId, value: f64) {
                match id {
                    $(ParamId::$variant => self.$field = value),+
                }
            }

            /// The published constant set.
            pub fn baseline() -> ParameterSet {
                ParameterSet {
                    $($field: $baseline),+
                }
            }
        }
    };
}

// The LV entries (E_LV_*, V0_LV, *_LV timings) back the built-in elastance
// surrogate; they are synthetic defaults, not table constants, and can be
// overridden through a parameter file.
param_table![
    (AXb, a_xb, "a_XB", "MPa", 250.0),
    (ELaPass, e_la_pass, "E_LA_pass", "mmHg/mL", 0.15),
    (ELaActMax, e_la_act_max, "E_LA_act_max", "mmHg/mL", 0.07),
    (ELvPass, e_lv_pass, "E_LV_pass", "mmHg/mL", 0.08),
    (ELvActMax, e_lv_act_max, "E_LV_act_max", "mmHg/mL", 2.75),
    (ERaPass, e_ra_pass, "E_RA_pass", "mmHg/mL", 0.05),
    (ERaActMax, e_ra_act_max, "E_RA_act_max", "mmHg/mL", 0.20),
    (ERvPass, e_rv_pass, "E_RV_pass", "mmHg/mL", 0.05),
    (ERvAct, e_rv_act, "E_RV_act", "mmHg/mL", 0.55),
    (RArSys, r_ar_sys, "R_AR_SYS", "mmHg*s/mL", 0.64),
    (RVenSys, r_ven_sys, "R_VEN_SYS", "mmHg*s/mL", 0.32),
    (RArPul, r_ar_pul, "R_AR_PUL", "mmHg*s/mL", 0.032),
    (RVenPul, r_ven_pul, "R_VEN_PUL", "mmHg*s/mL", 0.035),
    (RMin, r_min, "R_min", "mmHg*s/mL", 0.0075),
    (RMax, r_max, "R_max", "mmHg*s/mL", 75000.0),
    (CArSys, c_ar_sys, "C_AR_SYS", "mL/mmHg", 1.2),
    (CVenSys, c_ven_sys, "C_VEN_SYS", "mL/mmHg", 60.0),
    (CArPul, c_ar_pul, "C_AR_PUL", "mL/mmHg", 10.0),
    (CVenPul, c_ven_pul, "C_VEN_PUL", "mL/mmHg", 16.0),
    (LArSys, l_ar_sys, "L_AR_SYS", "mmHg*s^2/mL", 5.0e-3),
    (LArPul, l_ar_pul, "L_AR_PUL", "mmHg*s^2/mL", 5.0e-4),
    (LVenSys, l_ven_sys, "L_VEN_SYS", "mmHg*s^2/mL", 5.0e-4),
    (LVenPul, l_ven_pul, "L_VEN_PUL", "mmHg*s^2/mL", 5.0e-4),
    (V0La, v0_la, "V0_LA", "mL", 4.0),
    (V0Lv, v0_lv, "V0_LV", "mL", 5.0),
    (V0Ra, v0_ra, "V0_RA", "mL", 4.0),
    (V0Rv, v0_rv, "V0_RV", "mL", 16.0),
    (VHeartTot, v_heart_tot, "V_heart_tot", "mL", 417.0),
    (THb, t_hb, "T_HB", "s", 0.8),
    (TContrLa, t_contr_la, "t_contr_LA", "s", 0.64),
    (DurContrLa, dur_contr_la, "T_contr_LA", "s", 0.12),
    (DurRelLa, dur_rel_la, "T_rel_LA", "s", 0.64),
    (TContrRa, t_contr_ra, "t_contr_RA", "s", 0.69),
    (DurContrRa, dur_contr_ra, "T_contr_RA", "s", 0.08),
    (DurRelRa, dur_rel_ra, "T_rel_RA", "s", 0.56),
    (TContrRv, t_contr_rv, "t_contr_RV", "s", 0.04),
    (DurContrRv, dur_contr_rv, "T_contr_RV", "s", 0.20),
    (DurRelRv, dur_rel_rv, "T_rel_RV", "s", 0.32),
    (TContrLv, t_contr_lv, "t_contr_LV", "s", 0.0),
    (DurContrLv, dur_contr_lv, "T_contr_LV", "s", 0.26),
    (DurRelLv, dur_rel_lv, "T_rel_LV", "s", 0.38),
];

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for ParamId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        ParamId::parse(&name).map_err(serde::de::Error::custom)
    }
}

/// Admissible interval of an estimable parameter.
///
/// Explicit intervals exist for contractility, the systemic resistances and
/// the total heart volume; every atrial/right-ventricular elastance constant
/// gets 50%–150% of its baseline. All other entries are fixed constants and
/// return `None`.
pub fn bounds_of(id: ParamId) -> Option<(f64, f64)> {
    use ParamId::*;
    let half_to_threehalves = |id: ParamId| {
        let b = id.baseline();
        (0.5 * b, 1.5 * b)
    };
    match id {
        AXb => Some((80.0, 320.0)),
        VHeartTot => Some((200.0, 600.0)),
        RArSys => Some((0.54, 1.2)),
        RVenSys => Some((0.18, 0.4)),
        ELaPass | ELaActMax | ERaPass | ERaActMax | ERvPass | ERvAct => {
            Some(half_to_threehalves(id))
        }
        _ => None,
    }
}

/// Admissible interval by name; errors on unregistered or fixed parameters.
pub fn bounds_for(name: &str) -> Result<(f64, f64)> {
    let id = ParamId::parse(name)?;
    bounds_of(id).ok_or_else(|| Error::NotEstimable {
        name: name.to_string(),
    })
}

impl Default for ParameterSet {
    fn default() -> Self {
        ParameterSet::baseline()
    }
}

impl ParameterSet {
    /// Per-chamber elastance constants `(e_pass, e_act_max, v0)`.
    pub fn chamber_elastance_constants(&self, ch: Chamber) -> (f64, f64, f64) {
        match ch {
            Chamber::La => (self.e_la_pass, self.e_la_act_max, self.v0_la),
            Chamber::Lv => (self.e_lv_pass, self.e_lv_act_max, self.v0_lv),
            Chamber::Ra => (self.e_ra_pass, self.e_ra_act_max, self.v0_ra),
            Chamber::Rv => (self.e_rv_pass, self.e_rv_act, self.v0_rv),
        }
    }

    /// Per-chamber activation timing `(t_contr, dur_contr, dur_rel)`.
    ///
    /// The relaxation onset is always `t_contr + dur_contr`.
    pub fn chamber_timing(&self, ch: Chamber) -> (f64, f64, f64) {
        match ch {
            Chamber::La => (self.t_contr_la, self.dur_contr_la, self.dur_rel_la),
            Chamber::Lv => (self.t_contr_lv, self.dur_contr_lv, self.dur_rel_lv),
            Chamber::Ra => (self.t_contr_ra, self.dur_contr_ra, self.dur_rel_ra),
            Chamber::Rv => (self.t_contr_rv, self.dur_contr_rv, self.dur_rel_rv),
        }
    }

    /// Checks positivity, valve-resistance ordering and timing consistency.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ParamId::ELaPass,
            ParamId::ELaActMax,
            ParamId::ELvPass,
            ParamId::ELvActMax,
            ParamId::ERaPass,
            ParamId::ERaActMax,
            ParamId::ERvPass,
            ParamId::ERvAct,
            ParamId::RArSys,
            ParamId::RVenSys,
            ParamId::RArPul,
            ParamId::RVenPul,
            ParamId::RMin,
            ParamId::RMax,
            ParamId::CArSys,
            ParamId::CVenSys,
            ParamId::CArPul,
            ParamId::CVenPul,
            ParamId::LArSys,
            ParamId::LArPul,
            ParamId::LVenSys,
            ParamId::LVenPul,
            ParamId::VHeartTot,
            ParamId::THb,
            ParamId::AXb,
        ];
        for id in positive {
            let v = self.get(id);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name: id.name().to_string(),
                    reason: format!("must be strictly positive, got {v}"),
                });
            }
        }
        if self.r_min >= self.r_max {
            return Err(Error::InvalidParameter {
                name: "R_min".to_string(),
                reason: format!("R_min ({}) must be below R_max ({})", self.r_min, self.r_max),
            });
        }
        for ch in Chamber::ALL {
            let (t_contr, dur_contr, dur_rel) = self.chamber_timing(ch);
            if dur_contr <= 0.0 || dur_rel <= 0.0 || t_contr < 0.0 {
                return Err(Error::InvalidParameter {
                    name: format!("timing_{}", ch.label()),
                    reason: "contraction/relaxation durations must be positive".to_string(),
                });
            }
            if dur_contr + dur_rel > self.t_hb + 1e-12 {
                return Err(Error::InvalidParameter {
                    name: format!("timing_{}", ch.label()),
                    reason: format!(
                        "T_contr + T_rel = {} exceeds T_HB = {}",
                        dur_contr + dur_rel,
                        self.t_hb
                    ),
                });
            }
        }
        Ok(())
    }

    /// Serializes to the flat JSON parameter-file layout
    /// (`name -> {value, unit, lower, upper}`).
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for &id in ParamId::ALL {
            let mut entry = serde_json::Map::new();
            entry.insert("value".into(), serde_json::json!(self.get(id)));
            entry.insert("unit".into(), serde_json::json!(id.unit()));
            if let Some((lo, hi)) = bounds_of(id) {
                entry.insert("lower".into(), serde_json::json!(lo));
                entry.insert("upper".into(), serde_json::json!(hi));
            }
            map.insert(id.name().to_string(), serde_json::Value::Object(entry));
        }
        serde_json::Value::Object(map)
    }

    /// Parses a parameter file produced by [`ParameterSet::to_json`]. Entries
    /// may be a bare number or an object with a `value` field; unlisted
    /// parameters keep their baseline.
    pub fn from_json(value: &serde_json::Value) -> Result<ParameterSet> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::config("parameter file must be a JSON object"))?;
        let mut set = ParameterSet::baseline();
        for (name, entry) in obj {
            let id = ParamId::parse(name)?;
            let v = match entry {
                serde_json::Value::Number(n) => n.as_f64(),
                serde_json::Value::Object(o) => o.get("value").and_then(|v| v.as_f64()),
                _ => None,
            }
            .ok_or_else(|| Error::InvalidParameter {
                name: name.clone(),
                reason: "entry must be a number or an object with a numeric `value`".to_string(),
            })?;
            set.set(id, v);
        }
        set.validate()?;
        Ok(set)
    }
}

/// Ordered selection of estimable parameters with values and closed bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub ids: Vec<ParamId>,
    pub values: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParameterVector {
    /// Builds a vector over `ids` with registry bounds and the values taken
    /// from `set`.
    pub fn from_set(ids: &[ParamId], set: &ParameterSet) -> Result<ParameterVector> {
        let values = ids.iter().map(|&id| set.get(id)).collect::<Vec<_>>();
        ParameterVector::new(ids.to_vec(), values)
    }

    pub fn new(ids: Vec<ParamId>, values: Vec<f64>) -> Result<ParameterVector> {
        if ids.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                got: values.len(),
            });
        }
        let mut lower = Vec::with_capacity(ids.len());
        let mut upper = Vec::with_capacity(ids.len());
        for &id in &ids {
            let (lo, hi) = bounds_of(id).ok_or_else(|| Error::NotEstimable {
                name: id.name().to_string(),
            })?;
            lower.push(lo);
            upper.push(hi);
        }
        let vector = ParameterVector {
            ids,
            values,
            lower,
            upper,
        };
        vector.validate()?;
        Ok(vector)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 1..self.ids.len() {
            if self.ids[..i].contains(&self.ids[i]) {
                return Err(Error::InvalidParameter {
                    name: self.ids[i].name().to_string(),
                    reason: "duplicate entry in parameter vector".to_string(),
                });
            }
        }
        for i in 0..self.len() {
            let (a, b, v) = (self.lower[i], self.upper[i], self.values[i]);
            if !(a < b) {
                return Err(Error::InvalidParameter {
                    name: self.ids[i].name().to_string(),
                    reason: format!("empty interval [{a}, {b}]"),
                });
            }
            if !(a <= v && v <= b) || !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name: self.ids[i].name().to_string(),
                    reason: format!("value {v} outside [{a}, {b}]"),
                });
            }
        }
        Ok(())
    }

    /// Writes the vector's values into a clone of `base`.
    pub fn apply_to(&self, base: &ParameterSet) -> ParameterSet {
        let mut set = base.clone();
        for (i, &id) in self.ids.iter().enumerate() {
            set.set(id, self.values[i]);
        }
        set
    }

    /// Returns a copy with new values (same ids and bounds).
    pub fn with_values(&self, values: Vec<f64>) -> ParameterVector {
        debug_assert_eq!(values.len(), self.len());
        ParameterVector {
            ids: self.ids.clone(),
            values,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        }
    }
}

/// Draws each component uniformly from `[lo_frac, hi_frac] * exact`, clipped
/// to the admissible interval. Deterministic for a fixed seed.
pub fn sample_uniform_init(
    exact: &ParameterVector,
    lo_frac: f64,
    hi_frac: f64,
    seed: u64,
) -> Result<ParameterVector> {
    if !(lo_frac > 0.0 && lo_frac <= hi_frac) {
        return Err(Error::config(format!(
            "initialization fractions must satisfy 0 < lo <= hi, got [{lo_frac}, {hi_frac}]"
        )));
    }
    exact.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(exact.len());
    for i in 0..exact.len() {
        let v = exact.values[i];
        let (lo, hi) = (lo_frac * v, hi_frac * v);
        let draw = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        values.push(draw.clamp(exact.lower[i], exact.upper[i]));
    }
    Ok(exact.with_values(values))
}
