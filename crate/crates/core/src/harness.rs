//! Twin-experiment orchestration: synthetic target generation, noise
//! injection at a prescribed SNR, the T_LV / T_all / T_LV_perturbed test
//! cases, and report emission.
//!
//! Targets are produced by the same coupled model that estimates them
//! (twin experiments): a limit-cycle run at the true parameters, channel
//! extraction, and i.i.d. Gaussian noise with `sigma_meas = SNR * 100`
//! (mmHg for pressures, mL for volumes). The noise field per channel is
//! drawn independently of the noise level, so sweeping SNR with a fixed
//! seed scales one common realization — which keeps cross-SNR comparisons
//! (posterior widths, fit errors) monotone in the noise level.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    adjoint_gradient, CostObjective, CoupledSensitivity, Protocol, SensitivityModel,
};
use crate::coupled::{CoupledModel, DEFAULT_EPSILON, GRADIENT_SMOOTHING};
use crate::error::{Error, Result};
use crate::hmc::{
    nuts_sample, posterior_summary, BoundedPosterior, CovarianceModel, GaussianPotential,
    NutsConfig, PosteriorSamples, PosteriorSummary, ROM_LAMBDA,
};
use crate::map_estimate::{multistart_map, run_seed, MapResult, MultistartConfig};
use crate::ode::{run_to_limit_cycle, SolverConfig, TimeTrace};
use crate::params::{ParamId, ParameterSet, ParameterVector};
use crate::qoi::{qois_from_samples, relative_l2_error, ChannelId, CostWeights, QoISet};
use crate::surrogate::LvSurrogate;

/// Reference signal magnitude defining the SNR (100 mmHg / 100 mL).
pub const SNR_REFERENCE: f64 = 100.0;

/// Noisy observation traces on the last-beat grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet {
    pub channels: Vec<ChannelId>,
    pub t0: f64,
    pub dt_sample: f64,
    /// Noisy traces, channel-major.
    pub traces: Vec<Vec<f64>>,
    /// The clean twin traces they were generated from.
    pub clean: Vec<Vec<f64>>,
    pub sigma_meas: f64,
    pub seed: u64,
    /// Generating parameter values (twin experiments).
    pub theta_true: Option<ParameterVector>,
}

impl ObservationSet {
    pub fn validate(&self) -> Result<()> {
        for ch in &self.channels {
            if !ChannelId::NON_INVASIVE.contains(ch) {
                return Err(Error::config(format!(
                    "channel {} is not in the non-invasive observable set",
                    ch.name()
                )));
            }
        }
        Ok(())
    }

    pub fn qois(&self) -> QoISet {
        let pairs: Vec<(ChannelId, Vec<f64>)> = self
            .channels
            .iter()
            .cloned()
            .zip(self.traces.iter().cloned())
            .collect();
        qois_from_samples(self.dt_sample, &pairs)
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.traces.first().map_or(0, Vec::len))
            .map(|k| self.t0 + k as f64 * self.dt_sample)
            .collect()
    }
}

/// Standard-normal field for one channel, independent of the noise level.
fn noise_field(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma_meas` to every
/// channel of a trace. Deterministic for a seed, and the underlying field
/// does not depend on `sigma_meas`.
pub fn add_noise(trace: &TimeTrace, sigma_meas: f64, seed: u64) -> Result<TimeTrace> {
    if sigma_meas < 0.0 {
        return Err(Error::config("noise level must be >= 0"));
    }
    let mut noisy = trace.clone();
    for (c, channel) in noisy.data.iter_mut().enumerate() {
        let eta = noise_field(seed.wrapping_add(c as u64), channel.len());
        for (v, e) in channel.iter_mut().zip(eta) {
            *v += sigma_meas * e;
        }
    }
    Ok(noisy)
}

/// Multiplicative perturbation of fixed (non-estimated) parameters:
/// `value * (1 ± fraction)` with a random sign per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub params: Vec<ParamId>,
    pub fraction: f64,
}

impl PerturbationSpec {
    /// The four influential parameters perturbed in the T_LV_perturbed case.
    pub fn t_lv_default(fraction: f64) -> PerturbationSpec {
        PerturbationSpec {
            params: vec![
                ParamId::ERvAct,
                ParamId::ELaPass,
                ParamId::ERaPass,
                ParamId::RVenSys,
            ],
            fraction,
        }
    }

    pub fn apply(&self, base: &ParameterSet, seed: u64) -> ParameterSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut set = base.clone();
        for &id in &self.params {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            set.set(id, set.get(id) * (1.0 + sign * self.fraction));
        }
        set
    }
}

/// Full description of one estimation experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TestCaseConfig {
    pub case: String,
    pub estimated: Vec<ParamId>,
    pub channels: Vec<ChannelId>,
    pub snr: f64,
    pub weights: CostWeights,
    pub perturbation: Option<PerturbationSpec>,
    pub seed: u64,
    pub n_beats: usize,
    pub dt_sample: f64,
    pub epsilon: f64,
    pub valve_smoothing: f64,
    pub solver: SolverConfig,
    pub multistart: MultistartConfig,
    pub nuts: NutsConfig,
    /// Half-width (relative) of the posterior prior box around the MAP.
    pub iota: f64,
    pub run_hmc: bool,
    /// Number of retained draws used for the posterior trace bands.
    pub band_draws: usize,
}

impl Default for TestCaseConfig {
    fn default() -> Self {
        TestCaseConfig {
            case: "custom".to_string(),
            estimated: Vec::new(),
            channels: Vec::new(),
            snr: 0.0,
            weights: CostWeights::default(),
            perturbation: None,
            seed: 0,
            n_beats: 5,
            dt_sample: 0.01,
            epsilon: DEFAULT_EPSILON,
            valve_smoothing: GRADIENT_SMOOTHING,
            solver: SolverConfig::default(),
            multistart: MultistartConfig::default(),
            // step-size and mass adaptation are on for the experiment
            // defaults; the fixed paper step with unit mass makes every
            // trajectory hit the tree-depth cap on these posterior scales
            nuts: NutsConfig {
                adapt_step: true,
                adapt_mass: true,
                ..NutsConfig::default()
            },
            iota: 0.1,
            run_hmc: true,
            band_draws: 500,
        }
    }
}

impl TestCaseConfig {
    /// Contractility, systemic arterial resistance and total heart volume
    /// from the arterial pressure and LV volume traces.
    pub fn t_lv(snr: f64, seed: u64) -> TestCaseConfig {
        let channels = vec![ChannelId::PArSys, ChannelId::VLv];
        TestCaseConfig {
            case: "T_LV".to_string(),
            estimated: vec![ParamId::AXb, ParamId::RArSys, ParamId::VHeartTot],
            weights: CostWeights::traces_only(&channels),
            channels,
            snr,
            seed,
            ..TestCaseConfig::default()
        }
    }

    /// Seven parameters from the five non-invasive traces.
    pub fn t_all(snr: f64, seed: u64) -> TestCaseConfig {
        let channels = ChannelId::NON_INVASIVE.to_vec();
        TestCaseConfig {
            case: "T_all".to_string(),
            estimated: vec![
                ParamId::AXb,
                ParamId::ERvAct,
                ParamId::ELaPass,
                ParamId::ERaPass,
                ParamId::RArSys,
                ParamId::RVenSys,
                ParamId::VHeartTot,
            ],
            weights: CostWeights::traces_only(&channels),
            channels,
            snr,
            seed,
            ..TestCaseConfig::default()
        }
    }

    /// T_LV with the remaining influential parameters perturbed away from
    /// the ground truth in every run.
    pub fn t_lv_perturbed(snr: f64, fraction: f64, seed: u64) -> TestCaseConfig {
        TestCaseConfig {
            case: "T_LV_perturbed".to_string(),
            perturbation: Some(PerturbationSpec::t_lv_default(fraction)),
            ..TestCaseConfig::t_lv(snr, seed)
        }
    }

    pub fn by_name(name: &str, snr: f64, seed: u64) -> Result<TestCaseConfig> {
        match name {
            "T_LV" | "t_lv" => Ok(TestCaseConfig::t_lv(snr, seed)),
            "T_all" | "t_all" => Ok(TestCaseConfig::t_all(snr, seed)),
            "T_LV_perturbed" | "t_lv_perturbed" => {
                Ok(TestCaseConfig::t_lv_perturbed(snr, 0.1, seed))
            }
            other => Err(Error::config(format!("unknown test case `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimated.is_empty() || self.channels.is_empty() {
            return Err(Error::config(
                "a test case needs estimated parameters and observed channels",
            ));
        }
        for ch in &self.channels {
            if !ChannelId::NON_INVASIVE.contains(ch) {
                return Err(Error::config(format!(
                    "channel {} is not non-invasively measurable",
                    ch.name()
                )));
            }
        }
        match self.case.as_str() {
            "T_LV" | "T_LV_perturbed" => {
                let expect = [ParamId::AXb, ParamId::RArSys, ParamId::VHeartTot];
                if self.estimated != expect {
                    return Err(Error::config(format!(
                        "{} estimates exactly (a_XB, R_AR_SYS, V_heart_tot)",
                        self.case
                    )));
                }
                if self.case == "T_LV_perturbed" {
                    let spec = self.perturbation.as_ref().ok_or_else(|| {
                        Error::config("T_LV_perturbed requires a perturbation spec")
                    })?;
                    let allowed = [
                        ParamId::ERvAct,
                        ParamId::ELaPass,
                        ParamId::ERaPass,
                        ParamId::RVenSys,
                    ];
                    if spec.params.iter().any(|p| !allowed.contains(p)) {
                        return Err(Error::config(
                            "T_LV_perturbed perturbs only (E_RV_act, E_LA_pass, E_RA_pass, R_VEN_SYS)",
                        ));
                    }
                }
            }
            "T_all" => {
                if self.estimated.len() != 7 {
                    return Err(Error::config("T_all estimates exactly seven parameters"));
                }
            }
            _ => {}
        }
        self.solver.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    pub fn sigma_meas(&self) -> f64 {
        self.snr * SNR_REFERENCE
    }

    pub fn protocol(&self, t_hb: f64) -> Protocol {
        Protocol::beats(self.n_beats, t_hb, self.dt_sample)
    }

    fn model(&self, params: ParameterSet) -> Result<CoupledModel> {
        CoupledModel::new(
            params,
            LvSurrogate::elastance(),
            self.epsilon,
            self.valve_smoothing,
        )
    }
}

/// Simulates the twin target at `theta_true` and applies channel noise.
pub fn generate_target(
    theta_true: &ParameterVector,
    config: &TestCaseConfig,
) -> Result<ObservationSet> {
    config.validate()?;
    let base = ParameterSet::baseline();
    let mut model = config.model(theta_true.apply_to(&base))?;
    let s0 = model.initial_state();
    let t_hb = model.params.t_hb;
    let run = run_to_limit_cycle(
        &mut model,
        &s0,
        config.n_beats,
        t_hb,
        config.dt_sample,
        &config.solver,
    )?;
    let sigma = config.sigma_meas();
    let mut traces = Vec::with_capacity(config.channels.len());
    let mut clean = Vec::with_capacity(config.channels.len());
    for (c, ch) in config.channels.iter().enumerate() {
        let data = run.trace.channel(ch.name())?.to_vec();
        let eta = noise_field(config.seed.wrapping_add(c as u64), data.len());
        traces.push(
            data.iter()
                .zip(&eta)
                .map(|(v, e)| v + sigma * e)
                .collect(),
        );
        clean.push(data);
    }
    let obs = ObservationSet {
        channels: config.channels.clone(),
        t0: run.trace.t0,
        dt_sample: config.dt_sample,
        traces,
        clean,
        sigma_meas: sigma,
        seed: config.seed,
        theta_true: Some(theta_true.clone()),
    };
    obs.validate()?;
    Ok(obs)
}

/// MAP stage output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapStage {
    pub result: MapResult,
    /// Relative L2 error of the run-averaged estimate against the truth.
    pub e_l2: f64,
}

/// HMC stage output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcStage {
    pub summary: PosteriorSummary,
    pub prior_lower: Vec<f64>,
    pub prior_upper: Vec<f64>,
    /// Truth inside the marginal 90% interval, per parameter.
    pub coverage: Vec<bool>,
    pub theta_start: Vec<f64>,
}

/// Full report of one test case. Wall times live in [`Timings`], kept out
/// of this structure so reports are byte-reproducible under fixed seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub schema: u32,
    pub case: TestCaseConfig,
    pub parameter_names: Vec<String>,
    pub theta_true: Vec<f64>,
    pub map: Option<MapStage>,
    pub hmc: Option<HmcStage>,
    /// Stage failures collected along the way (partial reports).
    pub errors: Vec<String>,
}

/// Wall-clock timings, emitted separately from the report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub target_s: f64,
    pub map_s: f64,
    pub hmc_s: f64,
    pub bands_s: f64,
    pub total_s: f64,
}

/// Simulation artifacts that accompany a report.
pub struct CaseArtifacts {
    pub observations: ObservationSet,
    pub samples: Option<PosteriorSamples>,
    /// Posterior predictive band per channel: (mean, p5, p95) traces.
    pub bands: Option<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>>,
    pub timings: Timings,
}

fn objective_for(
    obs: &ObservationSet,
    config: &TestCaseConfig,
) -> CostObjective {
    CostObjective {
        obs: obs.qois(),
        weights: config.weights.clone(),
        channels: config.channels.clone(),
        dt_sample: config.dt_sample,
    }
}

/// The MAP stage: multistart bounded L-BFGS on the fitting cost.
pub fn map_stage(
    obs: &ObservationSet,
    config: &TestCaseConfig,
    truth: &ParameterVector,
) -> Result<MapStage> {
    let base = ParameterSet::baseline();
    let reference = truth.clone();
    let protocol = config.protocol(base.t_hb);
    let factory = |run: usize| {
        // fixed-parameter perturbation, redrawn per run
        let params = match &config.perturbation {
            Some(p) => p.apply(&base, run_seed(config.seed ^ 0x7065_7274, run)),
            None => base.clone(),
        };
        let model = config.model(params).expect("validated config");
        let theta = reference.clone();
        let channels = config.channels.clone();
        let objective = objective_for(obs, config);
        let solver = config.solver;
        let mut sys = CoupledSensitivity::new(model, theta, channels).expect("validated");
        Box::new(move |x: &[f64]| {
            sys.set_theta(x)?;
            let res = adjoint_gradient(&mut sys, &objective, &protocol, &solver)?;
            Ok((res.value, res.gradient))
        }) as Box<dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + Send>
    };
    let mut ms_cfg = config.multistart;
    ms_cfg.seed = config.seed;
    let result = multistart_map(factory, &reference, &ms_cfg)?;
    let e_l2 = relative_l2_error(&reference.with_values(result.theta_mean.clone()), &reference)?;
    Ok(MapStage { result, e_l2 })
}

/// The HMC stage: NUTS around the MAP mean with the GP-augmented Gaussian
/// likelihood. Returns the stage summary and the retained draws.
pub fn hmc_stage(
    obs: &ObservationSet,
    config: &TestCaseConfig,
    truth: &ParameterVector,
    theta_map: &[f64],
) -> Result<(HmcStage, PosteriorSamples)> {
    let base = ParameterSet::baseline();
    let params = match &config.perturbation {
        Some(p) => p.apply(
            &base,
            run_seed(config.seed ^ 0x7065_7274, config.multistart.n_runs),
        ),
        None => base.clone(),
    };
    let model = config.model(params)?;
    let protocol = config.protocol(base.t_hb);
    let grid = obs.grid();
    let cov = CovarianceModel::build(&config.channels, &grid, obs.sigma_meas, ROM_LAMBDA)?;
    let potential = GaussianPotential::new(obs.traces.clone(), cov)?;
    let sys = CoupledSensitivity::new(model, truth.clone(), config.channels.clone())?;
    let mut posterior = BoundedPosterior::around_map(
        sys,
        potential,
        theta_map,
        config.iota,
        protocol,
        config.solver,
    )?;

    // draw the start uniformly from the prior box
    let (lo, hi) = {
        let (l, h) = posterior.prior_box();
        (l.to_vec(), h.to_vec())
    };
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x696e_6974);
    let theta_start: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| rng.gen_range(*a..*b))
        .collect();
    let u0 = posterior.to_unconstrained(&theta_start);

    let mut nuts_cfg = config.nuts;
    nuts_cfg.seed = config.seed ^ 0x6e75_7473;
    let names = truth.ids.iter().map(|id| id.name().to_string()).collect();
    let mut samples = nuts_sample(&mut posterior, &u0, names, &nuts_cfg)?;
    // map the draws back to bounded coordinates
    for draw in &mut samples.draws {
        *draw = posterior.to_theta(draw);
    }
    samples.rhat = crate::hmc::gelman_rubin_draws(&samples.draws);

    let summary = posterior_summary(&samples)?;
    let coverage = truth
        .values
        .iter()
        .zip(&summary.ci90)
        .map(|(t, (lo, hi))| t >= lo && t <= hi)
        .collect();
    Ok((
        HmcStage {
            summary,
            prior_lower: lo,
            prior_upper: hi,
            coverage,
            theta_start,
        },
        samples,
    ))
}

/// Posterior predictive trace bands: simulates (up to `band_draws`) retained
/// draws and takes per-sample mean and 5th/95th percentiles per channel.
pub fn posterior_bands(
    samples: &PosteriorSamples,
    config: &TestCaseConfig,
    n_channels: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> {
    let base = ParameterSet::baseline();
    let truth_ids: Vec<ParamId> = samples
        .names
        .iter()
        .map(|n| ParamId::parse(n))
        .collect::<Result<_>>()?;
    let stride = (samples.draws.len() / config.band_draws.max(1)).max(1);
    let picked: Vec<&Vec<f64>> = samples.draws.iter().step_by(stride).collect();

    let traces: Vec<Result<Vec<Vec<f64>>>> = picked
        .par_iter()
        .map(|draw| {
            let mut set = base.clone();
            for (id, v) in truth_ids.iter().zip(draw.iter()) {
                set.set(*id, *v);
            }
            let mut model = config.model(set)?;
            let s0 = model.initial_state();
            let run = run_to_limit_cycle(
                &mut model,
                &s0,
                config.n_beats,
                base.t_hb,
                config.dt_sample,
                &config.solver,
            )?;
            let mut out = Vec::with_capacity(n_channels);
            for ch in &config.channels {
                out.push(run.trace.channel(ch.name())?.to_vec());
            }
            Ok(out)
        })
        .collect();

    let mut ok_traces = Vec::new();
    for t in traces {
        ok_traces.push(t?);
    }
    let n_samples = ok_traces[0][0].len();
    let mut bands = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let mut mean = vec![0.0; n_samples];
        let mut p5 = vec![0.0; n_samples];
        let mut p95 = vec![0.0; n_samples];
        for k in 0..n_samples {
            let mut vals: Vec<f64> = ok_traces.iter().map(|t| t[c][k]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mean[k] = vals.iter().sum::<f64>() / vals.len() as f64;
            p5[k] = percentile_sorted(&vals, 0.05);
            p95[k] = percentile_sorted(&vals, 0.95);
        }
        bands.push((mean, p5, p95));
    }
    Ok(bands)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
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

/// The full pipeline: target generation, multistart MAP, NUTS posterior,
/// summaries. Stage failures leave a partial report with the error recorded.
pub fn run_test_case(config: &TestCaseConfig) -> Result<(CaseReport, CaseArtifacts)> {
    config.validate()?;
    let total_timer = std::time::Instant::now();
    let base = ParameterSet::baseline();
    let truth = ParameterVector::from_set(&config.estimated, &base)?;

    let t = std::time::Instant::now();
    let observations = generate_target(&truth, config)?;
    let mut timings = Timings {
        target_s: t.elapsed().as_secs_f64(),
        ..Timings::default()
    };

    let mut report = CaseReport {
        schema: 1,
        case: config.clone(),
        parameter_names: truth.ids.iter().map(|id| id.name().to_string()).collect(),
        theta_true: truth.values.clone(),
        map: None,
        hmc: None,
        errors: Vec::new(),
    };

    let t = std::time::Instant::now();
    let map = match map_stage(&observations, config, &truth) {
        Ok(stage) => {
            report.map = Some(stage.clone());
            Some(stage)
        }
        Err(e) => {
            report.errors.push(format!("map stage: {e}"));
            None
        }
    };
    timings.map_s = t.elapsed().as_secs_f64();

    let mut samples_out = None;
    let mut bands = None;
    if config.run_hmc {
        if let Some(map) = &map {
            let t = std::time::Instant::now();
            match hmc_stage(&observations, config, &truth, &map.result.theta_mean) {
                Ok((stage, samples)) => {
                    report.hmc = Some(stage);
                    timings.hmc_s = t.elapsed().as_secs_f64();
                    let t = std::time::Instant::now();
                    match posterior_bands(&samples, config, config.channels.len()) {
                        Ok(b) => bands = Some(b),
                        Err(e) => report.errors.push(format!("band stage: {e}")),
                    }
                    timings.bands_s = t.elapsed().as_secs_f64();
                    samples_out = Some(samples);
                }
                Err(e) => {
                    report.errors.push(format!("hmc stage: {e}"));
                    timings.hmc_s = t.elapsed().as_secs_f64();
                }
            }
        }
    }
    timings.total_s = total_timer.elapsed().as_secs_f64();

    Ok((
        report,
        CaseArtifacts {
            observations,
            samples: samples_out,
            bands,
            timings,
        },
    ))
}

/// Writes `content` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Emits `report.json`, `timings.json`, observation/clean traces, posterior
/// draws and plot-ready percentile bands under `out_dir`.
pub fn emit_report(out_dir: &Path, report: &CaseReport, artifacts: &CaseArtifacts) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_vec_pretty(report)?;
    write_atomic(&out_dir.join("report.json"), &json)?;
    write_atomic(
        &out_dir.join("timings.json"),
        &serde_json::to_vec_pretty(&artifacts.timings)?,
    )?;

    // observed + clean traces
    let obs = &artifacts.observations;
    let mut csv = String::from("t");
    for ch in &obs.channels {
        csv.push_str(&format!(",{name},{name}_clean", name = ch.name()));
    }
    csv.push('\n');
    let grid = obs.grid();
    for k in 0..grid.len() {
        csv.push_str(&format!("{:.16e}", grid[k]));
        for c in 0..obs.channels.len() {
            csv.push_str(&format!(
                ",{:.16e},{:.16e}",
                obs.traces[c][k], obs.clean[c][k]
            ));
        }
        csv.push('\n');
    }
    write_atomic(&out_dir.join("traces").join("observations.csv"), csv.as_bytes())?;

    if let Some(samples) = &artifacts.samples {
        let mut csv = String::from("iter,logp");
        for name in &samples.names {
            csv.push_str(&format!(",{name}"));
        }
        csv.push('\n');
        for (i, draw) in samples.draws.iter().enumerate() {
            csv.push_str(&format!("{},{:.16e}", i, samples.logp[i]));
            for v in draw {
                csv.push_str(&format!(",{v:.16e}"));
            }
            csv.push('\n');
        }
        write_atomic(&out_dir.join("posterior.csv"), csv.as_bytes())?;
    }

    if let Some(bands) = &artifacts.bands {
        let mut csv = String::from("t");
        for ch in &obs.channels {
            let n = ch.name();
            csv.push_str(&format!(",{n}_obs,{n}_mean,{n}_p5,{n}_p95"));
        }
        csv.push('\n');
        for k in 0..grid.len() {
            csv.push_str(&format!("{:.16e}", grid[k]));
            for (c, (mean, p5, p95)) in bands.iter().enumerate() {
                csv.push_str(&format!(
                    ",{:.16e},{:.16e},{:.16e},{:.16e}",
                    obs.traces[c][k], mean[k], p5[k], p95[k]
                ));
            }
            csv.push('\n');
        }
        write_atomic(&out_dir.join("bands.csv"), csv.as_bytes())?;
    }
    Ok(())
}

/// Scalar quantities of interest for global sensitivity analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarQoi {
    Max(ChannelId),
    Min(ChannelId),
    StrokeVolume(ChannelId),
}

impl ScalarQoi {
    pub fn name(&self) -> String {
        match self {
            ScalarQoi::Max(c) => format!("{}_max", c.name()),
            ScalarQoi::Min(c) => format!("{}_min", c.name()),
            ScalarQoi::StrokeVolume(c) => format!("SV_{}", c.label()),
        }
    }
}

/// Default QoI list for the cardiovascular sensitivity analysis.
pub fn default_sobol_qois() -> Vec<ScalarQoi> {
    use ChannelId::*;
    vec![
        ScalarQoi::Max(PArSys),
        ScalarQoi::Min(PArSys),
        ScalarQoi::Max(PLv),
        ScalarQoi::Max(VLv),
        ScalarQoi::Min(VLv),
        ScalarQoi::StrokeVolume(VLv),
    ]
}

/// Saltelli/Sobol analysis of the coupled model over the admissible box of
/// `estimated`, with scalar QoIs extracted from the last-beat trace.
pub fn sobol_on_model(
    estimated: &[ParamId],
    qois: &[ScalarQoi],
    n: usize,
    seed: u64,
    config: &TestCaseConfig,
) -> Result<(crate::sensitivity::SobolResult, Vec<String>, Vec<String>)> {
    let base = ParameterSet::baseline();
    let reference = ParameterVector::from_set(estimated, &base)?;
    let solver = config.solver;
    let (n_beats, dt_sample) = (config.n_beats, config.dt_sample);
    let eval = |row: &[f64]| -> Result<Vec<f64>> {
        let vector = reference.with_values(row.to_vec());
        let mut model = CoupledModel::new(
            vector.apply_to(&base),
            LvSurrogate::elastance(),
            config.epsilon,
            config.valve_smoothing,
        )?;
        let s0 = model.initial_state();
        let run = run_to_limit_cycle(&mut model, &s0, n_beats, base.t_hb, dt_sample, &solver)?;
        let mut out = Vec::with_capacity(qois.len());
        for q in qois {
            let (ch, kind) = match q {
                ScalarQoi::Max(c) => (*c, 0),
                ScalarQoi::Min(c) => (*c, 1),
                ScalarQoi::StrokeVolume(c) => (*c, 2),
            };
            let data = run.trace.channel(ch.name())?;
            let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
            out.push(match kind {
                0 => max,
                1 => min,
                _ => max - min,
            });
        }
        Ok(out)
    };
    let (_, result) =
        crate::sensitivity::run_sensitivity(&reference.lower, &reference.upper, n, seed, eval)?;
    Ok((
        result,
        estimated.iter().map(|p| p.name().to_string()).collect(),
        qois.iter().map(|q| q.name()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noise_examples() {
        let trace = TimeTrace {
            t0: 0.0,
            dt_sample: 0.01,
            names: vec!["p_AR_SYS".into()],
            data: vec![vec![100.0; 10_000]],
        };
        // zero noise: identical trace
        let same = add_noise(&trace, 0.0, 5).unwrap();
        assert_eq!(same.data, trace.data);

        // sample variance within 5% of sigma^2 over 1e4 samples
        let sigma = 10.0;
        let noisy = add_noise(&trace, sigma, 5).unwrap();
        let diffs: Vec<f64> = noisy.data[0].iter().map(|v| v - 100.0).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        assert!(
            (var - sigma * sigma).abs() < 0.05 * sigma * sigma,
            "variance {var}"
        );

        // the noise field is shared across noise levels (common draws)
        let small = add_noise(&trace, 1.0, 5).unwrap();
        for k in 0..100 {
            assert_relative_eq!(
                (noisy.data[0][k] - 100.0) / 10.0,
                small.data[0][k] - 100.0,
                epsilon = 1e-12
            );
        }

        // deterministic per seed
        let again = add_noise(&trace, sigma, 5).unwrap();
        assert_eq!(noisy.data, again.data);
    }

    #[test]
    fn case_builders_match_the_protocols() {
        let t_lv = TestCaseConfig::t_lv(0.01, 1);
        t_lv.validate().unwrap();
        assert_eq!(t_lv.channels.len(), 2);
        assert_eq!(t_lv.estimated.len(), 3);
        assert_relative_eq!(t_lv.sigma_meas(), 1.0);

        let t_all = TestCaseConfig::t_all(0.1, 1);
        t_all.validate().unwrap();
        assert_eq!(t_all.channels.len(), 5);
        assert_eq!(t_all.estimated.len(), 7);
        assert_relative_eq!(t_all.sigma_meas(), 10.0);

        let tp = TestCaseConfig::t_lv_perturbed(0.05, 0.2, 1);
        tp.validate().unwrap();
        assert_eq!(tp.perturbation.as_ref().unwrap().params.len(), 4);

        // invariant violations are rejected
        let mut bad = TestCaseConfig::t_lv(0.0, 1);
        bad.estimated = vec![ParamId::AXb];
        assert!(bad.validate().is_err());
        let mut bad = TestCaseConfig::t_lv(0.0, 1);
        bad.channels = vec![ChannelId::PLa];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn perturbation_uses_random_signs() {
        let spec = PerturbationSpec::t_lv_default(0.1);
        let base = ParameterSet::baseline();
        let a = spec.apply(&base, 1);
        for &id in &spec.params {
            let ratio = a.get(id) / base.get(id);
            assert!(
                (ratio - 1.1).abs() < 1e-12 || (ratio - 0.9).abs() < 1e-12,
                "{}: ratio {ratio}",
                id.name()
            );
        }
        // across seeds both signs occur
        let mut saw_up = false;
        let mut saw_down = false;
        for seed in 0..16 {
            let p = spec.apply(&base, seed);
            let r = p.get(ParamId::ERvAct) / base.get(ParamId::ERvAct);
            if r > 1.0 {
                saw_up = true;
            } else {
                saw_down = true;
            }
        }
        assert!(saw_up && saw_down);
    }

    #[test]
    fn twin_target_shapes_and_self_consistency() {
        let config = TestCaseConfig {
            multistart: MultistartConfig {
                n_runs: 1,
                ..MultistartConfig::default()
            },
            ..TestCaseConfig::t_lv(0.0, 7)
        };
        let truth = ParameterVector::from_set(&config.estimated, &ParameterSet::baseline())
            .unwrap();
        let obs = generate_target(&truth, &config).unwrap();
        assert_eq!(obs.channels.len(), 2);
        assert_eq!(obs.traces[0].len(), 81);
        assert_relative_eq!(obs.t0, 3.2, epsilon = 1e-12);
        // SNR = 0: noisy == clean, and J at the truth vanishes
        assert_eq!(obs.traces, obs.clean);

        let base = ParameterSet::baseline();
        let model = config.model(truth.apply_to(&base)).unwrap();
        let mut sys =
            CoupledSensitivity::new(model, truth.clone(), config.channels.clone()).unwrap();
        let objective = objective_for(&obs, &config);
        let protocol = config.protocol(base.t_hb);
        let res = crate::adjoint::evaluate_objective(
            &mut sys,
            &objective,
            &protocol,
            &config.solver,
        )
        .unwrap();
        assert!(res.0 < 1e-18, "J at the truth = {}", res.0);
    }

    #[test]
    fn t_all_target_has_five_channels() {
        let config = TestCaseConfig::t_all(0.0, 3);
        let truth =
            ParameterVector::from_set(&config.estimated, &ParameterSet::baseline()).unwrap();
        let obs = generate_target(&truth, &config).unwrap();
        assert_eq!(obs.channels.len(), 5);
    }

    #[test]
    fn atomic_write_and_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = CaseReport {
            schema: 1,
            case: TestCaseConfig::t_lv(0.01, 9),
            parameter_names: vec!["a_XB".into()],
            theta_true: vec![250.0],
            map: None,
            hmc: None,
            errors: vec![],
        };
        let path = dir.path().join("report.json");
        write_atomic(&path, &serde_json::to_vec_pretty(&report).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: CaseReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.schema, 1);
        assert_eq!(back.theta_true, vec![250.0]);
        assert_eq!(back.case.case, "T_LV");
        // no stray temp file
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
