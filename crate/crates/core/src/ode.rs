//! Adaptive Dormand–Prince 5(4) integration with dense output, plus the
//! limit-cycle protocol (run n heartbeats, evaluate the last one on a uniform
//! sample grid).
//!
//! The controller is the standard embedded-pair loop: scaled-RMS error norm
//! mixing `atol` and `rtol`, PI step-size control with safety 0.9 and growth
//! clamp [0.2, 5], FSAL reuse of the last stage. Dense output uses the
//! order-4 interpolant of the pair, so sampled values at accepted step
//! endpoints coincide with the step solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side of an autonomous-in-structure ODE system `dy/dt = g(t, y)`.
///
/// `rhs` takes `&mut self` so implementations can keep scratch buffers;
/// evaluation must remain a pure function of `(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

/// Named output channels derived from the state, used to build [`TimeTrace`]s.
pub trait ChannelModel: OdeSystem {
    fn channel_names(&self) -> Vec<String>;
    fn channels(&self, t: f64, y: &[f64], out: &mut [f64]);
}

/// Integrator tolerances and step bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rtol: 1e-6,
            atol: 1e-8,
            dt_init: 1e-4,
            dt_min: 1e-13,
            dt_max: 5e-3,
            max_steps: 4_000_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config("rtol and atol must be positive"));
        }
        if !(self.dt_min <= self.dt_init && self.dt_init <= self.dt_max) {
            return Err(Error::config(format!(
                "need dt_min <= dt_init <= dt_max, got {} / {} / {}",
                self.dt_min, self.dt_init, self.dt_max
            )));
        }
        Ok(())
    }

    /// Tightened tolerances for gradient verification runs.
    pub fn tight() -> Self {
        SolverConfig {
            rtol: 1e-9,
            atol: 1e-11,
            ..SolverConfig::default()
        }
    }
}

/// Counters reported with every solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
}

/// Result of one integration: states at the requested sample times plus the
/// exact final state.
#[derive(Debug, Clone)]
pub struct Solution {
    pub sample_times: Vec<f64>,
    /// One state vector per sample time.
    pub samples: Vec<Vec<f64>>,
    pub final_state: Vec<f64>,
    pub stats: SolveStats,
}

/// Piecewise quartic interpolant over the accepted steps.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    dim: usize,
    /// (t_start, h, 5 * dim interpolation coefficients) per accepted step.
    segments: Vec<(f64, f64, Vec<f64>)>,
}

impl DenseOutput {
    pub fn t_start(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.0)
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.0 + s.1)
    }

    /// Evaluates the stored trajectory at `t` (clamped to the covered span).
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let mut hint = 0;
        self.eval_hinted(t, &mut hint, out);
    }

    /// Like [`DenseOutput::eval`], reusing `hint` as the segment cursor;
    /// nearly-monotone access patterns skip the binary search.
    pub fn eval_hinted(&self, t: f64, hint: &mut usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let covers = |i: usize| {
            let (t0, h, _) = &self.segments[i];
            t >= *t0 && t <= t0 + h
        };
        if *hint >= self.segments.len() || !covers(*hint) {
            let down = hint.saturating_sub(1);
            if *hint < self.segments.len() && *hint > 0 && covers(down) {
                *hint = down;
            } else {
                *hint = match self
                    .segments
                    .binary_search_by(|seg| seg.0.partial_cmp(&t).unwrap())
                {
                    Ok(i) => i,
                    Err(0) => 0,
                    Err(i) => i - 1,
                };
            }
        }
        let (t0, h, cont) = &self.segments[*hint];
        let theta = ((t - t0) / h).clamp(0.0, 1.0);
        eval_interpolant(cont, self.dim, theta, out);
    }
}

#[inline]
fn eval_interpolant(cont: &[f64], dim: usize, theta: f64, out: &mut [f64]) {
    let s1 = 1.0 - theta;
    for j in 0..dim {
        let r1 = cont[j];
        let r2 = cont[dim + j];
        let r3 = cont[2 * dim + j];
        let r4 = cont[3 * dim + j];
        let r5 = cont[4 * dim + j];
        out[j] = r1 + theta * (r2 + s1 * (r3 + theta * (r4 + s1 * r5)));
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
// Dense-output weights for the order-4 interpolant.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const PI_EXPO: f64 = 0.2 - 0.75 * PI_BETA;

/// Integrates `system` over `t_span`, returning dense samples at
/// `sample_times` (ascending, within the span) and the exact final state.
pub fn integrate<S: OdeSystem>(
    system: &mut S,
    s0: &[f64],
    t_span: (f64, f64),
    cfg: &SolverConfig,
    sample_times: &[f64],
) -> Result<Solution> {
    integrate_impl(system, s0, t_span, cfg, sample_times, false).map(|(sol, _)| sol)
}

/// Same as [`integrate`], additionally recording the interpolant of every
/// accepted step so the trajectory can be re-evaluated anywhere (used by the
/// backward adjoint pass).
pub fn integrate_dense<S: OdeSystem>(
    system: &mut S,
    s0: &[f64],
    t_span: (f64, f64),
    cfg: &SolverConfig,
    sample_times: &[f64],
) -> Result<(Solution, DenseOutput)> {
    integrate_impl(system, s0, t_span, cfg, sample_times, true)
        .map(|(sol, dense)| (sol, dense.expect("dense output requested")))
}

fn integrate_impl<S: OdeSystem>(
    system: &mut S,
    s0: &[f64],
    (t0, t_end): (f64, f64),
    cfg: &SolverConfig,
    sample_times: &[f64],
    store_dense: bool,
) -> Result<(Solution, Option<DenseOutput>)> {
    cfg.validate()?;
    let n = system.dim();
    if s0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: s0.len(),
        });
    }
    if !(t_end > t0) {
        return Err(Error::config("t_span must be increasing"));
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("initial state"));
    }
    for w in sample_times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config("sample times must be strictly increasing"));
        }
    }
    if let (Some(&first), Some(&last)) = (sample_times.first(), sample_times.last()) {
        if first < t0 - 1e-12 || last > t_end + 1e-12 {
            return Err(Error::config("sample times must lie within t_span"));
        }
    }

    let mut stats = SolveStats::default();
    let mut y = s0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut y_stage = vec![0.0; n];
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
    let mut cont = vec![0.0; 5 * n];

    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(sample_times.len());
    let mut cursor = 0;
    while cursor < sample_times.len() && sample_times[cursor] <= t0 {
        samples.push(y.clone());
        cursor += 1;
    }

    let mut dense_segments = if store_dense {
        Some(Vec::with_capacity(1024))
    } else {
        None
    };

    let mut t = t0;
    let mut dt = cfg.dt_init.min(t_end - t0);
    let mut facold: f64 = 1e-4;
    let mut k1_fresh = false;

    system.rhs(t, &y, &mut k[0])?;
    stats.rhs_evals += 1;

    let mut attempts = 0usize;
    while t < t_end {
        attempts += 1;
        if attempts > cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                t,
                max_steps: cfg.max_steps,
            });
        }
        if dt < cfg.dt_min {
            return Err(Error::StepSizeUnderflow { t, dt });
        }
        let h = dt.min(t_end - t);

        if !k1_fresh {
            system.rhs(t, &y, &mut k[0])?;
            stats.rhs_evals += 1;
        }

        // Stages 2..7 (stage 7 is the FSAL derivative at the new point).
        let mut stage_failed = false;
        for i in 1..7 {
            for j in 0..n {
                let mut acc = 0.0;
                for (l, klj) in k.iter().enumerate().take(i) {
                    let a = A[i - 1][l];
                    if a != 0.0 {
                        acc += a * klj[j];
                    }
                }
                y_stage[j] = y[j] + h * acc;
            }
            let (ki, rest) = {
                let (head, tail) = k.split_at_mut(i);
                (&mut tail[0], head)
            };
            let _ = rest;
            if system.rhs(t + C[i] * h, &y_stage, ki).is_err() {
                stage_failed = true;
                stats.rhs_evals += 1;
                break;
            }
            stats.rhs_evals += 1;
        }

        let err = if stage_failed {
            f64::INFINITY
        } else {
            for j in 0..n {
                let mut acc = 0.0;
                for (l, kl) in k.iter().enumerate() {
                    if B5[l] != 0.0 {
                        acc += B5[l] * kl[j];
                    }
                }
                y_new[j] = y[j] + h * acc;
            }
            let mut err_sq = 0.0;
            let mut non_finite = false;
            for j in 0..n {
                let mut e = 0.0;
                for (l, kl) in k.iter().enumerate() {
                    let diff = B5[l] - B4[l];
                    if diff != 0.0 {
                        e += diff * kl[j];
                    }
                }
                e *= h;
                let scale = cfg.atol + cfg.rtol * y[j].abs().max(y_new[j].abs());
                if !y_new[j].is_finite() {
                    non_finite = true;
                }
                err_sq += (e / scale) * (e / scale);
            }
            if non_finite {
                f64::INFINITY
            } else {
                (err_sq / n as f64).sqrt()
            }
        };

        if err.is_finite() && err <= 1.0 {
            // Accepted. Note: k[6] = f(t + h, y_new) thanks to the FSAL pair.
            let need_interp = store_dense
                || (cursor < sample_times.len() && sample_times[cursor] <= t + h + 1e-14);
            if need_interp {
                for j in 0..n {
                    let ydiff = y_new[j] - y[j];
                    let bspl = h * k[0][j] - ydiff;
                    cont[j] = y[j];
                    cont[n + j] = ydiff;
                    cont[2 * n + j] = bspl;
                    cont[3 * n + j] = ydiff - h * k[6][j] - bspl;
                    cont[4 * n + j] = h
                        * (D[0] * k[0][j]
                            + D[2] * k[2][j]
                            + D[3] * k[3][j]
                            + D[4] * k[4][j]
                            + D[5] * k[5][j]
                            + D[6] * k[6][j]);
                }
                if let Some(segs) = dense_segments.as_mut() {
                    segs.push((t, h, cont.clone()));
                }
                while cursor < sample_times.len() && sample_times[cursor] <= t + h + 1e-14 {
                    let theta = ((sample_times[cursor] - t) / h).clamp(0.0, 1.0);
                    let mut out = vec![0.0; n];
                    eval_interpolant(&cont, n, theta, &mut out);
                    samples.push(out);
                    cursor += 1;
                }
            }

            t += h;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6); // FSAL
            k1_fresh = true;
            stats.steps_accepted += 1;

            let fac = SAFETY * err.powf(-PI_EXPO) * facold.powf(PI_BETA);
            dt = (h * fac.clamp(MIN_SCALE, MAX_SCALE)).min(cfg.dt_max);
            facold = err.max(1e-4);
        } else {
            stats.steps_rejected += 1;
            k1_fresh = !stage_failed;
            let fac = if err.is_finite() {
                (SAFETY * err.powf(-PI_EXPO)).clamp(MIN_SCALE, 1.0)
            } else {
                MIN_SCALE
            };
            dt = h * fac;
        }
    }

    // Sample times equal to t_end (within tolerance) map to the final state.
    while cursor < sample_times.len() {
        samples.push(y.clone());
        cursor += 1;
    }

    Ok((
        Solution {
            sample_times: sample_times.to_vec(),
            samples,
            final_state: y,
            stats,
        },
        dense_segments.map(|segments| DenseOutput { dim: n, segments }),
    ))
}

/// Uniformly sampled named signals over a window `[t0, t0 + n*dt]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub t0: f64,
    pub dt_sample: f64,
    pub names: Vec<String>,
    /// Channel-major storage: `data[c][k]` is channel `c` at sample `k`.
    pub data: Vec<Vec<f64>>,
}

impl TimeTrace {
    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples())
            .map(|k| self.t0 + k as f64 * self.dt_sample)
            .collect()
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }

    /// Writes `t,<channel>...` rows at full double precision.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for name in &self.names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        let times = self.times();
        for k in 0..self.n_samples() {
            write!(w, "{:.16e}", times[k])?;
            for c in 0..self.names.len() {
                write!(w, ",{:.16e}", self.data[c][k])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Output of the limit-cycle protocol: the last-beat trace, a per-channel
/// periodicity residual (max gap between the last two beats, normalized by
/// the channel's peak magnitude) and the exact final state.
#[derive(Debug, Clone)]
pub struct LimitCycleRun {
    pub trace: TimeTrace,
    pub periodicity_residual: Vec<f64>,
    pub final_state: Vec<f64>,
    pub stats: SolveStats,
}

/// Sample grid of `n_beats * t_hb / dt_sample + 1` points ending exactly at
/// `t_end`.
fn beat_grid(t_end: f64, span: f64, dt_sample: f64) -> Vec<f64> {
    let n = (span / dt_sample).round() as usize;
    (0..=n)
        .map(|k| t_end - dt_sample * (n - k) as f64)
        .collect()
}

/// Integrates `n_beats` heartbeats from the model's initial state and returns
/// the trace restricted to the last beat, sampled every `dt_sample`.
pub fn run_to_limit_cycle<S: ChannelModel>(
    system: &mut S,
    s0: &[f64],
    n_beats: usize,
    t_hb: f64,
    dt_sample: f64,
    cfg: &SolverConfig,
) -> Result<LimitCycleRun> {
    if n_beats == 0 {
        return Err(Error::config("n_beats must be at least 1"));
    }
    let t_end = n_beats as f64 * t_hb;
    // Sample the last two beats so the periodicity residual comes for free.
    let window_beats = n_beats.min(2);
    let grid = beat_grid(t_end, window_beats as f64 * t_hb, dt_sample);
    let sol = integrate(system, s0, (0.0, t_end), cfg, &grid)?;

    let names = system.channel_names();
    let n_ch = names.len();
    let mut ch_buf = vec![0.0; n_ch];
    let mut all = vec![vec![0.0; grid.len()]; n_ch];
    for (kk, state) in sol.samples.iter().enumerate() {
        system.channels(grid[kk], state, &mut ch_buf);
        for c in 0..n_ch {
            all[c][kk] = ch_buf[c];
        }
    }

    let per_beat = (t_hb / dt_sample).round() as usize; // samples per beat minus one
    let last_beat_start = grid.len() - (per_beat + 1);
    let data: Vec<Vec<f64>> = all.iter().map(|c| c[last_beat_start..].to_vec()).collect();

    let periodicity_residual = if window_beats == 2 {
        all.iter()
            .map(|c| {
                let mut gap: f64 = 0.0;
                let mut mag: f64 = 0.0;
                for k in 0..=per_beat {
                    let cur = c[last_beat_start + k];
                    gap = gap.max((cur - c[k]).abs());
                    mag = mag.max(cur.abs());
                }
                gap / mag.max(1e-12)
            })
            .collect()
    } else {
        vec![f64::NAN; n_ch]
    };

    Ok(LimitCycleRun {
        trace: TimeTrace {
            t0: t_end - t_hb,
            dt_sample,
            names,
            data,
        },
        periodicity_residual,
        final_state: sol.final_state,
        stats: sol.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Linear {
        lambda: f64,
    }

    impl OdeSystem for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = self.lambda * y[0];
            Ok(())
        }
    }

    struct Constant;
    impl OdeSystem for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&mut self, _t: f64, _y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = 0.0;
            dy[1] = 0.0;
            Ok(())
        }
    }

    #[test]
    fn constant_rhs_takes_one_macro_step() {
        let cfg = SolverConfig {
            dt_init: 1.0,
            dt_max: 1.0,
            ..SolverConfig::default()
        };
        let sol = integrate(&mut Constant, &[3.0, -1.0], (0.0, 1.0), &cfg, &[0.25, 0.5, 1.0])
            .unwrap();
        assert_eq!(sol.stats.steps_accepted, 1);
        for s in &sol.samples {
            assert_eq!(s, &vec![3.0, -1.0]);
        }
    }

    #[test]
    fn exponential_decay_matches_analytic_endpoint() {
        let cfg = SolverConfig::default();
        let sol = integrate(&mut Linear { lambda: -1.0 }, &[1.0], (0.0, 1.0), &cfg, &[]).unwrap();
        let exact = (-1.0f64).exp();
        assert!(
            (sol.final_state[0] - exact).abs() <= 10.0 * cfg.rtol * exact,
            "err {}",
            (sol.final_state[0] - exact).abs()
        );
    }

    #[test]
    fn fixed_step_convergence_is_at_least_fourth_order() {
        // Pinning dt_min = dt_init = dt_max with loose tolerances forces a
        // fixed-step run, exposing the raw order of the pair.
        let errs: Vec<f64> = [0.05, 0.025, 0.0125]
            .iter()
            .map(|&h| {
                let cfg = SolverConfig {
                    rtol: 1e10,
                    atol: 1e10,
                    dt_init: h,
                    dt_min: h,
                    dt_max: h,
                    max_steps: 10_000,
                };
                let sol =
                    integrate(&mut Linear { lambda: -1.0 }, &[1.0], (0.0, 1.0), &cfg, &[]).unwrap();
                (sol.final_state[0] - (-1.0f64).exp()).abs()
            })
            .collect();
        assert!(errs[0] / errs[1] >= 16.0, "ratio {}", errs[0] / errs[1]);
        assert!(errs[1] / errs[2] >= 16.0, "ratio {}", errs[1] / errs[2]);
    }

    #[test]
    fn dense_output_matches_step_endpoints() {
        let cfg = SolverConfig {
            dt_max: 0.1,
            ..SolverConfig::default()
        };
        let (sol, dense) =
            integrate_dense(&mut Linear { lambda: -0.7 }, &[2.0], (0.0, 2.0), &cfg, &[]).unwrap();
        let mut out = [0.0];
        for (t0, h, cont) in &dense.segments {
            // theta = 0 reproduces the left state stored in the coefficients
            eval_interpolant(cont, 1, 0.0, &mut out);
            assert_relative_eq!(out[0], cont[0], max_relative = 1e-15);
            // theta = 1 reproduces the right state (next segment's left state)
            eval_interpolant(cont, 1, 1.0, &mut out);
            let right = cont[0] + cont[1];
            assert_relative_eq!(out[0], right, max_relative = 1e-12);
            let _ = (t0, h);
        }
        assert_relative_eq!(
            dense.segments.last().unwrap().0 + dense.segments.last().unwrap().1,
            2.0,
            epsilon = 1e-12
        );
        assert_eq!(sol.final_state.len(), 1);
    }

    #[test]
    fn dense_output_interpolates_the_analytic_solution() {
        let cfg = SolverConfig {
            dt_max: 0.05,
            ..SolverConfig::default()
        };
        let (_, dense) =
            integrate_dense(&mut Linear { lambda: -1.0 }, &[1.0], (0.0, 1.0), &cfg, &[]).unwrap();
        let mut out = [0.0];
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            dense.eval(t, &mut out);
            assert_relative_eq!(out[0], (-t).exp(), max_relative = 1e-6);
        }
    }

    #[test]
    fn integration_is_deterministic() {
        let cfg = SolverConfig::default();
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let a = integrate(&mut Linear { lambda: -2.0 }, &[1.0], (0.0, 1.0), &cfg, &grid).unwrap();
        let b = integrate(&mut Linear { lambda: -2.0 }, &[1.0], (0.0, 1.0), &cfg, &grid).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x[0].to_bits(), y[0].to_bits());
        }
    }

    #[test]
    fn sampling_grid_is_honored() {
        let cfg = SolverConfig::default();
        let grid: Vec<f64> = (0..=4).map(|k| k as f64 * 0.25).collect();
        let sol = integrate(&mut Linear { lambda: -1.0 }, &[1.0], (0.0, 1.0), &cfg, &grid).unwrap();
        assert_eq!(sol.samples.len(), 5);
        assert_relative_eq!(sol.samples[0][0], 1.0);
        for (k, s) in sol.samples.iter().enumerate() {
            assert_relative_eq!(s[0], (-grid[k]).exp(), max_relative = 1e-6);
        }
        assert_eq!(
            sol.samples.last().unwrap()[0].to_bits(),
            sol.final_state[0].to_bits()
        );
    }

    #[test]
    fn max_steps_aborts_with_diagnostic() {
        let cfg = SolverConfig {
            max_steps: 3,
            dt_max: 1e-4,
            ..SolverConfig::default()
        };
        let err = integrate(&mut Linear { lambda: -1.0 }, &[1.0], (0.0, 1.0), &cfg, &[]);
        assert!(matches!(err, Err(Error::MaxStepsExceeded { .. })));
    }

    #[test]
    fn failing_rhs_triggers_step_underflow() {
        // fails for every stage beyond t = 0.5: steps shrink to dt_min
        struct Wall;
        impl OdeSystem for Wall {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&mut self, t: f64, _y: &[f64], dy: &mut [f64]) -> Result<()> {
                if t > 0.5 {
                    return Err(Error::non_finite("wall"));
                }
                dy[0] = 1.0;
                Ok(())
            }
        }
        let err = integrate(&mut Wall, &[0.0], (0.0, 1.0), &SolverConfig::default(), &[]);
        assert!(matches!(err, Err(Error::StepSizeUnderflow { .. })));

        // an rhs that fails at the initial point propagates its own error
        struct Bad;
        impl OdeSystem for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&mut self, _t: f64, _y: &[f64], _dy: &mut [f64]) -> Result<()> {
                Err(Error::non_finite("always fails"))
            }
        }
        let err = integrate(&mut Bad, &[1.0], (0.0, 1.0), &SolverConfig::default(), &[]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    // A 2-channel oscillator for exercising the limit-cycle protocol.
    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
            let omega = 2.0 * std::f64::consts::PI / 0.8;
            dy[0] = -omega * y[1];
            dy[1] = omega * y[0];
            Ok(())
        }
    }
    impl ChannelModel for Oscillator {
        fn channel_names(&self) -> Vec<String> {
            vec!["x".into(), "y".into()]
        }
        fn channels(&self, _t: f64, y: &[f64], out: &mut [f64]) {
            out.copy_from_slice(y);
        }
    }

    #[test]
    fn limit_cycle_protocol_grid() {
        let cfg = SolverConfig::default();
        let run = run_to_limit_cycle(&mut Oscillator, &[1.0, 0.0], 5, 0.8, 0.01, &cfg).unwrap();
        assert_eq!(run.trace.n_samples(), 81);
        assert_relative_eq!(run.trace.t0, 3.2, epsilon = 1e-12);
        let times = run.trace.times();
        assert_relative_eq!(*times.last().unwrap(), 4.0, epsilon = 1e-12);
        // A pure oscillator with period 0.8 is already on its limit cycle.
        for r in &run.periodicity_residual {
            assert!(*r < 1e-5, "residual {r}");
        }
    }

    #[test]
    fn single_beat_covers_from_time_zero() {
        let cfg = SolverConfig::default();
        let run = run_to_limit_cycle(&mut Oscillator, &[1.0, 0.0], 1, 0.8, 0.01, &cfg).unwrap();
        assert_eq!(run.trace.n_samples(), 81);
        assert_relative_eq!(run.trace.t0, 0.0, epsilon = 1e-12);
        assert!(run.periodicity_residual[0].is_nan());
    }

    #[test]
    fn csv_round_trip_precision() {
        let trace = TimeTrace {
            t0: 0.0,
            dt_sample: 0.01,
            names: vec!["a".into()],
            data: vec![vec![1.0 / 3.0, 2.0 / 7.0]],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,a");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        let parsed: f64 = row[1].parse().unwrap();
        assert_eq!(parsed.to_bits(), (1.0f64 / 3.0).to_bits());
    }
}
