//! Global sensitivity analysis: Saltelli sampling design and first-order /
//! total-effect Sobol indices.
//!
//! The design matrices are filled from a scrambled Sobol sequence (Joe-Kuo
//! direction numbers, Matousek linear matrix scrambling plus a digital
//! shift, both seed-controlled). First-order indices use the Saltelli-2002
//! estimator, total effects the Jansen estimator; confidence half-widths
//! come from a row bootstrap.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Primitive polynomials (full binary encoding) for the first 40 dimensions,
/// cross-checked against scipy's packaged Joe-Kuo table.
const POLY: [u32; 40] = [
    1, 3, 7, 11, 13, 19, 25, 37, 41, 47, 55, 59, 61, 67, 91, 97, 103, 109, 115, 131, 137, 143,
    145, 157, 167, 171, 185, 191, 193, 203, 211, 213, 229, 239, 241, 247, 253, 285, 299, 301,
];

/// Initial direction integers per dimension (same source).
const M_INIT: [&[u32]; 40] = [
    &[1],
    &[1],
    &[1, 3],
    &[1, 3, 1],
    &[1, 1, 1],
    &[1, 1, 3, 3],
    &[1, 3, 5, 13],
    &[1, 1, 5, 5, 17],
    &[1, 1, 5, 5, 5],
    &[1, 1, 7, 11, 19],
    &[1, 1, 5, 1, 1],
    &[1, 1, 1, 3, 11],
    &[1, 3, 5, 5, 31],
    &[1, 3, 3, 9, 7, 49],
    &[1, 1, 1, 15, 21, 21],
    &[1, 3, 1, 13, 27, 49],
    &[1, 1, 1, 15, 7, 5],
    &[1, 3, 1, 15, 13, 25],
    &[1, 1, 5, 5, 19, 61],
    &[1, 3, 7, 11, 23, 15, 103],
    &[1, 3, 7, 13, 13, 15, 69],
    &[1, 1, 3, 13, 7, 35, 63],
    &[1, 3, 5, 9, 1, 25, 53],
    &[1, 3, 1, 13, 9, 35, 107],
    &[1, 3, 1, 5, 27, 61, 31],
    &[1, 1, 5, 11, 19, 41, 61],
    &[1, 3, 5, 3, 3, 13, 69],
    &[1, 1, 7, 13, 1, 19, 1],
    &[1, 3, 7, 5, 13, 19, 59],
    &[1, 1, 3, 9, 25, 29, 41],
    &[1, 3, 5, 13, 23, 1, 55],
    &[1, 3, 7, 3, 13, 59, 17],
    &[1, 3, 1, 3, 5, 53, 69],
    &[1, 1, 5, 5, 23, 33, 13],
    &[1, 1, 7, 7, 1, 61, 123],
    &[1, 1, 7, 9, 13, 61, 49],
    &[1, 3, 3, 5, 3, 55, 33],
    &[1, 3, 1, 15, 31, 13, 49, 245],
    &[1, 3, 5, 15, 31, 59, 63, 97],
    &[1, 3, 1, 11, 11, 11, 77, 249],
];

const BITS: usize = 32;

/// Maximum supported dimensionality of the raw sequence.
pub const MAX_DIMS: usize = POLY.len();

/// Sobol low-discrepancy sequence, optionally scrambled (linear matrix
/// scramble + digital shift, per dimension).
pub struct SobolSequence {
    dims: usize,
    /// direction integers, `BITS` per dimension
    v: Vec<[u32; BITS]>,
    /// per-dimension scramble rows (digit-indexed masks) and shift
    scramble: Option<Vec<([u32; BITS], u32)>>,
}

impl SobolSequence {
    /// Unscrambled sequence (point 0 is the origin).
    pub fn plain(dims: usize) -> Result<SobolSequence> {
        SobolSequence::build(dims, None)
    }

    /// Scrambled sequence; distinct seeds give independent randomizations.
    pub fn scrambled(dims: usize, seed: u64) -> Result<SobolSequence> {
        SobolSequence::build(dims, Some(seed))
    }

    fn build(dims: usize, seed: Option<u64>) -> Result<SobolSequence> {
        if dims == 0 || dims > MAX_DIMS {
            return Err(Error::config(format!(
                "sequence supports 1..={MAX_DIMS} dimensions, got {dims}"
            )));
        }
        let mut v = Vec::with_capacity(dims);
        for d in 0..dims {
            let mut vd = [0u32; BITS];
            if d == 0 {
                for (k, slot) in vd.iter_mut().enumerate() {
                    *slot = 1 << (31 - k);
                }
            } else {
                let poly = POLY[d];
                let s = (31 - poly.leading_zeros()) as usize; // degree
                let minit = M_INIT[d];
                for k in 0..s.min(BITS) {
                    vd[k] = minit[k] << (31 - k);
                }
                for k in s..BITS {
                    let mut val = vd[k - s] ^ (vd[k - s] >> s);
                    for j in 1..s {
                        if (poly >> (s - j)) & 1 == 1 {
                            val ^= vd[k - j];
                        }
                    }
                    vd[k] = val;
                }
            }
            v.push(vd);
        }
        let scramble = seed.map(|seed| {
            (0..dims)
                .map(|d| {
                    let mut rng = ChaCha12Rng::seed_from_u64(
                        seed ^ (d as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    );
                    // lower-triangular rows in digit order: digit k mixes
                    // itself and more significant digits
                    let mut rows = [0u32; BITS];
                    for (k, row) in rows.iter_mut().enumerate() {
                        let own = 1u32 << (31 - k);
                        let above_mask = if k == 0 { 0 } else { !((own << 1).wrapping_sub(1)) };
                        *row = own | (rng.gen::<u32>() & above_mask);
                    }
                    let shift: u32 = rng.gen();
                    (rows, shift)
                })
                .collect()
        });
        Ok(SobolSequence { dims, v, scramble })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// The `index`-th point in `[0,1)^dims` (random access via Gray code).
    pub fn point(&self, index: u64, out: &mut [f64]) {
        debug_assert!(out.len() >= self.dims);
        let gray = index ^ (index >> 1);
        for d in 0..self.dims {
            let mut x: u32 = 0;
            let mut g = gray;
            let mut k = 0;
            while g != 0 && k < BITS {
                if g & 1 == 1 {
                    x ^= self.v[d][k];
                }
                g >>= 1;
                k += 1;
            }
            if let Some(scr) = &self.scramble {
                let (rows, shift) = &scr[d];
                let mut y: u32 = 0;
                for (k, row) in rows.iter().enumerate() {
                    y |= ((row & x).count_ones() & 1) << (31 - k);
                }
                x = y ^ shift;
            }
            out[d] = x as f64 / (1u64 << 32) as f64;
        }
    }
}

/// Saltelli design: base matrices A and B plus the k cross matrices
/// `AB_i` (A with column i replaced from B), already scaled to the bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaltelliDesign {
    pub n: usize,
    pub k: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// `ab[i][j]` is row j of the i-th cross matrix.
    pub ab: Vec<Vec<Vec<f64>>>,
}

impl SaltelliDesign {
    pub fn total_evaluations(&self) -> usize {
        self.n * (self.k + 2)
    }
}

/// Builds the Saltelli design from a scrambled Sobol sequence in 2k
/// dimensions. `n` must be a power of two for digital-net balance.
pub fn saltelli_sample(
    lower: &[f64],
    upper: &[f64],
    n: usize,
    seed: u64,
) -> Result<SaltelliDesign> {
    let k = lower.len();
    if k == 0 || upper.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k.max(1),
            got: upper.len(),
        });
    }
    if !n.is_power_of_two() {
        return Err(Error::config(format!(
            "base sample count must be a power of two, got {n}"
        )));
    }
    for i in 0..k {
        if !(lower[i] <= upper[i]) {
            return Err(Error::config(format!(
                "empty interval [{}, {}] at component {i}",
                lower[i], upper[i]
            )));
        }
    }
    let seq = SobolSequence::scrambled(2 * k, seed)?;
    let mut a = vec![vec![0.0; k]; n];
    let mut b = vec![vec![0.0; k]; n];
    let mut buf = vec![0.0; 2 * k];
    for j in 0..n {
        seq.point(j as u64, &mut buf);
        for i in 0..k {
            a[j][i] = lower[i] + (upper[i] - lower[i]) * buf[i];
            b[j][i] = lower[i] + (upper[i] - lower[i]) * buf[k + i];
        }
    }
    let ab: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut row = a[j].clone();
                    row[i] = b[j][i];
                    row
                })
                .collect()
        })
        .collect();
    Ok(SaltelliDesign {
        n,
        k,
        lower: lower.to_vec(),
        upper: upper.to_vec(),
        a,
        b,
        ab,
    })
}

/// Model outputs on the design: one vector of Q QoI values per row.
#[derive(Debug, Clone)]
pub struct DesignEvaluations {
    pub f_a: Vec<Vec<f64>>,
    pub f_b: Vec<Vec<f64>>,
    /// `f_ab[i][j]` = outputs on row j of the i-th cross matrix.
    pub f_ab: Vec<Vec<Vec<f64>>>,
    pub imputed: usize,
}

/// First-order and total-effect indices (parameters x QoIs) with bootstrap
/// confidence half-widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SobolResult {
    pub s1: Vec<Vec<f64>>,
    pub st: Vec<Vec<f64>>,
    pub s1_halfwidth: Vec<Vec<f64>>,
    pub st_halfwidth: Vec<Vec<f64>>,
    pub imputed: usize,
    pub n: usize,
}

const BOOTSTRAP_RESAMPLES: usize = 200;

fn estimate_for_rows(
    rows: &[usize],
    q: usize,
    f_a: &[Vec<f64>],
    f_b: &[Vec<f64>],
    f_ab_i: &[Vec<f64>],
) -> (f64, f64) {
    let n = rows.len() as f64;
    let mut mean = 0.0;
    for &j in rows {
        mean += f_a[j][q] + f_b[j][q];
    }
    mean /= 2.0 * n;
    let mut var = 0.0;
    for &j in rows {
        var += (f_a[j][q] - mean).powi(2) + (f_b[j][q] - mean).powi(2);
    }
    var /= 2.0 * n - 1.0;
    if var <= 0.0 {
        return (0.0, 0.0);
    }
    let mut s1 = 0.0;
    let mut st = 0.0;
    for &j in rows {
        s1 += f_b[j][q] * (f_ab_i[j][q] - f_a[j][q]);
        st += (f_a[j][q] - f_ab_i[j][q]).powi(2);
    }
    (s1 / n / var, st / (2.0 * n) / var)
}

/// Saltelli-2002 first-order and Jansen total-effect estimators, with a row
/// bootstrap for confidence half-widths (1.96 standard deviations).
pub fn sobol_indices(
    design: &SaltelliDesign,
    evals: &DesignEvaluations,
    seed: u64,
) -> Result<SobolResult> {
    let n = design.n;
    let k = design.k;
    if evals.f_a.len() != n || evals.f_b.len() != n || evals.f_ab.len() != k {
        return Err(Error::GridMismatch(
            "evaluation shapes do not match the design".to_string(),
        ));
    }
    let q_count = evals.f_a.first().map_or(0, Vec::len);
    for row in evals
        .f_a
        .iter()
        .chain(&evals.f_b)
        .chain(evals.f_ab.iter().flatten())
    {
        if row.len() != q_count || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("design evaluations"));
        }
    }

    let all_rows: Vec<usize> = (0..n).collect();
    let mut s1 = vec![vec![0.0; q_count]; k];
    let mut st = vec![vec![0.0; q_count]; k];
    let mut s1_hw = vec![vec![0.0; q_count]; k];
    let mut st_hw = vec![vec![0.0; q_count]; k];

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let resamples: Vec<Vec<usize>> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| rng.gen_range(0..n)).collect())
        .collect();

    for i in 0..k {
        for q in 0..q_count {
            let (s1v, stv) = estimate_for_rows(&all_rows, q, &evals.f_a, &evals.f_b, &evals.f_ab[i]);
            s1[i][q] = s1v;
            st[i][q] = stv;
            let mut s1_samples = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
            let mut st_samples = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
            for rows in &resamples {
                let (a, b) = estimate_for_rows(rows, q, &evals.f_a, &evals.f_b, &evals.f_ab[i]);
                s1_samples.push(a);
                st_samples.push(b);
            }
            let sd = |xs: &[f64]| {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
            };
            s1_hw[i][q] = 1.96 * sd(&s1_samples);
            st_hw[i][q] = 1.96 * sd(&st_samples);
        }
    }

    Ok(SobolResult {
        s1,
        st,
        s1_halfwidth: s1_hw,
        st_halfwidth: st_hw,
        imputed: evals.imputed,
        n,
    })
}

/// Evaluates a model over the whole design (parallel map over rows).
/// Failed evaluations are imputed from the nearest successful design row
/// and counted; more than 5% failures abort.
pub fn evaluate_design<F>(design: &SaltelliDesign, f: F) -> Result<DesignEvaluations>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    // flatten all rows: A, B, then the k AB matrices
    let mut rows: Vec<&[f64]> = Vec::with_capacity(design.total_evaluations());
    rows.extend(design.a.iter().map(Vec::as_slice));
    rows.extend(design.b.iter().map(Vec::as_slice));
    for m in &design.ab {
        rows.extend(m.iter().map(Vec::as_slice));
    }

    let results: Vec<Option<Vec<f64>>> = rows
        .par_iter()
        .map(|row| f(row).ok().filter(|v| v.iter().all(|x| x.is_finite())))
        .collect();

    let failed = results.iter().filter(|r| r.is_none()).count();
    let total = results.len();
    if failed * 20 > total {
        return Err(Error::TooManyFailures { failed, total });
    }

    // nearest-neighbor imputation in normalized design coordinates
    let scale: Vec<f64> = design
        .lower
        .iter()
        .zip(&design.upper)
        .map(|(lo, hi)| (hi - lo).max(1e-300))
        .collect();
    let distance = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(&scale)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum()
    };
    let mut filled: Vec<Vec<f64>> = Vec::with_capacity(total);
    for (j, r) in results.iter().enumerate() {
        match r {
            Some(v) => filled.push(v.clone()),
            None => {
                let mut best = None;
                let mut best_d = f64::INFINITY;
                for (l, other) in results.iter().enumerate() {
                    if let Some(v) = other {
                        let d = distance(rows[j], rows[l]);
                        if d < best_d {
                            best_d = d;
                            best = Some(v.clone());
                        }
                    }
                }
                filled.push(best.ok_or(Error::TooManyFailures { failed, total })?);
            }
        }
    }

    let n = design.n;
    let f_a = filled[..n].to_vec();
    let f_b = filled[n..2 * n].to_vec();
    let f_ab: Vec<Vec<Vec<f64>>> = (0..design.k)
        .map(|i| filled[(2 + i) * n..(3 + i) * n].to_vec())
        .collect();
    Ok(DesignEvaluations {
        f_a,
        f_b,
        f_ab,
        imputed: failed,
    })
}

/// Full pipeline: design, batch evaluation, index estimation.
pub fn run_sensitivity<F>(
    lower: &[f64],
    upper: &[f64],
    n: usize,
    seed: u64,
    f: F,
) -> Result<(SaltelliDesign, SobolResult)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let design = saltelli_sample(lower, upper, n, seed)?;
    let evals = evaluate_design(&design, f)?;
    let result = sobol_indices(&design, &evals, seed ^ 0xb007)?;
    Ok((design, result))
}
