//! Affinity-dimension root finding, lower affinity dimension via finite
//! truncations, attractor sampling, and box-counting cross-checks.
//!
//! The affinity dimension is the root of `s ↦ P(𝖠, s)`. Bisection only ever
//! rejects a half-interval on a certified pressure sign: `upper(s) < 0` moves
//! the right endpoint, `lower_certified(s) > 0` (or a divergence witness)
//! moves the left one. When neither certifies within the budget the best
//! honest enclosing interval is returned with a note — never a point
//! estimate.

use crate::linalg::{self, Matrix, ScaledMatrix};
use crate::pressure::{
    pressure_bracket, suggested_depth, theta_estimate, EngineOptions, PressureError,
};
use crate::reducibility::{detriangularise, ReducibilityError};
use crate::systems::{SystemError, SystemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;

#[derive(Debug, thiserror::Error)]
pub enum DimensionError {
    #[error("pressure error: {0}")]
    Pressure(#[from] PressureError),
    #[error("system error: {0}")]
    System(#[from] SystemError),
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("reducibility error: {0}")]
    Reducibility(#[from] ReducibilityError),
    #[error("system is not declared contractive (sup‖A_i‖ = {0})")]
    NotContractive(f64),
    #[error("schedule must be strictly increasing and non-empty")]
    BadSchedule,
    #[error("box counting needs at least 4 scales spanning a decade")]
    BadScales,
    #[error("degenerate point set (diameter {0:.3e})")]
    DegeneratePointSet(f64),
    #[error("point set is empty")]
    NoPoints,
}

/// An interval certified to contain the affinity dimension.
#[derive(Debug, Clone)]
pub struct AffinityInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when the requested tolerance could not be reached within budget;
    /// the interval is still a valid enclosure.
    pub note: Option<String>,
}

impl AffinityInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Exact closed-form bisection for multiplicative systems:
/// `P(s) = log Σ_i φ^s(A_i)` is continuous and strictly decreasing.
fn multiplicative_root(system: &SystemSpec, tol: f64) -> Result<AffinityInterval, DimensionError> {
    let f = |s: f64| system.multiplicative_pressure(s, 0);
    let mut lo = 0.0f64;
    if f(0.0)? <= 0.0 {
        // single-map boundary case: P(0) = 0 and P < 0 beyond
        return Ok(AffinityInterval { lo: 0.0, hi: 0.0, note: None });
    }
    let mut hi = system.dim as f64;
    while f(hi)? > 0.0 {
        hi *= 2.0;
        if hi > 64.0 * system.dim as f64 {
            return Err(DimensionError::NotContractive(f64::NAN));
        }
    }
    let target = tol.min(1e-9);
    while hi - lo > target {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(AffinityInterval { lo, hi, note: None })
}

/// Diagonal scalar blocks of a block-triangularized finite system, when all
/// blocks are one-dimensional and well conditioned.
fn scalar_blocks(system: &SystemSpec) -> Option<Vec<Vec<f64>>> {
    if !system.is_finite() || system.dim < 2 {
        return None;
    }
    let bs = detriangularise(system, 16, 1e-8, 0x5EED).ok()?;
    if bs.ill_conditioned || bs.block_dims.iter().any(|&b| b != 1) {
        return None;
    }
    // per block: the scalar entries over the maps
    let blocks = bs.block_dims.len();
    let mut out = vec![Vec::new(); blocks];
    for per_map in &bs.diagonal_blocks {
        for (j, b) in per_map.iter().enumerate() {
            out[j].push(b.get(0, 0).abs());
        }
    }
    Some(out)
}

/// Closed-form root for triangular systems with scalar diagonal blocks:
/// for `s ≤ 1` the pressure equals the largest block pressure
/// `max_j log Σ_i |b_i^{(j)}|^s` (off-diagonal entries only contribute
/// subexponentially). Returns `None` when the root is not below 1.
fn scalar_block_root(blocks: &[Vec<f64>], tol: f64) -> Option<AffinityInterval> {
    let f = |s: f64| -> f64 {
        blocks
            .iter()
            .map(|b| b.iter().map(|x| if *x > 0.0 { x.powf(s) } else { 0.0 }).sum::<f64>().ln())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    if f(1.0) >= 0.0 {
        return None; // root at or above 1: the reduction is no longer exact
    }
    if f(0.0) <= 0.0 {
        return Some(AffinityInterval { lo: 0.0, hi: 0.0, note: None });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let target = tol.min(1e-9);
    while hi - lo > target {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(AffinityInterval { lo, hi, note: None })
}

#[derive(Clone, Copy, PartialEq)]
enum Sign {
    Negative,
    Positive,
    Unknown,
}

/// Certified sign of `P(𝖠, s)` with depth escalation up to the budget.
fn certified_sign(
    system: &SystemSpec,
    s: f64,
    trunc: usize,
    opts: &EngineOptions,
) -> Result<Sign, DimensionError> {
    let k = system.alphabet_len(trunc).max(1);
    let mut stages: Vec<usize> = [opts.budget / 64.0, opts.budget / 8.0, opts.budget]
        .iter()
        .map(|&b| suggested_depth(k, b).max(1))
        .collect();
    stages.dedup();
    for n in stages {
        let sub = EngineOptions { budget: opts.budget, ..opts.clone() };
        match pressure_bracket(system, s, n, trunc, None, &sub) {
            Ok(Ok(b)) => {
                if b.upper < 0.0 {
                    return Ok(Sign::Negative);
                }
                if matches!(b.lower_certified, Some(l) if l > 0.0) {
                    return Ok(Sign::Positive);
                }
            }
            Ok(Err(_witness)) => return Ok(Sign::Positive),
            Err(PressureError::Budget { .. }) => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Sign::Unknown)
}

/// Enclosing interval for `inf{s ≥ 0 : P(𝖠, s) < 0}` (the upper affinity
/// dimension). Fast paths: exact closed form for multiplicative systems and
/// for triangular systems with scalar diagonal blocks; otherwise certified
/// bisection with depth escalation.
pub fn affinity_dimension(
    system: &SystemSpec,
    tol: f64,
    trunc: usize,
    opts: &EngineOptions,
) -> Result<AffinityInterval, DimensionError> {
    if opts.use_oracle && system.is_finite() && system.multiplicative {
        return multiplicative_root(system, tol);
    }
    if opts.use_oracle {
        if let Some(blocks) = scalar_blocks(system) {
            if let Some(iv) = scalar_block_root(&blocks, tol) {
                return Ok(iv);
            }
        }
    }
    let d = system.dim as f64;
    // find a certified-negative right endpoint
    let mut lo = 0.0f64;
    let mut hi = f64::NAN;
    for probe in [0.5 * d, d, 2.0 * d, 4.0 * d] {
        match certified_sign(system, probe, trunc, opts)? {
            Sign::Negative => {
                hi = probe;
                break;
            }
            Sign::Positive => lo = probe,
            Sign::Unknown => {
                return Ok(AffinityInterval {
                    lo,
                    hi: probe,
                    note: Some(format!(
                        "budget exhausted before certifying P({probe}) < 0"
                    )),
                })
            }
        }
    }
    if hi.is_nan() {
        return Err(DimensionError::NotContractive(f64::NAN));
    }
    let mut note = None;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        match certified_sign(system, mid, trunc, opts)? {
            Sign::Negative => hi = mid,
            Sign::Positive => lo = mid,
            Sign::Unknown => {
                note = Some(format!(
                    "budget exhausted at width {:.3e} (requested {:.3e})",
                    hi - lo,
                    tol
                ));
                break;
            }
        }
    }
    Ok(AffinityInterval { lo, hi, note })
}

/// Lower-affinity-dimension curve: the affinity dimension of each truncation
/// `J_N` along an increasing schedule. For a finite system the curve is the
/// single point given by [`affinity_dimension`].
pub fn ldim_curve(
    system: &SystemSpec,
    schedule: &[usize],
    tol: f64,
    opts: &EngineOptions,
) -> Result<Vec<(usize, f64)>, DimensionError> {
    if system.is_finite() {
        let iv = affinity_dimension(system, tol, 0, opts)?;
        return Ok(vec![(system.len().unwrap(), iv.midpoint())]);
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DimensionError::BadSchedule);
    }
    let mut out = Vec::with_capacity(schedule.len());
    for &n in schedule {
        let sub = system.truncate(n)?;
        let iv = affinity_dimension(&sub, tol, 0, opts)?;
        out.push((n, iv.midpoint()));
    }
    Ok(out)
}

/// Index distribution for the chaos game over the (truncated) alphabet.
#[derive(Debug, Clone)]
pub enum IndexDistribution {
    Uniform,
    /// Proportional to `φ^s(A_i)`; the default for countable systems with
    /// `s` the current dimension estimate.
    PhiS(f64),
    Custom(Vec<f64>),
}

/// `count` attractor points by forward word application
/// `T_{i_1} ∘ ⋯ ∘ T_{i_n}(0)` until the composed contraction is below
/// `1e-12`; reproducible from the seed and independent of thread count.
pub fn chaos_game_sample(
    system: &SystemSpec,
    count: usize,
    seed: u64,
    trunc: usize,
    dist: &IndexDistribution,
) -> Result<Vec<Vec<f64>>, DimensionError> {
    let maps = system.materialize(trunc);
    if maps.is_empty() {
        return Err(DimensionError::NoPoints);
    }
    let d = system.dim;
    if maps.len() == 1 {
        let fp = maps[0].fixed_point()?;
        return Ok(vec![fp; count]);
    }
    let weights: Vec<f64> = match dist {
        IndexDistribution::Uniform => vec![1.0; maps.len()],
        IndexDistribution::PhiS(s) => maps
            .iter()
            .map(|m| {
                ScaledMatrix::from_matrix(&m.linear)
                    .log_phi_s(*s)
                    .map(|l| l.exp())
                    .unwrap_or(0.0)
            })
            .collect(),
        IndexDistribution::Custom(w) => {
            assert_eq!(w.len(), maps.len(), "custom distribution length mismatch");
            w.clone()
        }
    };
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "index distribution has no mass");
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let norms: Vec<f64> = maps.iter().map(|m| m.linear.op_norm()).collect();
    let points: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|idx| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            // running affine composition (M, t): x ↦ Mx + t
            let mut m = Matrix::identity(d);
            let mut t = vec![0.0f64; d];
            let mut bound = 1.0f64;
            for _ in 0..100_000 {
                let u: f64 = rng.gen();
                let l = cdf.partition_point(|&c| c < u).min(maps.len() - 1);
                // (M, t) ∘ T_l
                t = {
                    let mut v = m.apply(&maps[l].translation);
                    for (vi, ti) in v.iter_mut().zip(&t) {
                        *vi += ti;
                    }
                    v
                };
                m = m.mul(&maps[l].linear);
                bound *= norms[l];
                if bound < 1e-12 {
                    break;
                }
            }
            t
        })
        .collect();
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct BoxCount {
    /// Least-squares slope of `log N(ε)` against `log(1/ε)`.
    pub estimate: f64,
    /// `(scale, occupied boxes)` per scale.
    pub counts: Vec<(f64, usize)>,
}

/// Box-counting dimension estimate over the given scales.
pub fn box_counting(points: &[Vec<f64>], scales: &[f64]) -> Result<BoxCount, DimensionError> {
    if points.is_empty() {
        return Err(DimensionError::NoPoints);
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if sorted.len() < 4
        || sorted.iter().any(|&e| !(e > 0.0))
        || sorted[0] / sorted[sorted.len() - 1] < 10.0
    {
        return Err(DimensionError::BadScales);
    }
    let d = points[0].len();
    let mut diameter = 0.0f64;
    for c in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            lo = lo.min(p[c]);
            hi = hi.max(p[c]);
        }
        diameter = diameter.max(hi - lo);
    }
    if diameter < 1e-12 {
        return Err(DimensionError::DegeneratePointSet(diameter));
    }
    let mut counts = Vec::with_capacity(sorted.len());
    for &eps in &sorted {
        let mut cells: HashSet<Vec<i64>> = HashSet::new();
        for p in points {
            cells.insert(p.iter().map(|&x| (x / eps).floor() as i64).collect());
        }
        counts.push((eps, cells.len()));
    }
    // least squares of y = log N against x = log(1/eps)
    let xs: Vec<f64> = counts.iter().map(|&(e, _)| -e.ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&(_, n)| (n as f64).ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(BoxCount { estimate: sxy / sxx, counts })
}

#[derive(Debug, Clone)]
pub struct DimensionReport {
    pub udim_bracket: (f64, f64),
    pub ldim_curve: Vec<(usize, f64)>,
    pub theta_interval: (f64, f64),
    pub boxcount: Option<BoxCount>,
    /// Set when the udim bracket overlaps the θ interval: the affinity
    /// dimension may not exist (the pathology regime) and no point value is
    /// claimed.
    pub dim_aff_may_not_exist: bool,
    /// Point value, reported only for finite systems, certified `θ < udim`,
    /// or a completely reducible block structure.
    pub dim_aff: Option<f64>,
    pub note: Option<String>,
}

/// Full dimension report: udim bracket, θ interval, ldim curve, and the
/// existence flag for `dim_aff`.
pub fn dimension_report(
    system: &SystemSpec,
    tol: f64,
    trunc: usize,
    schedule: &[usize],
    opts: &EngineOptions,
) -> Result<DimensionReport, DimensionError> {
    let udim = affinity_dimension(system, tol, trunc, opts)?;
    let theta = theta_estimate(system, tol)?;
    let curve = if system.is_finite() {
        ldim_curve(system, &[], tol, opts)?
    } else {
        ldim_curve(system, schedule, tol, opts)?
    };
    let overlap = !system.is_finite() && udim.lo <= theta.1 && theta.0 <= udim.hi;
    let dim_aff = if system.is_finite() || theta.1 < udim.lo {
        Some(udim.midpoint())
    } else {
        None
    };
    Ok(DimensionReport {
        udim_bracket: (udim.lo, udim.hi),
        ldim_curve: curve,
        theta_interval: theta,
        boxcount: None,
        dim_aff_may_not_exist: overlap,
        dim_aff,
        note: udim.note,
    })
}
