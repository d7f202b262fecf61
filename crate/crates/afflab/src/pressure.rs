//! Partition sums, certified pressure brackets, truncation-error propagation,
//! finiteness-threshold estimation, and pressure shape diagnostics.
//!
//! All sums are accumulated in log space with a running max shift and Kahan
//! compensation. Word enumeration is depth-first, sharded by a fixed-length
//! prefix; shard partials are merged in shard order, so results are
//! byte-identical across thread counts.

use crate::linalg::{self, log_phi_from_log_sigma, ScaledMatrix, SIGMA_FLOOR};
use crate::systems::{AffineMap, DivergenceWitness, SystemSpec};
use rayon::prelude::*;
use thiserror::Error;

/// Default number of word evaluations allowed per engine call.
pub const DEFAULT_BUDGET: f64 = 1e8;

/// Partial-sum target handed to divergence oracles; any positive value
/// certifies divergence, this one keeps witness indices readable.
const DIVERGENCE_TARGET: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PressureError {
    #[error("cost {cost:.3e} words exceeds budget {budget:.3e}; largest feasible depth is {suggested_n}")]
    Budget { cost: f64, budget: f64, suggested_n: usize },
    #[error("certified mode needs {0}")]
    MissingOracle(&'static str),
    #[error("system has no maps")]
    EmptySystem,
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("negative exponent s = {0}")]
    NegativeS(f64),
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("system error: {0}")]
    System(#[from] crate::systems::SystemError),
}

#[derive(Debug, Clone, Copy)]
pub struct EngineOptions {
    /// Word-evaluation budget for one call.
    pub budget: f64,
    /// Consult the closed-form pressure oracle of multiplicative systems.
    pub use_oracle: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { budget: DEFAULT_BUDGET, use_oracle: true }
    }
}

/// Streaming log-sum-exp accumulator with Kahan compensation; deterministic
/// for a fixed push/merge order.
#[derive(Debug, Clone, Copy)]
pub struct LogSumAcc {
    max: f64,
    sum: f64,
    comp: f64,
}

impl LogSumAcc {
    pub fn new() -> Self {
        LogSumAcc { max: f64::NEG_INFINITY, sum: 0.0, comp: 0.0 }
    }

    fn add_scaled(&mut self, v: f64) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn push(&mut self, log_v: f64) {
        if log_v == f64::NEG_INFINITY {
            return;
        }
        if log_v <= self.max {
            self.add_scaled((log_v - self.max).exp());
        } else {
            let f = if self.max == f64::NEG_INFINITY { 0.0 } else { (self.max - log_v).exp() };
            self.sum *= f;
            self.comp *= f;
            self.max = log_v;
            self.add_scaled(1.0);
        }
    }

    pub fn merge(&mut self, other: &LogSumAcc) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max <= self.max {
            self.add_scaled((other.max - self.max).exp() * other.sum);
        } else {
            let f = if self.max == f64::NEG_INFINITY { 0.0 } else { (self.max - other.max).exp() };
            self.sum *= f;
            self.comp *= f;
            self.max = other.max;
            self.add_scaled(other.sum);
        }
    }

    pub fn log_total(&self) -> f64 {
        if self.max == f64::NEG_INFINITY || self.sum <= 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LogSumAcc {
    fn default() -> Self {
        Self::new()
    }
}

/// Adds two log-space quantities.
pub fn log_add(a: f64, b: f64) -> f64 {
    let mut acc = LogSumAcc::new();
    acc.push(a);
    acc.push(b);
    acc.log_total()
}

/// Per-level accumulated sums for one exponent `s`:
/// `log_z[m-1] = log Σ_{|i|=m} φ^s(A_i)` and
/// `log_low[m-1] = log Σ_{|i|=m} σ_d(A_i)^s` (the supermultiplicative
/// companion used for certified lower bounds).
#[derive(Debug, Clone)]
pub struct LevelSums {
    pub s: f64,
    pub n: usize,
    pub alphabet: usize,
    pub log_z: Vec<f64>,
    pub log_low: Vec<f64>,
    /// Words whose product collapsed below the representable range and were
    /// dropped from the lower-route sum (their `φ^s` uses clamped values).
    pub underflow_words: u64,
}

/// Enumeration cost in word evaluations for alphabet `k`, depth `n`.
pub fn enumeration_cost(k: usize, n: usize) -> f64 {
    let kf = k as f64;
    let mut cost = 0.0;
    let mut level = 1.0;
    for _ in 0..n {
        level *= kf;
        cost += level;
        if cost > 1e300 {
            return f64::INFINITY;
        }
    }
    cost
}

/// Largest depth whose enumeration fits the budget (0 when even depth 1 does not).
pub fn suggested_depth(k: usize, budget: f64) -> usize {
    let mut n = 0;
    while enumeration_cost(k, n + 1) <= budget {
        n += 1;
        if n > 64 {
            break;
        }
    }
    n
}

fn check_budget(k: usize, n: usize, budget: f64) -> Result<(), PressureError> {
    let cost = enumeration_cost(k, n);
    if cost > budget {
        return Err(PressureError::Budget { cost, budget, suggested_n: suggested_depth(k, budget) });
    }
    Ok(())
}

/// Sorted `ln σ_i` of the represented matrix, clamping values below the
/// representable floor upward (valid for upper bounds). Returns `None` for an
/// exactly zero product, whose `φ^s` is zero. The flag marks clamping.
fn log_sigmas_clamped(p: &ScaledMatrix) -> Option<(Vec<f64>, bool)> {
    if p.log_scale == f64::NEG_INFINITY || p.mat.max_abs() == 0.0 {
        return None;
    }
    let sd = linalg::svd(&p.mat).ok()?;
    let floor = SIGMA_FLOOR.ln();
    let mut clamped = false;
    let out = sd
        .values
        .iter()
        .map(|&v| {
            if v < SIGMA_FLOOR {
                clamped = true;
                floor + p.log_scale
            } else {
                v.ln() + p.log_scale
            }
        })
        .collect();
    Some((out, clamped))
}

struct ShardAcc {
    // [s_index][level_offset]
    z: Vec<Vec<LogSumAcc>>,
    low: Vec<Vec<LogSumAcc>>,
    underflow: u64,
}

impl ShardAcc {
    fn new(s_count: usize, levels: usize) -> Self {
        ShardAcc {
            z: vec![vec![LogSumAcc::new(); levels]; s_count],
            low: vec![vec![LogSumAcc::new(); levels]; s_count],
            underflow: 0,
        }
    }
}

/// Records the contribution of the word with product `prod` at `level`
/// (1-based), offset against `base_level` in the accumulator.
fn record(
    prod: &ScaledMatrix,
    s_list: &[f64],
    level: usize,
    base_level: usize,
    acc: &mut ShardAcc,
) {
    let Some((log_sigma, clamped)) = log_sigmas_clamped(prod) else {
        acc.underflow += 1;
        return;
    };
    let off = level - base_level;
    let log_sigma_min = *log_sigma.last().unwrap();
    for (si, &s) in s_list.iter().enumerate() {
        if let Ok(lp) = log_phi_from_log_sigma(&log_sigma, s) {
            acc.z[si][off].push(lp);
        }
        if !clamped {
            acc.low[si][off].push(s * log_sigma_min);
        }
    }
    if clamped {
        acc.underflow += 1;
    }
}

fn dfs(
    mats: &[ScaledMatrix],
    prod: &ScaledMatrix,
    depth: usize,
    n: usize,
    s_list: &[f64],
    base_level: usize,
    acc: &mut ShardAcc,
) {
    record(prod, s_list, depth, base_level, acc);
    if depth == n || prod.log_scale == f64::NEG_INFINITY {
        // zero products stay zero under extension: prune
        return;
    }
    for m in mats {
        let child = prod.mul(m);
        dfs(mats, &child, depth + 1, n, s_list, base_level, acc);
    }
}

/// Prefix length for sharding: fixed by the alphabet size alone so that the
/// summation order never depends on the thread count.
fn shard_prefix_len(k: usize, n: usize) -> usize {
    if k >= 256 {
        return 1.min(n);
    }
    let mut p = 1usize;
    let mut words = k;
    while p < n && words * k <= 65536 {
        words *= k;
        p += 1;
    }
    p
}

/// Computes [`LevelSums`] for every exponent in `s_list` in one enumeration
/// sweep over all words of length `1..=n`.
pub fn level_sums_multi(
    maps: &[AffineMap],
    s_list: &[f64],
    n: usize,
    opts: &EngineOptions,
) -> Result<Vec<LevelSums>, PressureError> {
    if maps.is_empty() {
        return Err(PressureError::EmptySystem);
    }
    if n == 0 {
        return Err(PressureError::ZeroDepth);
    }
    for &s in s_list {
        if s < 0.0 {
            return Err(PressureError::NegativeS(s));
        }
    }
    let k = maps.len();
    check_budget(k, n, opts.budget)?;
    let mats: Vec<ScaledMatrix> =
        maps.iter().map(|m| ScaledMatrix::from_matrix(&m.linear)).collect();
    let p = shard_prefix_len(k, n);
    let s_count = s_list.len();

    // sequential head: all words of length 1..=p, enumerated in lex order,
    // collecting the shard roots at depth p
    let mut head = ShardAcc::new(s_count, p);
    let mut shards: Vec<ScaledMatrix> = Vec::new();
    let mut stack: Vec<(ScaledMatrix, usize)> = Vec::new();
    for m in mats.iter().rev() {
        stack.push((m.clone(), 1));
    }
    while let Some((prod, depth)) = stack.pop() {
        record(&prod, s_list, depth, 1, &mut head);
        if depth == p {
            if n > p && prod.log_scale != f64::NEG_INFINITY {
                shards.push(prod);
            }
            continue;
        }
        for m in mats.iter().rev() {
            stack.push((prod.mul(m), depth + 1));
        }
    }

    // parallel tail: depths p+1..=n below each shard root, merged in shard order
    let shard_results: Vec<ShardAcc> = shards
        .par_iter()
        .map(|root| {
            let mut acc = ShardAcc::new(s_count, n - p);
            for m in &mats {
                let child = root.mul(m);
                dfs(&mats, &child, p + 1, n, s_list, p + 1, &mut acc);
            }
            acc
        })
        .collect();

    let mut out = Vec::with_capacity(s_count);
    for (si, &s) in s_list.iter().enumerate() {
        let mut log_z = vec![f64::NEG_INFINITY; n];
        let mut log_low = vec![f64::NEG_INFINITY; n];
        let mut z_acc: Vec<LogSumAcc> = vec![LogSumAcc::new(); n];
        let mut low_acc: Vec<LogSumAcc> = vec![LogSumAcc::new(); n];
        for off in 0..p {
            z_acc[off] = head.z[si][off];
            low_acc[off] = head.low[si][off];
        }
        for sr in &shard_results {
            for off in 0..n - p {
                z_acc[p + off].merge(&sr.z[si][off]);
                low_acc[p + off].merge(&sr.low[si][off]);
            }
        }
        for m in 0..n {
            log_z[m] = z_acc[m].log_total();
            log_low[m] = low_acc[m].log_total();
        }
        let underflow =
            head.underflow + shard_results.iter().map(|s| s.underflow).sum::<u64>();
        out.push(LevelSums { s, n, alphabet: k, log_z, log_low, underflow_words: underflow });
    }
    Ok(out)
}

pub fn level_sums(
    maps: &[AffineMap],
    s: f64,
    n: usize,
    opts: &EngineOptions,
) -> Result<LevelSums, PressureError> {
    Ok(level_sums_multi(maps, &[s], n, opts)?.pop().unwrap())
}

/// A pressure-like value that may be certified infinite.
#[derive(Debug, Clone, Copy)]
pub enum PressureValue {
    Finite(f64),
    /// Certified `+∞`, with the divergence witness that fired.
    Infinite(DivergenceWitness),
}

impl PressureValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            PressureValue::Finite(v) => Some(*v),
            PressureValue::Infinite(_) => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, PressureValue::Infinite(_))
    }
}

#[derive(Debug, Clone)]
pub struct PartitionSum {
    pub s: f64,
    pub n: usize,
    /// Truncation size (alphabet size for finite systems).
    pub trunc: usize,
    /// `log Z_n` over the truncated alphabet.
    pub log_value: PressureValue,
    /// Certified bound on `Z_n(I) − Z_n(J_N)` in log scale; `None` when no
    /// tail oracle applies at this `s`.
    pub log_tail_bound: Option<f64>,
}

/// Bounds the truncation error of `Z_n` by splitting each word at its first
/// tail letter:
/// `Z_n(I) ≤ Z_n(J_N) + Σ_{m=1}^n Z_{m-1}(J_N) · T_N · U^{n-m}`,
/// with `T_N = tail_phi_upper(s, N)` and `U = Z_1(J_N) + T_N`.
fn log_tail_correction(log_z: &[f64], n: usize, log_t: f64) -> f64 {
    let log_u = log_add(log_z[0], log_t);
    let mut acc = LogSumAcc::new();
    for m in 1..=n {
        let log_zm1 = if m == 1 { 0.0 } else { log_z[m - 2] };
        acc.push(log_zm1 + log_t + (n - m) as f64 * log_u);
    }
    acc.log_total()
}

/// `Z_n(s)` over the truncation `J_N` (all maps for finite systems), with a
/// certified tail bound for countable systems.
pub fn partition_sum(
    system: &SystemSpec,
    s: f64,
    n: usize,
    trunc: usize,
    opts: &EngineOptions,
) -> Result<PartitionSum, PressureError> {
    let countable = !system.is_finite();
    if let Some(w) = system.divergence_witness(s, DIVERGENCE_TARGET) {
        return Ok(PartitionSum {
            s,
            n,
            trunc,
            log_value: PressureValue::Infinite(w),
            log_tail_bound: None,
        });
    }
    let maps = system.materialize(trunc);
    let sums = level_sums(&maps, s, n, opts)?;
    let log_tail_bound = if countable {
        system.tail_phi_upper(s, trunc).map(|t| log_tail_correction(&sums.log_z, n, t.ln()))
    } else {
        Some(f64::NEG_INFINITY)
    };
    Ok(PartitionSum {
        s,
        n,
        trunc,
        log_value: PressureValue::Finite(sums.log_z[n - 1]),
        log_tail_bound,
    })
}

/// Quasi-multiplicativity data consumed by the certificate lower route:
/// `Φ(i)Φ(j) ≤ K·max_{k∈F} Φ(ikj)` with `F` of words of length ≤ `t`,
/// so `log(K̂(s)^{-1} Z_n)` is superadditive for `K̂(s) = K·Σ_{k≤t} Z_k(s)`.
#[derive(Debug, Clone)]
pub struct QmCertificateRef {
    pub log_k: f64,
    pub t: usize,
    pub id: Option<String>,
}

/// Certified two-sided pressure estimate at one exponent.
#[derive(Debug, Clone)]
pub struct PressureBracket {
    pub s: f64,
    /// Deepest level enumerated.
    pub n: usize,
    /// Truncation used (`None` for finite systems).
    pub trunc: Option<usize>,
    /// Certified upper bound: `min_m (1/m) log(Z_m + tail corr)`.
    pub upper: f64,
    pub lower_certified: Option<f64>,
    /// Aitken-extrapolated `(1/m) log Z_m`; never used for certification.
    pub lower_heuristic: f64,
    /// Tail correction entering the upper bound at the minimizing level.
    pub tail_term: f64,
    pub certificate_ref: Option<String>,
    /// Closed-form multiplicative oracle participated in the bounds.
    pub oracle_used: bool,
    /// No finite certified upper bound at this `s` (near-threshold regime).
    pub threshold_warning: bool,
    pub underflow_words: u64,
}

impl PressureBracket {
    pub fn width(&self) -> f64 {
        match self.lower_certified {
            Some(l) => self.upper - l,
            None => f64::INFINITY,
        }
    }

    pub fn midpoint(&self) -> f64 {
        match self.lower_certified {
            Some(l) if self.upper.is_finite() => 0.5 * (self.upper + l),
            _ => self.upper,
        }
    }
}

fn aitken(seq: &[f64]) -> f64 {
    let k = seq.len();
    if k < 3 {
        return *seq.last().unwrap();
    }
    let (x0, x1, x2) = (seq[k - 3], seq[k - 2], seq[k - 1]);
    let d1 = x1 - x0;
    let d2 = x2 - x1;
    let dd = d2 - d1;
    if dd.abs() < 1e-14 * (d1.abs() + d2.abs()).max(1e-300) {
        return x2;
    }
    x2 - d2 * d2 / dd
}

/// Certified pressure bracket via enumeration to depth `n_max` over the
/// truncation `trunc`, optionally sharpened by a quasi-multiplicativity
/// certificate and (for multiplicative systems) the closed-form oracle.
/// The `Err` side of the inner result carries a certified-divergence witness
/// (`P(A,s) = +∞`, i.e. `s` outside the finiteness region).
pub fn pressure_bracket(
    system: &SystemSpec,
    s: f64,
    n_max: usize,
    trunc: usize,
    certificate: Option<&QmCertificateRef>,
    opts: &EngineOptions,
) -> Result<Result<PressureBracket, DivergenceWitness>, PressureError> {
    pressure_bracket_impl(system, s, n_max, trunc, certificate, opts)
}

fn pressure_bracket_impl(
    system: &SystemSpec,
    s: f64,
    n_max: usize,
    trunc: usize,
    certificate: Option<&QmCertificateRef>,
    opts: &EngineOptions,
) -> Result<Result<PressureBracket, DivergenceWitness>, PressureError> {
    if s < 0.0 {
        return Err(PressureError::NegativeS(s));
    }
    let countable = !system.is_finite();
    if let Some(w) = system.divergence_witness(s, DIVERGENCE_TARGET) {
        return Ok(Err(w));
    }
    let k = system.alphabet_len(trunc);
    if k == 0 {
        return Err(PressureError::EmptySystem);
    }
    let n = n_max.min(suggested_depth(k, opts.budget)).max(1);
    check_budget(k, n, opts.budget)?;
    let maps = system.materialize(trunc);
    let sums = level_sums(&maps, s, n, opts)?;

    let log_t = if countable { system.tail_phi_upper(s, trunc).map(|t| t.ln()) } else { None };
    let threshold_warning = countable && log_t.is_none();

    // upper bound: min over levels of the tail-corrected normalized log-sum
    let mut upper = f64::INFINITY;
    let mut tail_term = 0.0;
    let mut corrected = Vec::with_capacity(n);
    for m in 1..=n {
        let (log_zc, tail) = match (countable, log_t) {
            (false, _) => (sums.log_z[m - 1], 0.0),
            (true, Some(lt)) => {
                let corr = log_tail_correction(&sums.log_z, m, lt);
                (log_add(sums.log_z[m - 1], corr), corr.exp())
            }
            (true, None) => (f64::INFINITY, f64::INFINITY),
        };
        corrected.push(log_zc);
        let cand = log_zc / m as f64;
        if cand < upper {
            upper = cand;
            tail_term = tail;
        }
    }

    // certified lower (a): the σ_d-companion sums are supermultiplicative,
    // so every level gives a valid lower bound
    let mut lower: Option<f64> = None;
    for m in 1..=n {
        let cand = sums.log_low[m - 1] / m as f64;
        if cand > f64::NEG_INFINITY && lower.map_or(true, |l| cand > l) {
            lower = Some(cand);
        }
    }

    // certified lower (b): superadditivity of log(K̂(s)^{-1} Z_m); K̂ must be
    // evaluated with a tail-corrected (upper) estimate of its level sums
    let mut certificate_ref = None;
    if let Some(cert) = certificate {
        if cert.t <= n {
            let mut log_khat = LogSumAcc::new();
            let mut ok = true;
            for kk in 1..=cert.t {
                if corrected[kk - 1].is_finite() {
                    log_khat.push(corrected[kk - 1]);
                } else {
                    ok = false;
                }
            }
            if ok {
                let log_khat = cert.log_k + log_khat.log_total();
                for m in 1..=n {
                    let cand = (sums.log_z[m - 1] - log_khat) / m as f64;
                    if lower.map_or(true, |l| cand > l) {
                        lower = Some(cand);
                        certificate_ref = cert.id.clone();
                    }
                }
            }
        }
    }

    // closed-form oracle for multiplicative systems
    let mut oracle_used = false;
    if opts.use_oracle && system.multiplicative {
        let (olo, ohi) = if countable {
            match log_t {
                Some(lt) => {
                    let partial = sums.log_z[0];
                    let lo = log_add(partial, system.tail_phi_lower(s, trunc).ln());
                    (lo, log_add(partial, lt))
                }
                None => (f64::NEG_INFINITY, f64::INFINITY),
            }
        } else {
            let p = system.multiplicative_pressure(s, trunc)?;
            let slack = 1e-13 * p.abs().max(1.0);
            (p - slack, p + slack)
        };
        if ohi < upper {
            upper = ohi;
            tail_term = 0.0;
            oracle_used = true;
        }
        if olo.is_finite() && lower.map_or(true, |l| olo > l) {
            lower = Some(olo);
            oracle_used = true;
        }
    }

    // absorb floating round-off so closed-form values stay strictly inside
    let slack = 1e-12 * upper.abs().max(1.0);
    if upper.is_finite() {
        upper += slack;
    }
    lower = lower.map(|l| l - slack);

    let heuristic_seq: Vec<f64> = (1..=n)
        .map(|m| {
            let base = if corrected[m - 1].is_finite() { corrected[m - 1] } else { sums.log_z[m - 1] };
            base / m as f64
        })
        .collect();
    let lower_heuristic = aitken(&heuristic_seq);

    Ok(Ok(PressureBracket {
        s,
        n,
        trunc: if countable { Some(trunc) } else { None },
        upper,
        lower_certified: lower,
        lower_heuristic,
        tail_term,
        certificate_ref,
        oracle_used,
        threshold_warning,
        underflow_words: sums.underflow_words,
    }))
}

/// Finiteness-threshold interval by bisection: `s` is above `θ` when a tail
/// oracle certifies `Σ φ^s(A_i) < ∞`, below when a divergence witness fires.
pub fn theta_estimate(system: &SystemSpec, tol: f64) -> Result<(f64, f64), PressureError> {
    if system.is_finite() {
        return Ok((0.0, 0.0));
    }
    let d = system.dim as f64;
    let classify = |s: f64| -> Option<bool> {
        for n in [100usize, 10_000, 1_000_000] {
            if system.tail_phi_upper(s, n).is_some() {
                return Some(true);
            }
        }
        if system.divergence_witness(s, DIVERGENCE_TARGET).is_some() {
            return Some(false);
        }
        None
    };
    if classify(d) != Some(true) {
        return Err(PressureError::MissingOracle("a tail oracle finite at s = d"));
    }
    let (mut lo, mut hi) = (0.0f64, d);
    if classify(0.0) == Some(true) {
        return Ok((0.0, 0.0));
    }
    // target half the requested width so the interval hugs the threshold
    let target = 0.5 * tol;
    while hi - lo > target {
        let mid = 0.5 * (lo + hi);
        match classify(mid) {
            Some(true) => hi = mid,
            Some(false) => lo = mid,
            None => {
                // boundary-exact query: nudge within the interval
                let mid2 = mid + (hi - lo) * 0.01;
                match classify(mid2) {
                    Some(true) => hi = mid2,
                    Some(false) => lo = mid2,
                    None => break,
                }
            }
        }
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone)]
pub struct ShapePoint {
    pub s: f64,
    pub bracket: Result<PressureBracket, DivergenceWitness>,
}

#[derive(Debug, Clone)]
pub struct ShapeReport {
    pub points: Vec<ShapePoint>,
    /// `κ = −log sup ‖A_i‖`; the pressure must decrease at least this fast.
    pub kappa: f64,
    pub monotonicity_ok: bool,
    pub convexity_ok: bool,
    pub violations: Vec<String>,
}

/// Monotonicity and panel-convexity diagnostics of the upper pressure
/// estimates over `s_grid` (one enumeration sweep for the whole grid).
pub fn shape_diagnostics(
    system: &SystemSpec,
    s_grid: &[f64],
    n: usize,
    trunc: usize,
    opts: &EngineOptions,
) -> Result<ShapeReport, PressureError> {
    let mut points = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        points.push(ShapePoint {
            s,
            bracket: pressure_bracket(system, s, n, trunc, None, opts)?,
        });
    }
    let kappa = -system.contraction_bound.ln();
    let mut violations = Vec::new();
    let mut monotonicity_ok = true;
    let mut convexity_ok = true;
    let finite: Vec<(f64, &PressureBracket)> = points
        .iter()
        .filter_map(|p| p.bracket.as_ref().ok().map(|b| (p.s, b)))
        .collect();
    for w in finite.windows(2) {
        let ((s0, b0), (s1, b1)) = (w[0], w[1]);
        let ds = s1 - s0;
        let w0 = if b0.width().is_finite() { b0.width() } else { 0.0 };
        let w1 = if b1.width().is_finite() { b1.width() } else { 0.0 };
        // P(s+t) ≤ P(s) − κ t, up to the bracket widths of both estimates
        if b1.upper > b0.upper - kappa * ds + w0 + w1 + 1e-9 {
            monotonicity_ok = false;
            violations.push(format!(
                "decay slower than kappa on [{s0:.4},{s1:.4}]: {} -> {}",
                b0.upper, b1.upper
            ));
        }
    }
    for w in finite.windows(3) {
        let ((s0, b0), (s1, b1), (s2, b2)) = (w[0], w[1], w[2]);
        // convexity holds within integer panels [k, k+1]
        if s0.floor() != s2.ceil() - 1.0 && s0.floor() != s2.floor() {
            continue;
        }
        let lam = (s1 - s0) / (s2 - s0);
        let chord = (1.0 - lam) * b0.upper + lam * b2.upper;
        let slack = [b0, b1, b2]
            .iter()
            .map(|b| if b.width().is_finite() { b.width() } else { 0.0 })
            .sum::<f64>()
            + 1e-9;
        if b1.upper > chord + slack {
            convexity_ok = false;
            violations.push(format!(
                "convexity violation at s = {s1:.4}: {} above chord {}",
                b1.upper, chord
            ));
        }
    }
    Ok(ShapeReport { points, kappa, monotonicity_ok, convexity_ok, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::systems::{
        diagonal_family, no_equilibrium_family, pathology_family, similarity_family, AffineMap,
        PathologyMode,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts() -> EngineOptions {
        EngineOptions::default()
    }

    fn no_oracle() -> EngineOptions {
        EngineOptions { use_oracle: false, ..EngineOptions::default() }
    }

    fn random_system(rng: &mut ChaCha8Rng, d: usize, m: usize) -> SystemSpec {
        let mut maps = Vec::new();
        while maps.len() < m {
            let data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mat = Matrix::new(d, data).unwrap();
            let norm = mat.op_norm();
            if norm < 1e-3 {
                continue;
            }
            let scaled = mat.scale(rng.gen_range(0.2..0.9) / norm);
            if scaled.check_invertible().is_err() {
                continue;
            }
            maps.push(AffineMap::linear_only(scaled));
        }
        SystemSpec::from_maps(d, maps, "random").unwrap()
    }

    #[test]
    fn log_sum_acc_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..200).map(|_| rng.gen_range(-700.0..10.0)).collect();
            let mut acc = LogSumAcc::new();
            for &v in &vals {
                acc.push(v);
            }
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let naive = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            assert!((acc.log_total() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_sum_conformal_closed_form() {
        // two similarities ratio 1/3, s = 1, n = 4: Z_4 = 2^4 (1/3)^4 = (2/3)^4
        let sys = similarity_family(&[1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let ps = partition_sum(&sys, 1.0, 4, 0, &opts()).unwrap();
        let got = ps.log_value.finite().unwrap();
        let want = 4.0 * (2.0f64 / 3.0).ln();
        assert!((got - want).abs() < 1e-12);
        assert!(((2.0f64 / 3.0).powi(4) - 0.19753).abs() < 1e-4);
    }

    #[test]
    fn partition_sum_sorted_diagonal_closed_form() {
        // three copies of diag(1/2,1/4), s = 1.5, n = 3: Z_3 = 0.75^3
        let sys = diagonal_family(&[vec![0.5, 0.25], vec![0.5, 0.25], vec![0.5, 0.25]]).unwrap();
        let ps = partition_sum(&sys, 1.5, 3, 0, &opts()).unwrap();
        let got = ps.log_value.finite().unwrap().exp();
        assert!((got - 0.421875).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn partition_sum_pathology_tail() {
        let sys = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let ps = partition_sum(&sys, 0.9, 1, 10_000, &opts()).unwrap();
        assert!(ps.log_value.finite().is_some());
        // tail decays like N^{1-s/gamma} = N^{-0.2}: ~0.16 at N = 10^4
        let tail = ps.log_tail_bound.unwrap().exp();
        assert!(tail < 0.2, "tail bound {tail}");
        let far = partition_sum(&sys, 2.0, 1, 10_000, &opts()).unwrap();
        assert!(far.log_tail_bound.unwrap().exp() < 1e-3);
    }

    #[test]
    fn partition_sum_divergent_flag() {
        let sys = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let ps = partition_sum(&sys, 0.6, 1, 1000, &opts()).unwrap();
        assert!(ps.log_value.is_infinite());
    }

    #[test]
    fn budget_error_suggests_depth() {
        let sys = random_system(&mut ChaCha8Rng::seed_from_u64(2), 2, 10);
        let opts = EngineOptions { budget: 1e4, ..EngineOptions::default() };
        match level_sums(&sys.materialize(0), 1.0, 8, &opts) {
            Err(PressureError::Budget { suggested_n, .. }) => assert_eq!(suggested_n, 3),
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn level_sums_submultiplicative_supermultiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let sys = random_system(&mut rng, 3, 3);
            let maps = sys.materialize(0);
            for &s in &[0.7, 1.4, 2.5] {
                let sums = level_sums(&maps, s, 6, &opts()).unwrap();
                for n in 1..=5usize {
                    for m in 1..=(6 - n) {
                        let lhs = sums.log_z[n + m - 1];
                        let rhs = sums.log_z[n - 1] + sums.log_z[m - 1];
                        assert!(lhs <= rhs + 1e-9, "submultiplicativity fail n={n} m={m}");
                    }
                }
                for n in 1..6usize {
                    // Z_{n+1} ≥ Z_n · Σ σ_d(A_i)^s
                    let lhs = sums.log_z[n];
                    let rhs = sums.log_z[n - 1] + sums.log_low[0];
                    assert!(lhs >= rhs - 1e-9, "supermultiplicativity fail n={n}");
                }
            }
        }
    }

    #[test]
    fn upper_estimates_non_increasing_and_bracket_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let sys = random_system(&mut rng, 2, 3);
            for &s in &[0.5, 1.3] {
                let b = pressure_bracket(&sys, s, 8, 0, None, &no_oracle())
                    .unwrap()
                    .unwrap();
                let lower = b.lower_certified.unwrap();
                assert!(lower <= b.upper + 1e-9, "bracket inverted: [{lower},{}]", b.upper);
                let maps = sys.materialize(0);
                let sums = level_sums(&maps, s, 8, &opts()).unwrap();
                // min over levels equals the last refinement within tolerance
                let levels: Vec<f64> =
                    (1..=8).map(|m| sums.log_z[m - 1] / m as f64).collect();
                let min = levels.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!((b.upper - min).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bracket_conformal_exact_at_dimension() {
        let sys = similarity_family(&[1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let s = 2.0f64.ln() / 3.0f64.ln();
        let b = pressure_bracket(&sys, s, 1, 0, None, &opts()).unwrap().unwrap();
        assert!(b.upper >= 0.0 && b.lower_certified.unwrap() <= 0.0);
        assert!(b.width() < 1e-10);
    }

    #[test]
    fn bracket_diagonal_contains_closed_form() {
        let sys = diagonal_family(&[vec![0.5, 0.25], vec![0.5, 0.25], vec![0.5, 0.25]]).unwrap();
        let s = 1.2925;
        let want = 3.0f64.ln() - 2.0f64.ln() - 0.2925 * 4.0f64.ln();
        let b = pressure_bracket(&sys, s, 6, 0, None, &opts()).unwrap().unwrap();
        assert!(b.lower_certified.unwrap() <= want && want <= b.upper);
        assert!(b.oracle_used);
        assert!(b.width() < 1e-9);
        // engine-only answer must agree without the oracle
        let b2 = pressure_bracket(&sys, s, 6, 0, None, &no_oracle()).unwrap().unwrap();
        assert!(b2.lower_certified.unwrap() <= want + 1e-12 && want <= b2.upper + 1e-12);
    }

    #[test]
    fn bracket_pathology_divergent_below_gamma() {
        let sys = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let r = pressure_bracket(&sys, 0.6, 2, 500, None, &opts()).unwrap();
        assert!(r.is_err(), "expected +inf flag below gamma");
    }

    #[test]
    fn bracket_no_equilibrium_zero_at_one() {
        // P(1) = log Σ a_n = log 1 = 0
        let sys = no_equilibrium_family();
        let b = pressure_bracket(&sys, 1.0, 1, 1_000_000, None, &opts())
            .unwrap()
            .unwrap();
        assert!(b.lower_certified.unwrap() <= 0.0 && 0.0 <= b.upper);
        assert!(b.width() < 1e-6, "width {}", b.width());
    }

    #[test]
    fn conjugation_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, 2, 3);
        let maps = sys.materialize(0);
        let x = Matrix::from_rows(&[&[1.0, 0.7], &[-0.3, 1.1]]).unwrap();
        let xinv = x.inverse().unwrap();
        let conj: Vec<AffineMap> = maps
            .iter()
            .map(|m| AffineMap::linear_only(xinv.mul(&m.linear).mul(&x)))
            .collect();
        let s = 1.1;
        let n = 7;
        let a = level_sums(&maps, s, n, &opts()).unwrap();
        let b = level_sums(&conj, s, n, &opts()).unwrap();
        let allowance = s * (x.op_norm() * xinv.op_norm()).ln();
        for m in 1..=n {
            let da = a.log_z[m - 1] / m as f64;
            let db = b.log_z[m - 1] / m as f64;
            assert!((da - db).abs() <= allowance / m as f64 + 1e-9, "level {m}");
        }
    }

    #[test]
    fn truncation_monotonicity() {
        let sys = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let s = 0.9;
        let mut prev_upper = f64::INFINITY;
        let mut prev_lower = f64::NEG_INFINITY;
        for trunc in [50usize, 200, 1000, 5000] {
            let b = pressure_bracket(&sys, s, 2, trunc, None, &opts()).unwrap().unwrap();
            assert!(b.upper <= prev_upper + 1e-9, "upper not monotone at N={trunc}");
            let l = b.lower_certified.unwrap();
            assert!(l >= prev_lower - 1e-9, "lower not monotone at N={trunc}");
            prev_upper = b.upper;
            prev_lower = l;
        }
    }

    #[test]
    fn theta_intervals() {
        let sys = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let (lo, hi) = theta_estimate(&sys, 0.02).unwrap();
        assert!(lo >= 0.74 - 1e-9 && hi <= 0.76 + 1e-9, "interval [{lo},{hi}]");
        assert!(lo <= 0.75 && 0.75 <= hi);

        let sys = no_equilibrium_family();
        let (lo, hi) = theta_estimate(&sys, 0.02).unwrap();
        assert!(lo >= 0.98 && hi <= 1.02, "interval [{lo},{hi}]");

        let fin = similarity_family(&[0.5]).unwrap();
        assert_eq!(theta_estimate(&fin, 0.01).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn shape_similarity_linear() {
        let sys = similarity_family(&[1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let rep = shape_diagnostics(&sys, &grid, 4, 0, &opts()).unwrap();
        assert!(rep.monotonicity_ok && rep.convexity_ok, "{:?}", rep.violations);
        let slope = (rep.points[10].bracket.as_ref().unwrap().upper
            - rep.points[0].bracket.as_ref().unwrap().upper)
            / 1.0;
        assert!((slope + 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn shape_diagonal_kink_at_one() {
        let sys = diagonal_family(&[vec![0.5, 0.25], vec![0.5, 0.25], vec![0.5, 0.25]]).unwrap();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let rep = shape_diagnostics(&sys, &grid, 6, 0, &opts()).unwrap();
        assert!(rep.monotonicity_ok && rep.convexity_ok, "{:?}", rep.violations);
        // piecewise linear: slope −log2 below s=1, −log4 above
        let up = |i: usize| rep.points[i].bracket.as_ref().unwrap().upper;
        let slope_low = (up(10) - up(0)) / 1.0;
        let slope_high = (up(20) - up(10)) / 1.0;
        assert!((slope_low + 2.0f64.ln()).abs() < 1e-9, "low slope {slope_low}");
        assert!((slope_high + 4.0f64.ln()).abs() < 1e-9, "high slope {slope_high}");
    }

    #[test]
    fn shape_random_no_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = random_system(&mut rng, 2, 3);
        let grid: Vec<f64> = (0..=20).map(|i| 0.5 + i as f64 * 0.05).collect();
        let rep = shape_diagnostics(&sys, &grid, 10, 0, &opts()).unwrap();
        assert!(rep.convexity_ok, "{:?}", rep.violations);
    }

    #[test]
    fn determinism_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = random_system(&mut rng, 2, 3);
        let maps = sys.materialize(0);
        let run = |threads: usize| -> Vec<f64> {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| level_sums(&maps, 1.2, 10, &opts()).unwrap().log_z)
        };
        let a = run(1);
        let b = run(4);
        let c = run(8);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn certificate_route_tightens_conformal_lower() {
        // conformal system: Φ(i)Φ(j) = Φ(ij) ≤ K max_k Φ(ikj) with
        // K = 1/min_i Φ(i) and F the one-letter words
        let sys = similarity_family(&[0.5, 0.25]).unwrap();
        let s = 0.9;
        let log_k = -(0.25f64.ln() * s);
        let cert = QmCertificateRef { log_k, t: 1, id: Some("conformal".into()) };
        let b = pressure_bracket(&sys, s, 6, 0, Some(&cert), &no_oracle())
            .unwrap()
            .unwrap();
        let b0 = pressure_bracket(&sys, s, 6, 0, None, &no_oracle()).unwrap().unwrap();
        assert!(b.lower_certified.unwrap() >= b0.lower_certified.unwrap() - 1e-12);
        let exact = (0.5f64.powf(s) + 0.25f64.powf(s)).ln();
        assert!(b.lower_certified.unwrap() <= exact + 1e-12);
        assert!(exact <= b.upper + 1e-12);
    }

    #[test]
    fn aitken_accelerates_geometric() {
        // a_m = L + c r^m has exact Aitken limit L
        let seq: Vec<f64> = (1..=6).map(|m| 2.0 + 0.3 * 0.5f64.powi(m)).collect();
        assert!((aitken(&seq) - 2.0).abs() < 1e-12);
    }
}
