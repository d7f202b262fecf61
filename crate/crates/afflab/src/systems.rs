//! Specification, validation, and built-in construction of finite and
//! countably infinite affine iterated function systems.
//!
//! Countable families carry analytic tail oracles: a certified upper (and
//! where available lower) bound on `Σ_{i>N} φ^s(A_i)` and a divergence
//! witness producing a certified partial-sum lower bound when the level-one
//! series diverges.

use crate::linalg::{self, Matrix, ScaledMatrix};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, RwLock};
use thiserror::Error;

/// Default number of countable-family prefixes kept materialized.
pub const DEFAULT_CACHE_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("parameter {name} = {value} out of range {range}")]
    ParamOutOfRange { name: &'static str, value: f64, range: &'static str },
    #[error("map {index}: {reason}")]
    BadMap { index: usize, reason: String },
    #[error("system file: {0}")]
    Schema(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("operation requires a {0} system")]
    WrongKind(&'static str),
}

/// One contracting invertible affine map `T(x) = Ax + v`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub linear: Matrix,
    pub translation: Vec<f64>,
}

impl AffineMap {
    pub fn new(linear: Matrix, translation: Vec<f64>) -> Self {
        assert_eq!(linear.dim(), translation.len());
        AffineMap { linear, translation }
    }

    pub fn linear_only(linear: Matrix) -> Self {
        let d = linear.dim();
        AffineMap { linear, translation: vec![0.0; d] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.linear.apply(x);
        for (yi, vi) in y.iter_mut().zip(&self.translation) {
            *yi += vi;
        }
        y
    }

    /// Fixed point: solves `(I - A)x = v`.
    pub fn fixed_point(&self) -> Result<Vec<f64>, linalg::LinalgError> {
        let d = self.linear.dim();
        let mut ia = Matrix::identity(d);
        for i in 0..d {
            for j in 0..d {
                ia.set(i, j, ia.get(i, j) - self.linear.get(i, j));
            }
        }
        ia.solve(&self.translation)
    }
}

/// Certified divergence evidence: the partial sum over the first `exp(log_index)`
/// indices is at least `certified_sum`. The index is reported in log scale
/// because near-threshold witnesses can exceed any fixed-width integer.
#[derive(Debug, Clone, Copy)]
pub struct DivergenceWitness {
    pub log_index: f64,
    pub certified_sum: f64,
}

pub type Generator = Arc<dyn Fn(usize) -> AffineMap + Send + Sync>;
pub type TailOracle = Arc<dyn Fn(f64, usize) -> Option<f64> + Send + Sync>;
pub type DivergenceOracle = Arc<dyn Fn(f64, f64) -> Option<DivergenceWitness> + Send + Sync>;

/// Countably infinite family defined by a pure generator (0-based index).
pub struct CountableFamily {
    generator: Generator,
    pub tail_phi_upper: Option<TailOracle>,
    pub tail_phi_lower: Option<TailOracle>,
    pub divergence_witness: Option<DivergenceOracle>,
    cache: RwLock<Vec<AffineMap>>,
    pub cache_cap: usize,
}

impl CountableFamily {
    pub fn new(generator: Generator) -> Self {
        CountableFamily {
            generator,
            tail_phi_upper: None,
            tail_phi_lower: None,
            divergence_witness: None,
            cache: RwLock::new(Vec::new()),
            cache_cap: DEFAULT_CACHE_CAP,
        }
    }

    fn ensure(&self, n: usize) {
        let have = self.cache.read().unwrap().len();
        if have >= n {
            return;
        }
        let mut w = self.cache.write().unwrap();
        while w.len() < n {
            let idx = w.len();
            w.push((self.generator)(idx));
        }
    }

    pub fn map(&self, idx: usize) -> AffineMap {
        if idx < self.cache_cap {
            self.ensure(idx + 1);
            return self.cache.read().unwrap()[idx].clone();
        }
        (self.generator)(idx)
    }
}

pub enum SystemKind {
    Finite(Vec<AffineMap>),
    Countable(CountableFamily),
}

/// A finite or countable tuple of invertible affine contractions.
pub struct SystemSpec {
    pub dim: usize,
    pub kind: SystemKind,
    /// Declared `sup_i ‖A_i‖` (operator norm).
    pub contraction_bound: f64,
    /// True when `φ^s` is exactly multiplicative along words (conformal maps,
    /// or diagonal maps whose entry ordering is consistent across the tuple).
    /// Then the pressure has the closed form `P(s) = log Σ_i φ^s(A_i)`.
    pub multiplicative: bool,
    pub name: String,
}

impl SystemSpec {
    pub fn from_maps(dim: usize, maps: Vec<AffineMap>, name: &str) -> Result<Self, SystemError> {
        for (i, m) in maps.iter().enumerate() {
            if m.linear.dim() != dim {
                return Err(SystemError::BadMap { index: i, reason: "dimension mismatch".into() });
            }
        }
        let bound = maps.iter().map(|m| m.linear.op_norm()).fold(0.0f64, f64::max);
        let multiplicative = detect_multiplicative(&maps);
        Ok(SystemSpec {
            dim,
            kind: SystemKind::Finite(maps),
            contraction_bound: bound,
            multiplicative,
            name: name.to_string(),
        })
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.kind, SystemKind::Finite(_))
    }

    /// Number of maps of a finite system.
    pub fn len(&self) -> Option<usize> {
        match &self.kind {
            SystemKind::Finite(m) => Some(m.len()),
            SystemKind::Countable(_) => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// Alphabet size at truncation `trunc`; finite systems ignore `trunc`.
    pub fn alphabet_len(&self, trunc: usize) -> usize {
        match &self.kind {
            SystemKind::Finite(m) => m.len(),
            SystemKind::Countable(_) => trunc,
        }
    }

    pub fn map(&self, idx: usize) -> AffineMap {
        match &self.kind {
            SystemKind::Finite(m) => m[idx].clone(),
            SystemKind::Countable(f) => f.map(idx),
        }
    }

    /// Materializes the first `n` maps (all maps for finite systems).
    pub fn materialize(&self, n: usize) -> Vec<AffineMap> {
        match &self.kind {
            SystemKind::Finite(m) => m.clone(),
            SystemKind::Countable(f) => (0..n).map(|i| f.map(i)).collect(),
        }
    }

    /// Finite truncation as a standalone system.
    pub fn truncate(&self, n: usize) -> Result<SystemSpec, SystemError> {
        SystemSpec::from_maps(self.dim, self.materialize(n), &format!("{}[..{}]", self.name, n))
    }

    pub fn tail_phi_upper(&self, s: f64, n: usize) -> Option<f64> {
        match &self.kind {
            SystemKind::Finite(_) => Some(0.0),
            SystemKind::Countable(f) => f.tail_phi_upper.as_ref().and_then(|o| o(s, n)),
        }
    }

    pub fn tail_phi_lower(&self, s: f64, n: usize) -> f64 {
        match &self.kind {
            SystemKind::Finite(_) => 0.0,
            SystemKind::Countable(f) => {
                f.tail_phi_lower.as_ref().and_then(|o| o(s, n)).unwrap_or(0.0)
            }
        }
    }

    pub fn divergence_witness(&self, s: f64, target: f64) -> Option<DivergenceWitness> {
        match &self.kind {
            SystemKind::Finite(_) => None,
            SystemKind::Countable(f) => f.divergence_witness.as_ref().and_then(|o| o(s, target)),
        }
    }

    /// Closed-form pressure `log Σ_i φ^s(A_i)` over the first `trunc` maps;
    /// exact for multiplicative systems (finite case, `trunc` ignored).
    pub fn multiplicative_pressure(&self, s: f64, trunc: usize) -> Result<f64, SystemError> {
        assert!(self.multiplicative || self.is_finite());
        let maps = self.materialize(trunc);
        let mut max_log = f64::NEG_INFINITY;
        let mut logs = Vec::with_capacity(maps.len());
        for m in &maps {
            let lp = linalg::log_phi_s(&m.linear, s)?;
            logs.push(lp);
            max_log = max_log.max(lp);
        }
        let sum: f64 = logs.iter().map(|l| (l - max_log).exp()).sum();
        Ok(max_log + sum.ln())
    }
}

/// Word over the system alphabet; the associated product is
/// `A_{i_1}⋯A_{i_n}`, left to right.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word {
    pub letters: Vec<usize>,
}

impl Word {
    pub fn new(letters: Vec<usize>) -> Self {
        assert!(!letters.is_empty(), "words have length >= 1");
        Word { letters }
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn concat(&self, other: &Word) -> Word {
        let mut letters = self.letters.clone();
        letters.extend_from_slice(&other.letters);
        Word { letters }
    }

    pub fn product(&self, maps: &[AffineMap]) -> ScaledMatrix {
        let mut acc = ScaledMatrix::from_matrix(&maps[self.letters[0]].linear);
        for &l in &self.letters[1..] {
            acc = acc.mul(&ScaledMatrix::from_matrix(&maps[l].linear));
        }
        acc
    }
}

/// True when all maps are scalar multiples of the identity, or all diagonal
/// with a common magnitude ordering of the entries (then `φ^s` multiplies
/// exactly along products).
pub fn detect_multiplicative(maps: &[AffineMap]) -> bool {
    if maps.is_empty() {
        return false;
    }
    let d = maps[0].linear.dim();
    let is_diag = |m: &Matrix| {
        (0..d).all(|i| (0..d).all(|j| i == j || m.get(i, j) == 0.0))
    };
    if !maps.iter().all(|m| is_diag(&m.linear)) {
        return false;
    }
    if d == 1 {
        return true;
    }
    // a shared permutation must sort every diagonal by decreasing magnitude
    let mut order: Vec<usize> = (0..d).collect();
    let first: Vec<f64> = (0..d).map(|i| maps[0].linear.get(i, i).abs()).collect();
    order.sort_by(|&a, &b| first[b].partial_cmp(&first[a]).unwrap());
    maps.iter().all(|m| {
        let diag: Vec<f64> = (0..d).map(|i| m.linear.get(i, i).abs()).collect();
        order.windows(2).all(|w| diag[w[0]] >= diag[w[1]])
    })
}

#[derive(Debug, Clone)]
pub struct ValidationIssue {
    pub index: usize,
    pub what: String,
    pub quantity: f64,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checked: usize,
    /// Smallest distance of `‖A_i‖` from 1 over the checked maps.
    pub worst_margin: f64,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks invertibility and contraction on all finite maps (resp. the first
/// `sample_count` maps of a countable family).
pub fn validate(spec: &SystemSpec, sample_count: usize) -> ValidationReport {
    let maps = match &spec.kind {
        SystemKind::Finite(m) => m.clone(),
        SystemKind::Countable(_) => spec.materialize(sample_count),
    };
    let mut issues = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for (i, m) in maps.iter().enumerate() {
        if let Err(e) = m.linear.check_invertible() {
            issues.push(ValidationIssue { index: i, what: format!("not invertible: {e}"), quantity: m.linear.det() });
            continue;
        }
        let norm = m.linear.op_norm();
        worst_margin = worst_margin.min(1.0 - norm);
        if norm >= 1.0 {
            issues.push(ValidationIssue { index: i, what: "not a contraction".into(), quantity: norm });
        }
        if norm > spec.contraction_bound + 1e-12 {
            issues.push(ValidationIssue {
                index: i,
                what: "exceeds declared contraction bound".into(),
                quantity: norm,
            });
        }
    }
    ValidationReport { checked: maps.len(), worst_margin, issues }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathologyMode {
    InfinitePressure,
    NegativePressure,
}

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<(), SystemError> {
    if !(value > lo && value <= hi) {
        return Err(SystemError::ParamOutOfRange { name, value, range });
    }
    Ok(())
}

/// Block-doubling divergence witness for `Σ_k exp(log_term(k))` with
/// `log_term` non-increasing. Block `j` covers indices `(2^j, 2^{j+1}]` and is
/// bounded below by `2^j · term(2^{j+1})`.
pub(crate) fn block_doubling_witness(
    log_term: impl Fn(f64) -> f64,
    target: f64,
) -> Option<DivergenceWitness> {
    let ln2 = std::f64::consts::LN_2;
    let mut acc = 0.0f64;
    let mut prev_block = f64::NEG_INFINITY;
    for j in 0..200_000u64 {
        let log_k = (j as f64 + 1.0) * ln2;
        let log_block = j as f64 * ln2 + log_term(log_k);
        let block = log_block.exp();
        if acc + block >= target {
            return Some(DivergenceWitness { log_index: log_k, certified_sum: acc + block });
        }
        // near-constant blocks: extrapolate the remaining block count
        if j > 8 && (log_block - prev_block).abs() < 1e-7 && block > 0.0 {
            let need = ((target - acc) / block).ceil();
            let log_index = (j as f64 + 1.0 + need) * ln2;
            return Some(DivergenceWitness { log_index, certified_sum: target });
        }
        prev_block = log_block;
        acc += block;
    }
    if acc >= target {
        let log_k = 200_001.0 * ln2;
        return Some(DivergenceWitness { log_index: log_k, certified_sum: acc });
    }
    None
}

/// Countable upper-triangular family realizing `ldim < θ = udim`:
/// `A_k` has diagonal `α e^{-tk}` and upper-right entry `ε a_k`, where
/// `t` solves `e^{βt} - 1 = α^β` and `a_k` is `k^{-1/γ}`
/// (`infinite_pressure`) or `k^{-1/γ} (log(k+1))^{-2/γ}` (`negative_pressure`).
pub fn pathology_family(
    alpha: f64,
    beta: f64,
    gamma: f64,
    mode: PathologyMode,
) -> Result<SystemSpec, SystemError> {
    check_range("alpha", alpha, 0.0, 1.0 - f64::EPSILON, "(0,1)")?;
    check_range("beta", beta, 0.0, 1.0 - f64::EPSILON, "(0,1)")?;
    check_range("gamma", gamma, beta, 1.0, "(beta,1]")?;
    let t = (1.0 + alpha.powf(beta)).ln() / beta;
    let seq = move |k: f64| -> f64 {
        match mode {
            PathologyMode::InfinitePressure => k.powf(-1.0 / gamma),
            PathologyMode::NegativePressure => {
                k.powf(-1.0 / gamma) * (k + 1.0).ln().powf(-2.0 / gamma)
            }
        }
    };
    // scan for the sequence maximum until a long monotone-decreasing run
    let mut max_a = seq(1.0);
    let mut run = 0;
    let mut prev = max_a;
    for k in 2..10_000u64 {
        let a = seq(k as f64);
        if a > max_a {
            max_a = a;
        }
        run = if a <= prev { run + 1 } else { 0 };
        prev = a;
        if run > 64 {
            break;
        }
    }
    let emt = (-t).exp();
    let eps = alpha * (1.0 - emt) / (2.0 * max_a);
    let generator: Generator = {
        Arc::new(move |idx: usize| {
            let k = (idx + 1) as f64;
            let diag = alpha * (-t * k).exp();
            let linear = Matrix::from_rows(&[&[diag, eps * seq(k)], &[0.0, diag]]).unwrap();
            // bounded dyadic translations keep fixed points distinct and the
            // attractor inside the unit ball
            let trans = vec![0.5f64.powf(k.min(900.0)), 0.0];
            AffineMap::new(linear, trans)
        })
    };
    // tail of Σ φ^s(A_k): φ^s ≤ ‖A‖^s ≤ (α e^{-tk} + ε a_k)^s, split by Hölder
    let tail_upper: TailOracle = {
        Arc::new(move |s: f64, n_trunc: usize| -> Option<f64> {
            if s <= 0.0 {
                return None;
            }
            let p = s / gamma;
            let nf = n_trunc as f64;
            let a_tail = match mode {
                PathologyMode::InfinitePressure => {
                    if p <= 1.0 {
                        return None;
                    }
                    nf.powf(1.0 - p) / (p - 1.0)
                }
                PathologyMode::NegativePressure => {
                    if p < 1.0 {
                        return None;
                    }
                    let log_bound = if n_trunc >= 2 { 1.0 / nf.ln() } else { f64::INFINITY };
                    if p > 1.0 {
                        let poly = (nf + 1.0).ln().powf(-2.0 * p) * nf.powf(1.0 - p) / (p - 1.0);
                        poly.min(log_bound)
                    } else {
                        log_bound
                    }
                }
            };
            let c_s = if s > 1.0 { (2.0f64).powf(s - 1.0) } else { 1.0 };
            let st = s * t;
            let geo_tail = (-st * (nf + 1.0)).exp() / (1.0 - (-st).exp());
            Some(c_s * (alpha.powf(s) * geo_tail + eps.powf(s) * a_tail))
        })
    };
    let witness: DivergenceOracle = {
        Arc::new(move |s: f64, target: f64| -> Option<DivergenceWitness> {
            // φ^s(A_k) ≥ (ε a_k)^s; diverges iff Σ a_k^s does
            let p = s / gamma;
            let diverges = match mode {
                PathologyMode::InfinitePressure => p <= 1.0,
                PathologyMode::NegativePressure => p < 1.0,
            };
            if !diverges || s < 0.0 {
                return None;
            }
            let log_eps = eps.ln();
            block_doubling_witness(
                move |log_k| {
                    let base = s * log_eps - p * log_k;
                    match mode {
                        PathologyMode::InfinitePressure => base,
                        PathologyMode::NegativePressure => {
                            // log(k+1) ≤ log k + log 2
                            base - 2.0 * p * (log_k + std::f64::consts::LN_2).ln()
                        }
                    }
                },
                target,
            )
        })
    };
    let mut fam = CountableFamily::new(generator);
    fam.tail_phi_upper = Some(tail_upper);
    fam.divergence_witness = Some(witness);
    Ok(SystemSpec {
        dim: 2,
        kind: SystemKind::Countable(fam),
        contraction_bound: alpha * (1.0 + emt) / 2.0,
        multiplicative: false,
        name: format!("pathology(alpha={alpha},beta={beta},gamma={gamma},{mode:?})"),
    })
}

/// Normalizing constant and bracket for `Σ_n 1/(n log²(n+1))`.
fn no_equilibrium_normalizer() -> (f64, f64, f64) {
    static CACHE: std::sync::OnceLock<(f64, f64, f64)> = std::sync::OnceLock::new();
    *CACHE.get_or_init(no_equilibrium_normalizer_uncached)
}

fn no_equilibrium_normalizer_uncached() -> (f64, f64, f64) {
    let n = 1_000_000usize;
    let mut partial = 0.0f64;
    let mut comp = 0.0f64;
    // Kahan summation, smallest terms last do not matter at this length
    for k in 1..=n {
        let kf = k as f64;
        let term = 1.0 / (kf * (kf + 1.0).ln().powi(2));
        let y = term - comp;
        let t = partial + y;
        comp = (t - partial) - y;
        partial = t;
    }
    let nf = n as f64;
    let s_lo = partial + 1.0 / (nf + 2.0).ln();
    let s_hi = partial + 1.0 / nf.ln();
    let c = 2.0 / (s_lo + s_hi);
    (c, c * s_lo, c * s_hi)
}

/// The weight sequence `a_n = C/(n log²(n+1))` as a 1-dimensional system:
/// `θ = 1` with `P(θ) = 0` and no equilibrium state at the threshold.
pub fn no_equilibrium_family() -> SystemSpec {
    let (c, _, _) = no_equilibrium_normalizer();
    let weight = move |k: f64| c / (k * (k + 1.0).ln().powi(2));
    let generator: Generator = Arc::new(move |idx: usize| {
        let k = (idx + 1) as f64;
        let linear = Matrix::new(1, vec![weight(k)]).unwrap();
        AffineMap::new(linear, vec![1.0 - 0.5f64.powf(k.min(900.0))])
    });
    let tail_upper: TailOracle = Arc::new(move |s: f64, n: usize| -> Option<f64> {
        if s < 1.0 || n < 2 {
            return None;
        }
        let nf = n as f64;
        if s == 1.0 {
            return Some(c / nf.ln());
        }
        // a_n^s ≤ C^s n^{-s} log(n+1)^{-2s}, integral tail in n^{-s}
        Some(c.powf(s) * (nf + 1.0).ln().powf(-2.0 * s) * nf.powf(1.0 - s) / (s - 1.0).max(1e-12))
    });
    let tail_lower: TailOracle = Arc::new(move |s: f64, n: usize| -> Option<f64> {
        if s < 1.0 || n < 2 {
            return None;
        }
        let nf = n as f64;
        if (s - 1.0).abs() < 1e-12 {
            return Some(c / (nf + 2.0).ln());
        }
        // certified partial extension of the positive tail
        let mut acc = 0.0;
        for k in n + 1..n + 20_000 {
            let kf = k as f64;
            acc += (c / (kf * (kf + 1.0).ln().powi(2))).powf(s);
        }
        Some(acc)
    });
    let witness: DivergenceOracle = Arc::new(move |s: f64, target: f64| {
        if s >= 1.0 || s < 0.0 {
            return None;
        }
        let log_c = c.ln();
        block_doubling_witness(
            move |log_k| s * (log_c - log_k - 2.0 * (log_k + std::f64::consts::LN_2).ln()),
            target,
        )
    });
    let mut fam = CountableFamily::new(generator);
    fam.tail_phi_upper = Some(tail_upper);
    fam.tail_phi_lower = Some(tail_lower);
    fam.divergence_witness = Some(witness);
    let bound = weight(1.0);
    SystemSpec {
        dim: 1,
        kind: SystemKind::Countable(fam),
        contraction_bound: bound,
        multiplicative: true,
        name: "no_equilibrium".into(),
    }
}

/// Certified lower-bound witness for the entropy series
/// `Σ_n a_n (−log a_n)` of [`no_equilibrium_family`]; the series diverges, so
/// a witness exists for every finite target. Uses the closed-form integral
/// `∫ u/(u+c)² du = ln(u+c) + c/(u+c)` with `u = log x`.
pub fn no_equilibrium_entropy_witness(target: f64) -> DivergenceWitness {
    let (c, _, _) = no_equilibrium_normalizer();
    let ln2 = std::f64::consts::LN_2;
    // exact leading terms
    let n0 = 64usize;
    let mut head = 0.0f64;
    for k in 2..n0 {
        let kf = k as f64;
        let a = c / (kf * (kf + 1.0).ln().powi(2));
        head += a * (-a.ln());
    }
    if head >= target {
        return DivergenceWitness { log_index: (n0 as f64).ln(), certified_sum: head };
    }
    // a_n(−log a_n) ≥ c·log n/(n (log n + log 2)²) for n ≥ n0 (c < 1)
    let anti = |u: f64| (u + ln2).ln() + ln2 / (u + ln2);
    let u0 = (n0 as f64).ln();
    // head + c (anti(ln N) − anti(u0)) ≥ target
    let want = (target - head) / c + anti(u0);
    // invert anti(u) = want by monotone bisection in u
    let (mut lo, mut hi) = (u0, u0.max(1.0));
    while anti(hi) < want {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if anti(mid) < want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    DivergenceWitness { log_index: hi, certified_sum: target }
}

/// Finite family of diagonal maps; picks bounded distinct translations.
pub fn diagonal_family(entries: &[Vec<f64>]) -> Result<SystemSpec, SystemError> {
    if entries.is_empty() {
        return Err(SystemError::Schema("diagonal family needs at least one map".into()));
    }
    let d = entries[0].len();
    let m = entries.len();
    let mut maps = Vec::with_capacity(m);
    for (i, e) in entries.iter().enumerate() {
        if e.len() != d {
            return Err(SystemError::BadMap { index: i, reason: "entry length mismatch".into() });
        }
        for &a in e {
            if !(a > 0.0 && a < 1.0) {
                return Err(SystemError::ParamOutOfRange {
                    name: "diagonal entry",
                    value: a,
                    range: "(0,1)",
                });
            }
        }
        let linear = Matrix::diagonal(e)?;
        let spread = if m > 1 { i as f64 / (m as f64 - 1.0) } else { 0.0 };
        let trans = e.iter().map(|a| spread * (1.0 - a)).collect();
        maps.push(AffineMap::new(linear, trans));
    }
    SystemSpec::from_maps(d, maps, "diagonal")
}

/// Finite family of similarities on the line with the given ratios.
pub fn similarity_family(ratios: &[f64]) -> Result<SystemSpec, SystemError> {
    if ratios.is_empty() {
        return Err(SystemError::Schema("similarity family needs at least one map".into()));
    }
    let m = ratios.len();
    let mut maps = Vec::with_capacity(m);
    for (i, &r) in ratios.iter().enumerate() {
        if !(r > 0.0 && r < 1.0) {
            return Err(SystemError::ParamOutOfRange { name: "ratio", value: r, range: "(0,1)" });
        }
        let spread = if m > 1 { i as f64 / (m as f64 - 1.0) } else { 0.0 };
        maps.push(AffineMap::new(Matrix::new(1, vec![r])?, vec![spread * (1.0 - r)]));
    }
    SystemSpec::from_maps(1, maps, "similarity")
}

// ---------------------------------------------------------------------------
// JSON system schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MapJson {
    matrix: Vec<Vec<f64>>,
    translation: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FamilyJson {
    name: String,
    params: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct SystemJson {
    dim: usize,
    norm: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    maps: Option<Vec<MapJson>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    family: Option<FamilyJson>,
}

pub fn to_json(spec: &SystemSpec) -> Result<String, SystemError> {
    let maps = match &spec.kind {
        SystemKind::Finite(m) => m,
        SystemKind::Countable(_) => {
            return Err(SystemError::Schema("countable systems serialize via their family".into()))
        }
    };
    let j = SystemJson {
        dim: spec.dim,
        norm: "operator-euclidean".into(),
        kind: "finite".into(),
        maps: Some(
            maps.iter()
                .map(|m| MapJson { matrix: m.linear.rows(), translation: m.translation.clone() })
                .collect(),
        ),
        family: None,
    };
    Ok(serde_json::to_string_pretty(&j)?)
}

pub fn from_json(text: &str) -> Result<SystemSpec, SystemError> {
    let j: SystemJson = serde_json::from_str(text)?;
    if j.norm != "operator-euclidean" {
        return Err(SystemError::Schema(format!("unsupported norm {:?}", j.norm)));
    }
    match j.kind.as_str() {
        "finite" => {
            let maps_json = j.maps.ok_or_else(|| SystemError::Schema("finite system needs \"maps\"".into()))?;
            let mut maps = Vec::with_capacity(maps_json.len());
            for (i, mj) in maps_json.iter().enumerate() {
                let rows: Vec<&[f64]> = mj.matrix.iter().map(|r| r.as_slice()).collect();
                let linear = Matrix::from_rows(&rows)
                    .map_err(|e| SystemError::BadMap { index: i, reason: e.to_string() })?;
                if linear.dim() != j.dim || mj.translation.len() != j.dim {
                    return Err(SystemError::BadMap { index: i, reason: "dimension mismatch".into() });
                }
                maps.push(AffineMap::new(linear, mj.translation.clone()));
            }
            SystemSpec::from_maps(j.dim, maps, "file")
        }
        "family" => {
            let fam = j.family.ok_or_else(|| SystemError::Schema("family system needs \"family\"".into()))?;
            family_from_params(&fam.name, &fam.params)
        }
        other => Err(SystemError::Schema(format!("unknown kind {other:?}"))),
    }
}

pub fn family_from_params(name: &str, params: &serde_json::Value) -> Result<SystemSpec, SystemError> {
    let get = |key: &str| -> Option<f64> { params.get(key).and_then(|v| v.as_f64()) };
    match name {
        "pathology" => {
            let alpha = get("alpha").unwrap_or(0.5);
            let beta = get("beta").unwrap_or(0.5);
            let gamma = get("gamma").unwrap_or(0.75);
            let mode = match params.get("mode").and_then(|v| v.as_str()) {
                Some("negative_pressure") => PathologyMode::NegativePressure,
                _ => PathologyMode::InfinitePressure,
            };
            pathology_family(alpha, beta, gamma, mode)
        }
        "no_equilibrium" => Ok(no_equilibrium_family()),
        "diagonal" => {
            let entries: Vec<Vec<f64>> = serde_json::from_value(
                params.get("entries").cloned().ok_or_else(|| SystemError::Schema("diagonal family needs \"entries\"".into()))?,
            )?;
            diagonal_family(&entries)
        }
        "similarity" => {
            let ratios: Vec<f64> = serde_json::from_value(
                params.get("ratios").cloned().ok_or_else(|| SystemError::Schema("similarity family needs \"ratios\"".into()))?,
            )?;
            similarity_family(&ratios)
        }
        other => Err(SystemError::Schema(format!("unknown family {other:?}"))),
    }
}

/// Built-in family names with parameter schemas, for the CLI `examples` listing.
pub fn builtin_families() -> Vec<(&'static str, &'static str)> {
    vec![
        ("pathology", "{alpha: (0,1), beta: (0,1), gamma: (beta,1], mode: infinite_pressure|negative_pressure}"),
        ("no_equilibrium", "{}"),
        ("diagonal", "{entries: [[d positive reals in (0,1)], ...]}"),
        ("similarity", "{ratios: [reals in (0,1)]}"),
    ]
}
