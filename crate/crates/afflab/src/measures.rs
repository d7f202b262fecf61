//! Shift-invariant measures, entropy on generalized-cylinder partitions,
//! energy, the variational inequality, and Gibbs equilibrium diagnostics.
//!
//! Equilibrium states are approximated by normalized level-`n` cylinder
//! weights `w(i) ∝ φ^s(A_i)`; the Gibbs-ratio diagnostic `Ĉ` measures how far
//! the approximation is from a genuine Gibbs measure. Countable-alphabet
//! entropy always goes through a finite partition with a lumped complement
//! cell — the full partition can have infinite entropy even when `h(μ) = 0`.

use crate::linalg;
use crate::pressure::{LogSumAcc, PressureBracket};
use crate::systems::{self, AffineMap, DivergenceWitness, SystemSpec, Word};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid measure: {0}")]
    Invalid(String),
    #[error("generalized partition: {0}")]
    Partition(String),
    #[error("measure alphabet ({measure}) smaller than system alphabet ({system})")]
    AlphabetMismatch { measure: usize, system: usize },
    #[error("variational inequality violated: slack {slack:.3e}")]
    VariationalViolation { slack: f64 },
    #[error("operation needs a finite system")]
    NotFinite,
    #[error("level n must satisfy {0}")]
    BadLevel(&'static str),
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("system error: {0}")]
    System(#[from] systems::SystemError),
}

/// A shift-invariant measure on the full shift: Bernoulli (product) or
/// one-step Markov with its stationary row vector.
#[derive(Debug, Clone)]
pub enum MeasureKind {
    Bernoulli {
        /// Probabilities per letter; for a countable alphabet this is the
        /// stored prefix and `tail` brackets the remaining mass.
        weights: Vec<f64>,
        /// `(lower, upper)` bounds on the mass beyond the stored prefix;
        /// `None` marks a genuinely finite alphabet.
        tail: Option<(f64, f64)>,
    },
    Markov {
        transition: linalg::Matrix,
        stationary: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct MeasureSpec {
    pub kind: MeasureKind,
}

impl MeasureSpec {
    pub fn bernoulli(weights: Vec<f64>) -> Result<Self, MeasureError> {
        if weights.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(MeasureError::Invalid("weights must lie in [0, 1]".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::Invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(MeasureSpec { kind: MeasureKind::Bernoulli { weights, tail: None } })
    }

    /// Countable Bernoulli measure given a stored prefix of weights plus a
    /// certified bracket on the tail mass; the total must bracket 1.
    pub fn bernoulli_countable(
        weights: Vec<f64>,
        tail: (f64, f64),
    ) -> Result<Self, MeasureError> {
        if weights.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(MeasureError::Invalid("weights must lie in [0, 1]".into()));
        }
        if !(tail.0 >= 0.0 && tail.0 <= tail.1) {
            return Err(MeasureError::Invalid("tail bracket must satisfy 0 <= lo <= hi".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum + tail.0 > 1.0 + 1e-12 || sum + tail.1 < 1.0 - 1e-12 {
            return Err(MeasureError::Invalid(format!(
                "partial mass {sum} plus tail bracket [{}, {}] does not bracket 1",
                tail.0, tail.1
            )));
        }
        Ok(MeasureSpec { kind: MeasureKind::Bernoulli { weights, tail: Some(tail) } })
    }

    pub fn markov(transition: linalg::Matrix, stationary: Vec<f64>) -> Result<Self, MeasureError> {
        let k = transition.dim();
        if stationary.len() != k {
            return Err(MeasureError::Invalid("stationary length != state count".into()));
        }
        for i in 0..k {
            let row: f64 = (0..k).map(|j| transition.get(i, j)).sum();
            if (row - 1.0).abs() > 1e-12 {
                return Err(MeasureError::Invalid(format!("row {i} sums to {row}")));
            }
        }
        let psum: f64 = stationary.iter().sum();
        if (psum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::Invalid("stationary vector does not sum to 1".into()));
        }
        for j in 0..k {
            let img: f64 = (0..k).map(|i| stationary[i] * transition.get(i, j)).sum();
            if (img - stationary[j]).abs() > 1e-12 {
                return Err(MeasureError::Invalid(format!(
                    "stationary vector is not fixed by the transition (state {j})"
                )));
            }
        }
        Ok(MeasureSpec { kind: MeasureKind::Markov { transition, stationary } })
    }

    /// Letters the measure can score directly.
    pub fn stored_alphabet(&self) -> usize {
        match &self.kind {
            MeasureKind::Bernoulli { weights, .. } => weights.len(),
            MeasureKind::Markov { stationary, .. } => stationary.len(),
        }
    }

    /// `μ([i])` for a cylinder given by explicit letters.
    pub fn cylinder_mass(&self, letters: &[usize]) -> f64 {
        match &self.kind {
            MeasureKind::Bernoulli { weights, .. } => {
                letters.iter().map(|&l| weights.get(l).copied().unwrap_or(0.0)).product()
            }
            MeasureKind::Markov { transition, stationary } => {
                if letters.is_empty() {
                    return 1.0;
                }
                let mut m = stationary[letters[0]];
                for w in letters.windows(2) {
                    m *= transition.get(w[0], w[1]);
                }
                m
            }
        }
    }
}

/// A singleton cell over a selected letter or the lumped complement cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Letter(usize),
    Complement,
}

/// Finite partition `𝒫_𝒥`: singletons over a finite subset `𝒥` of the
/// alphabet plus the lumped complement cell when `𝒥` is proper.
#[derive(Debug, Clone)]
pub struct GeneralizedPartition {
    /// `None` marks a countably infinite alphabet.
    pub alphabet_len: Option<usize>,
    pub selected: Vec<usize>,
}

impl GeneralizedPartition {
    pub fn full(alphabet_len: usize) -> Self {
        GeneralizedPartition { alphabet_len: Some(alphabet_len), selected: (0..alphabet_len).collect() }
    }

    pub fn subset(
        selected: Vec<usize>,
        alphabet_len: Option<usize>,
    ) -> Result<Self, MeasureError> {
        let mut s = selected;
        s.sort_unstable();
        s.dedup();
        if let Some(k) = alphabet_len {
            if s.iter().any(|&l| l >= k) {
                return Err(MeasureError::Partition("selected letter outside alphabet".into()));
            }
        }
        Ok(GeneralizedPartition { alphabet_len, selected: s })
    }

    pub fn has_complement(&self) -> bool {
        match self.alphabet_len {
            Some(k) => self.selected.len() < k,
            None => true,
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = self.selected.iter().map(|&l| Cell::Letter(l)).collect();
        if self.has_complement() {
            out.push(Cell::Complement);
        }
        out
    }
}

fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// First-level cell masses of `μ` under the partition.
fn cell_masses(mu: &MeasureSpec, partition: &GeneralizedPartition) -> Vec<f64> {
    let mut out: Vec<f64> =
        partition.selected.iter().map(|&l| mu.cylinder_mass(&[l])).collect();
    if partition.has_complement() {
        let rest: f64 = 1.0 - out.iter().sum::<f64>();
        out.push(rest.max(0.0));
    }
    out
}

/// Shannon entropy `H(μ, ⋁_{i<n} σ^{-i}𝒫_𝒥)` with the `0 log 0 = 0`
/// convention.
pub fn shannon_entropy(
    mu: &MeasureSpec,
    partition: &GeneralizedPartition,
    n: usize,
) -> Result<f64, MeasureError> {
    if n == 0 {
        return Err(MeasureError::BadLevel("n >= 1"));
    }
    match &mu.kind {
        MeasureKind::Bernoulli { .. } => {
            // product measure: the refinement is an i.i.d. product of the
            // first-level cell distribution, so H_n = n · H_1 exactly
            let h1: f64 = -cell_masses(mu, partition).iter().map(|&p| xlogx(p)).sum::<f64>();
            Ok(n as f64 * h1)
        }
        MeasureKind::Markov { transition, stationary } => {
            let k = stationary.len();
            let cells = partition.cells();
            let complement: Vec<usize> = (0..k)
                .filter(|l| !partition.selected.contains(l))
                .collect();
            let letters_of = |c: &Cell| -> Vec<usize> {
                match c {
                    Cell::Letter(l) => vec![*l],
                    Cell::Complement => complement.clone(),
                }
            };
            // depth-first over cell sequences carrying the per-state mass
            // vector restricted to the current cell
            fn rec(
                trans: &linalg::Matrix,
                cells: &[Vec<usize>],
                v: &[f64],
                depth: usize,
                acc: &mut f64,
            ) {
                let mass: f64 = v.iter().sum();
                if mass <= 0.0 {
                    return;
                }
                if depth == 0 {
                    *acc -= xlogx(mass);
                    return;
                }
                let k = v.len();
                for cell in cells {
                    let mut next = vec![0.0; k];
                    for (i, &vi) in v.iter().enumerate() {
                        if vi == 0.0 {
                            continue;
                        }
                        for &j in cell {
                            next[j] += vi * trans.get(i, j);
                        }
                    }
                    rec(trans, cells, &next, depth - 1, acc);
                }
            }
            let cell_sets: Vec<Vec<usize>> = cells.iter().map(letters_of).collect();
            let mut acc = 0.0;
            for cell in &cell_sets {
                let mut v = vec![0.0; k];
                for &j in cell {
                    v[j] = stationary[j];
                }
                rec(transition, &cell_sets, &v, n - 1, &mut acc);
            }
            Ok(acc)
        }
    }
}

#[derive(Debug, Clone)]
pub struct KsEntropy {
    /// `H_n/n` for `n = 1..=n_max`; a non-increasing sequence of upper
    /// bounds on `h(μ, 𝒫_𝒥)`.
    pub upper_sequence: Vec<f64>,
    /// Exact value when a closed form applies (Bernoulli always; Markov only
    /// for the full partition).
    pub closed_form: Option<f64>,
}

/// Kolmogorov–Sinai entropy of `μ` relative to the partition.
pub fn ks_entropy(
    mu: &MeasureSpec,
    partition: &GeneralizedPartition,
    n_max: usize,
) -> Result<KsEntropy, MeasureError> {
    let mut seq = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        seq.push(shannon_entropy(mu, partition, n)? / n as f64);
    }
    let closed = match &mu.kind {
        MeasureKind::Bernoulli { .. } => {
            Some(-cell_masses(mu, partition).iter().map(|&p| xlogx(p)).sum::<f64>())
        }
        MeasureKind::Markov { transition, stationary } => {
            let full = partition.alphabet_len == Some(stationary.len())
                && partition.selected.len() == stationary.len();
            if full {
                let mut h = 0.0;
                for (i, &pi) in stationary.iter().enumerate() {
                    for j in 0..stationary.len() {
                        h -= pi * xlogx(transition.get(i, j));
                    }
                }
                Some(h)
            } else {
                None
            }
        }
    };
    Ok(KsEntropy { upper_sequence: seq, closed_form: closed })
}

/// Divergence witness for the first-level entropy sum `Σ −p_i log p_i` of a
/// countable Bernoulli measure: certifies the partial sums pass `target`
/// using block-doubling lower bounds on `−p log p` per index.
pub fn first_level_entropy_witness(
    log_weight: impl Fn(f64) -> f64,
    target: f64,
) -> Option<DivergenceWitness> {
    // term(k) = −p_k log p_k with p_k = exp(log_weight(log k)); valid as long
    // as p_k ≤ 1/e so that −p log p is decreasing in p and in k
    let log_term = |log_k: f64| {
        let lp = log_weight(log_k);
        lp + (-lp).ln()
    };
    if let Some(w) = systems::block_doubling_witness(&log_term, target) {
        return Some(w);
    }
    // terms like c/(k log k) give harmonically decaying block sums; double a
    // second time: super-block i of block indices (2^i, 2^{i+1}] is bounded
    // below by 2^i · block(2^{i+1}), block(j) = 2^j · term(2^{j+1})
    let ln2 = std::f64::consts::LN_2;
    let log_block = |log_j: f64| {
        let j = log_j.exp();
        j * ln2 + log_term((j + 1.0) * ln2)
    };
    systems::block_doubling_witness(log_block, target).map(|w| DivergenceWitness {
        // w.log_index is log of the block index j*; the atom index is 2^{j*}
        log_index: w.log_index.exp() * ln2,
        certified_sum: w.certified_sum,
    })
}

#[derive(Debug, Clone)]
pub struct EnergySeq {
    /// `(1/m) E_μ[log φ^s(A_{i|m})]` for `m = 1..=n`.
    pub values: Vec<f64>,
    /// Set when the measure extends past the materialized maps; the value is
    /// then a partial sum over the stored alphabet only.
    pub truncated: bool,
}

fn word_log_phi(maps: &[AffineMap], letters: &[usize], s: f64) -> Result<f64, MeasureError> {
    Ok(Word::new(letters.to_vec()).product(maps).log_phi_s(s)?)
}

/// Energy `Λ(μ, 𝖠, s)` upper-estimate sequence.
pub fn energy(
    mu: &MeasureSpec,
    maps: &[AffineMap],
    s: f64,
    n: usize,
) -> Result<EnergySeq, MeasureError> {
    if n == 0 {
        return Err(MeasureError::BadLevel("n >= 1"));
    }
    let k = maps.len();
    let truncated = match &mu.kind {
        MeasureKind::Bernoulli { tail, .. } => tail.is_some() || mu.stored_alphabet() > k,
        MeasureKind::Markov { .. } => mu.stored_alphabet() > k,
    };
    if mu.stored_alphabet() < k {
        return Err(MeasureError::AlphabetMismatch { measure: mu.stored_alphabet(), system: k });
    }
    let mut values = Vec::with_capacity(n);
    let mut letters = Vec::new();
    for m in 1..=n {
        let mut acc = 0.0;
        sum_energy(mu, maps, s, m, &mut letters, &mut acc)?;
        values.push(acc / m as f64);
    }
    Ok(EnergySeq { values, truncated })
}

fn sum_energy(
    mu: &MeasureSpec,
    maps: &[AffineMap],
    s: f64,
    depth: usize,
    letters: &mut Vec<usize>,
    acc: &mut f64,
) -> Result<(), MeasureError> {
    if letters.len() == depth {
        let mass = mu.cylinder_mass(letters);
        if mass > 0.0 {
            *acc += mass * word_log_phi(maps, letters, s)?;
        }
        return Ok(());
    }
    for l in 0..maps.len() {
        letters.push(l);
        sum_energy(mu, maps, s, depth, letters, acc)?;
        letters.pop();
    }
    Ok(())
}

/// Finite-`n` variational inequality
/// `(1/n) Σ_i μ([i]) log(φ^s(A_i)/μ([i])) ≤ (1/n) log Z_n`.
/// Returns the non-negative slack; a negative slack (beyond round-off) is an
/// invariant failure.
pub fn variational_check(
    mu: &MeasureSpec,
    maps: &[AffineMap],
    s: f64,
    n: usize,
) -> Result<f64, MeasureError> {
    if n == 0 {
        return Err(MeasureError::BadLevel("n >= 1"));
    }
    let k = maps.len();
    if mu.stored_alphabet() < k {
        return Err(MeasureError::AlphabetMismatch { measure: mu.stored_alphabet(), system: k });
    }
    let mut z = LogSumAcc::new();
    let mut lhs = 0.0f64;
    let mut letters = Vec::new();
    variational_rec(mu, maps, s, n, &mut letters, &mut z, &mut lhs)?;
    let slack = (z.log_total() - lhs) / n as f64;
    if slack < -1e-9 {
        return Err(MeasureError::VariationalViolation { slack });
    }
    Ok(slack)
}

fn variational_rec(
    mu: &MeasureSpec,
    maps: &[AffineMap],
    s: f64,
    depth: usize,
    letters: &mut Vec<usize>,
    z: &mut LogSumAcc,
    lhs: &mut f64,
) -> Result<(), MeasureError> {
    if letters.len() == depth {
        let lphi = word_log_phi(maps, letters, s)?;
        z.push(lphi);
        let mass = mu.cylinder_mass(letters);
        if mass > 0.0 {
            *lhs += mass * (lphi - mass.ln());
        }
        return Ok(());
    }
    for l in 0..maps.len() {
        letters.push(l);
        variational_rec(mu, maps, s, depth, letters, z, lhs)?;
        letters.pop();
    }
    Ok(())
}

/// Level-`n` Gibbs-weight approximation of an equilibrium state together
/// with its quality diagnostics.
#[derive(Debug, Clone)]
pub struct EquilibriumApprox {
    pub s: f64,
    pub n: usize,
    pub alphabet: usize,
    /// `log w(i)` over `𝓘^n` in lexicographic word order; the weights sum
    /// to 1.
    pub log_weights: Vec<f64>,
    /// Pressure value used in the Gibbs ratio.
    pub p_hat: f64,
    pub bracket_width: f64,
    /// Observed `sup/inf` Gibbs ratio, maximized over marginal levels.
    pub gibbs_c_hat: f64,
    /// `gibbs_c_hat` recomputed at the bracket endpoints (sensitivity).
    pub gibbs_c_hat_range: (f64, f64),
    /// Per-level `sup/inf` ratios at `P̂` for `m = 1..=n`.
    pub level_ratios: Vec<f64>,
    /// Violations of `μ([ikj]) ≤ Ĉ⁴ μ([i])μ([k])μ([j])` over equal-length
    /// triples representable at level `n`.
    pub triple_violations: usize,
    /// Set when a nontrivial invariant subspace was found: the Gibbs ratio
    /// may degenerate without prior block reduction.
    pub reducible_warning: bool,
}

impl EquilibriumApprox {
    /// Marginal weights at level `m ≤ n` (lexicographic order over `𝓘^m`).
    pub fn marginal(&self, m: usize) -> Vec<f64> {
        assert!(m >= 1 && m <= self.n);
        let block = self.alphabet.pow((self.n - m) as u32);
        let count = self.alphabet.pow(m as u32);
        let mut out = Vec::with_capacity(count);
        for c in 0..count {
            let mut acc = LogSumAcc::new();
            for t in 0..block {
                acc.push(self.log_weights[c * block + t]);
            }
            out.push(acc.log_total().exp());
        }
        out
    }

    /// Cylinder-mass weights of an explicit measure, for running the
    /// correlation diagnostics against a reference measure.
    pub fn from_measure(mu: &MeasureSpec, alphabet: usize, n: usize) -> Self {
        let count = alphabet.pow(n as u32);
        let mut log_weights = Vec::with_capacity(count);
        for c in 0..count {
            let letters = unrank(c, alphabet, n);
            let m = mu.cylinder_mass(&letters);
            log_weights.push(if m > 0.0 { m.ln() } else { f64::NEG_INFINITY });
        }
        EquilibriumApprox {
            s: f64::NAN,
            n,
            alphabet,
            log_weights,
            p_hat: 0.0,
            bracket_width: 0.0,
            gibbs_c_hat: 1.0,
            gibbs_c_hat_range: (1.0, 1.0),
            level_ratios: vec![1.0; n],
            triple_violations: 0,
            reducible_warning: false,
        }
    }
}

fn unrank(mut code: usize, alphabet: usize, n: usize) -> Vec<usize> {
    let mut letters = vec![0usize; n];
    for pos in (0..n).rev() {
        letters[pos] = code % alphabet;
        code /= alphabet;
    }
    letters
}

fn gibbs_ratios(
    approx_log_weights: &[f64],
    log_phi: &[Vec<f64>],
    alphabet: usize,
    n: usize,
    p_hat: f64,
) -> Vec<f64> {
    let mut ratios = Vec::with_capacity(n);
    for m in 1..=n {
        let block = alphabet.pow((n - m) as u32);
        let count = alphabet.pow(m as u32);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..count {
            let mut acc = LogSumAcc::new();
            for t in 0..block {
                acc.push(approx_log_weights[c * block + t]);
            }
            let r = acc.log_total() + m as f64 * p_hat - log_phi[m - 1][c];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        ratios.push((hi - lo).exp());
    }
    ratios
}

/// Normalized level-`n` cylinder Gibbs weights `w(i) = φ^s(A_i)/Z_n` with
/// quality diagnostics: the observed Gibbs ratio per marginal level, its
/// sensitivity to the pressure bracket, and the three-fold bound check.
pub fn equilibrium_approx(
    system: &SystemSpec,
    s: f64,
    n: usize,
    bracket: &PressureBracket,
) -> Result<EquilibriumApprox, MeasureError> {
    if !system.is_finite() {
        return Err(MeasureError::NotFinite);
    }
    if n == 0 {
        return Err(MeasureError::BadLevel("n >= 1"));
    }
    let maps = system.materialize(0);
    let k = maps.len();
    // log φ^s over every level m ≤ n, lexicographic
    let mut log_phi: Vec<Vec<f64>> = Vec::with_capacity(n);
    for m in 1..=n {
        let count = k.pow(m as u32);
        let mut lv = Vec::with_capacity(count);
        for c in 0..count {
            lv.push(word_log_phi(&maps, &unrank(c, k, m), s)?);
        }
        log_phi.push(lv);
    }
    let top = &log_phi[n - 1];
    let mut z = LogSumAcc::new();
    for &v in top {
        z.push(v);
    }
    let log_z = z.log_total();
    let log_weights: Vec<f64> = top.iter().map(|&v| v - log_z).collect();

    let p_hat = bracket.midpoint();
    let width = bracket.width();
    let ratios = gibbs_ratios(&log_weights, &log_phi, k, n, p_hat);
    let c_hat = ratios.iter().fold(1.0f64, |a, &b| a.max(b));
    let c_lo = gibbs_ratios(&log_weights, &log_phi, k, n, p_hat - 0.5 * width)
        .into_iter()
        .fold(1.0f64, f64::max);
    let c_hi = gibbs_ratios(&log_weights, &log_phi, k, n, p_hat + 0.5 * width)
        .into_iter()
        .fold(1.0f64, f64::max);

    // three-fold bound μ([ikj]) ≤ Ĉ⁴ μ([i])μ([k])μ([j]) on equal-length
    // triples; marginals of the level-n weights play the role of μ
    let mut triple_violations = 0usize;
    let log_c4 = 4.0 * c_hat.ln();
    let tmp = EquilibriumApprox {
        s,
        n,
        alphabet: k,
        log_weights: log_weights.clone(),
        p_hat,
        bracket_width: width,
        gibbs_c_hat: c_hat,
        gibbs_c_hat_range: (c_lo.min(c_hi), c_lo.max(c_hi)),
        level_ratios: ratios,
        triple_violations: 0,
        reducible_warning: false,
    };
    for ell in 1..=n / 3 {
        let ws = tmp.marginal(ell);
        let w3 = tmp.marginal(3 * ell);
        let count = k.pow(ell as u32);
        for i in 0..count {
            for kk in 0..count {
                for j in 0..count {
                    let joint = w3[(i * count + kk) * count + j];
                    let bound = log_c4 + ws[i].ln() + ws[kk].ln() + ws[j].ln();
                    if joint.ln() > bound + 1e-9 {
                        triple_violations += 1;
                    }
                }
            }
        }
    }
    let reducible_warning =
        crate::reducibility::find_invariant_subspace(&maps, 8, 1e-8, 0xA5).is_some();
    Ok(EquilibriumApprox { triple_violations, reducible_warning, ..tmp })
}

#[derive(Debug, Clone)]
pub struct CorrelationRow {
    pub i: Word,
    pub j: Word,
    pub gap: usize,
    /// `|w([i] ∩ σ^{-|i|-g}[j]) − w([i]) w([j])|`
    pub value: f64,
}

/// Correlation table of the level-`n` weights for given cylinder pairs and
/// gaps; a mixing measure shows decay in the gap.
pub fn correlation_decay(
    approx: &EquilibriumApprox,
    cylinders: &[(Word, Word)],
    gaps: &[usize],
) -> Result<Vec<CorrelationRow>, MeasureError> {
    let k = approx.alphabet;
    let n = approx.n;
    let mut out = Vec::new();
    for (wi, wj) in cylinders {
        let (li, lj) = (wi.len(), wj.len());
        for &g in gaps {
            if li + g + lj > n {
                return Err(MeasureError::BadLevel("approx level >= |i| + gap + |j|"));
            }
            let mi = approx.marginal(li);
            let mj = approx.marginal(lj);
            let rank = |w: &Word| w.letters.iter().fold(0usize, |a, &l| a * k + l);
            let pi = mi[rank(wi)];
            let pj = mj[rank(wj)];
            // joint mass: sum over level-n words with prefix i and block j at
            // offset li + g
            let mut acc = LogSumAcc::new();
            for (c, &lw) in approx.log_weights.iter().enumerate() {
                let letters = unrank(c, k, n);
                if letters[..li] == wi.letters[..]
                    && letters[li + g..li + g + lj] == wj.letters[..]
                {
                    acc.push(lw);
                }
            }
            let joint = acc.log_total().exp();
            out.push(CorrelationRow {
                i: wi.clone(),
                j: wj.clone(),
                gap: g,
                value: (joint - pi * pj).abs(),
            });
        }
    }
    Ok(out)
}
