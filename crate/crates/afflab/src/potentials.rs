//! Restricted-norm quasi-multiplicative potentials and empirical
//! quasi-multiplicativity certificates.
//!
//! A potential is defined by a family of subspace tuples in exterior-power
//! spaces: `Ψ(i) = max_{(W_j)} ∏_j ‖A_i^{(j)}|_{W_j}‖^{β_j}`. The full-space
//! family recovers `φ^s` exactly. Certificates record an empirically verified
//! inequality `Ψ(i)Ψ(j) ≤ κ^{−β} max_{k∈F} Ψ(ikj)` over all word pairs up to
//! a checked length; they are evidence at that confidence, not proofs.

use crate::linalg::{self, exterior_power, restricted_norm, Matrix, Subspace};
use crate::systems::{AffineMap, SystemSpec, Word};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// κ below this floor marks certificate failure.
pub const KAPPA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("family factor {factor}: subspace ambient {have}, exterior power needs {want}")]
    AmbientMismatch { factor: usize, have: usize, want: usize },
    #[error("family needs at least one subspace tuple")]
    EmptyFamily,
    #[error("grades and exponents must have equal length")]
    ShapeMismatch,
    #[error("exponent beta[{0}] is negative")]
    NegativeBeta(usize),
    #[error("word product collapsed to zero")]
    ZeroProduct,
    #[error("system error: {0}")]
    System(#[from] crate::systems::SystemError),
}

pub fn binomial(d: usize, k: usize) -> usize {
    if k > d {
        return 0;
    }
    let mut out = 1usize;
    for i in 0..k.min(d - k) {
        out = out * (d - i) / (i + 1);
    }
    out
}

/// A family of subspace tuples in exterior-power spaces together with the
/// exponents `β_j`; evaluating [`log_psi`] takes the maximum over tuples of
/// the weighted restricted-norm product.
#[derive(Debug, Clone)]
pub struct SubspaceFamilyTuple {
    /// Ambient dimension of the original matrices.
    pub dim: usize,
    /// Exterior-power grades, one per factor.
    pub grades: Vec<usize>,
    /// Exponents `β_j ≥ 0`; `β = Σ β_j`.
    pub betas: Vec<f64>,
    /// Subspace tuples; `tuples[t][j]` lives in the grade-`grades[j]` space.
    pub tuples: Vec<Vec<Subspace>>,
}

impl SubspaceFamilyTuple {
    pub fn new(
        dim: usize,
        grades: Vec<usize>,
        betas: Vec<f64>,
        tuples: Vec<Vec<Subspace>>,
    ) -> Result<Self, PotentialError> {
        if grades.len() != betas.len() {
            return Err(PotentialError::ShapeMismatch);
        }
        if tuples.is_empty() {
            return Err(PotentialError::EmptyFamily);
        }
        for (j, &b) in betas.iter().enumerate() {
            if b < 0.0 {
                return Err(PotentialError::NegativeBeta(j));
            }
        }
        for tuple in &tuples {
            if tuple.len() != grades.len() {
                return Err(PotentialError::ShapeMismatch);
            }
            for (j, w) in tuple.iter().enumerate() {
                let want = binomial(dim, grades[j]);
                if w.ambient_dim != want {
                    return Err(PotentialError::AmbientMismatch {
                        factor: j,
                        have: w.ambient_dim,
                        want,
                    });
                }
            }
        }
        Ok(SubspaceFamilyTuple { dim, grades, betas, tuples })
    }

    /// The full-exterior-power-space family whose potential is exactly `φ^s`:
    /// grades `⌊s⌋, ⌈s⌉` with exponents `⌈s⌉−s, s−⌊s⌋` (a single grade for
    /// integer `s`).
    pub fn full_space(dim: usize, s: f64) -> Result<Self, PotentialError> {
        assert!(s >= 0.0 && s <= dim as f64, "full-space family needs 0 <= s <= d");
        let lo = s.floor() as usize;
        let hi = s.ceil() as usize;
        let (grades, betas) = if lo == hi {
            (vec![lo], vec![1.0])
        } else {
            (vec![lo, hi], vec![hi as f64 - s, s - lo as f64])
        };
        let tuples =
            vec![grades.iter().map(|&g| Subspace::full(binomial(dim, g))).collect::<Vec<_>>()];
        SubspaceFamilyTuple::new(dim, grades, betas, tuples)
    }

    pub fn beta(&self) -> f64 {
        self.betas.iter().sum()
    }
}

/// Exterior power at grade `g`, tolerating `g = 0` (the scalar `1`).
fn grade_power(m: &Matrix, g: usize) -> Result<Matrix, linalg::LinalgError> {
    if g == 0 {
        return Ok(Matrix::identity(1));
    }
    exterior_power(m, g)
}

/// `log Ψ(word)` for the family; the word product is renormalized per step so
/// long words stay representable.
pub fn log_psi(
    word: &Word,
    maps: &[AffineMap],
    family: &SubspaceFamilyTuple,
) -> Result<f64, PotentialError> {
    let prod = word.product(maps);
    if prod.log_scale == f64::NEG_INFINITY {
        return Err(PotentialError::ZeroProduct);
    }
    // (c·M)^{∧g} = c^g · M^{∧g}
    let powers: Vec<(Matrix, f64)> = family
        .grades
        .iter()
        .map(|&g| Ok((grade_power(&prod.mat, g)?, g as f64 * prod.log_scale)))
        .collect::<Result<_, linalg::LinalgError>>()?;
    let mut best = f64::NEG_INFINITY;
    for tuple in &family.tuples {
        let mut acc = 0.0;
        for (j, w) in tuple.iter().enumerate() {
            let (ref pw, extra) = powers[j];
            let rn = restricted_norm(pw, w)?;
            if rn <= 0.0 {
                acc = f64::NEG_INFINITY;
                break;
            }
            acc += family.betas[j] * (rn.ln() + extra);
        }
        best = best.max(acc);
    }
    Ok(best)
}

pub fn psi(
    word: &Word,
    maps: &[AffineMap],
    family: &SubspaceFamilyTuple,
) -> Result<f64, PotentialError> {
    Ok(log_psi(word, maps, family)?.exp())
}

#[derive(Debug, Clone)]
pub struct SubmultReport {
    pub word_len: usize,
    pub holds: bool,
    pub violations: Vec<(Word, Word, f64)>,
    /// Whether each image of a family subspace under the word action stays
    /// within angular tolerance of some family member of the same factor.
    pub action_closed: bool,
    pub closure_violations: Vec<String>,
}

fn words_up_to(k: usize, len: usize) -> Vec<Word> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..len {
        let mut next = Vec::new();
        for w in &frontier {
            for l in 0..k {
                let mut w2 = w.clone();
                w2.push(l);
                out.push(Word::new(w2.clone()));
                next.push(w2);
            }
        }
        frontier = next;
    }
    out
}

/// Largest principal-angle style defect of `span(M b_i)` from the target.
fn image_defect(m: &Matrix, w: &Subspace, target: &Subspace) -> f64 {
    let mut worst = 0.0f64;
    for b in &w.basis {
        let img = m.apply(b);
        let n = linalg::norm(&img);
        if n < 1e-300 {
            return 1.0;
        }
        let unit: Vec<f64> = img.iter().map(|x| x / n).collect();
        worst = worst.max(target.residual(&unit));
    }
    worst
}

/// Checks `Ψ(ij) ≤ Ψ(i)Ψ(j)(1 + tol)` over all word pairs up to `word_len`,
/// and whether the family is closed under the word action (the inequality is
/// only guaranteed for action-closed families).
pub fn submultiplicativity_check(
    maps: &[AffineMap],
    family: &SubspaceFamilyTuple,
    word_len: usize,
    tol: f64,
) -> Result<SubmultReport, PotentialError> {
    let words = words_up_to(maps.len(), word_len);
    let mut log_psis = Vec::with_capacity(words.len());
    for w in &words {
        log_psis.push(log_psi(w, maps, family)?);
    }
    let mut violations = Vec::new();
    for (a, la) in words.iter().zip(&log_psis) {
        for (b, lb) in words.iter().zip(&log_psis) {
            let joint = log_psi(&a.concat(b), maps, family)?;
            if joint > la + lb + (1.0 + tol).ln() + 1e-12 {
                violations.push((a.clone(), b.clone(), (joint - la - lb).exp()));
            }
        }
    }
    // action closure, checked factor-wise on single letters
    let mut closure_violations = Vec::new();
    for (li, m) in maps.iter().enumerate() {
        for (j, &g) in family.grades.iter().enumerate() {
            let pw = grade_power(&m.linear, g)?;
            for (ti, tuple) in family.tuples.iter().enumerate() {
                let w = &tuple[j];
                let ok = family
                    .tuples
                    .iter()
                    .any(|other| image_defect(&pw, w, &other[j]) <= 1e-6_f64.max(tol));
                if !ok {
                    closure_violations.push(format!(
                        "map {li}, factor {j}: image of tuple {ti} leaves the family"
                    ));
                }
            }
        }
    }
    Ok(SubmultReport {
        word_len,
        holds: violations.is_empty(),
        action_closed: closure_violations.is_empty(),
        violations,
        closure_violations,
    })
}

/// Empirical quasi-multiplicativity certificate for the potential `φ^s`
/// (full-space family): `Ψ(i)Ψ(j) ≤ κ^{−β} max_{k∈F} Ψ(ikj)` verified over
/// all pairs with `|i|, |j| ≤ checked_len`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QMCertificate {
    pub s: f64,
    pub dim: usize,
    /// Family description: basis matrices per tuple per factor.
    pub families: Vec<Vec<Vec<Vec<f64>>>>,
    pub grades: Vec<usize>,
    pub betas: Vec<f64>,
    /// Connecting words.
    pub f_words: Vec<Vec<usize>>,
    pub kappa: f64,
    pub checked_len: usize,
    pub violations: usize,
}

impl QMCertificate {
    pub fn beta(&self) -> f64 {
        self.betas.iter().sum()
    }

    /// Longest connecting-word length (the `t` of `K̂(s)`).
    pub fn t(&self) -> usize {
        self.f_words.iter().map(|w| w.len()).max().unwrap_or(1)
    }

    /// `log K` with `K = κ^{−β}`.
    pub fn log_k(&self) -> f64 {
        -self.beta() * self.kappa.ln()
    }

    pub fn as_pressure_ref(&self, id: &str) -> crate::pressure::QmCertificateRef {
        crate::pressure::QmCertificateRef {
            log_k: self.log_k(),
            t: self.t(),
            id: Some(id.to_string()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Searches for a quasi-multiplicativity certificate with the automatic
/// full-space family (`p = 1`). Grows `F` greedily from short words while the
/// worst pair ratio improves; returns `None` when the ratio stays below the
/// [`KAPPA_FLOOR`] (as happens for genuinely reducible triangular tuples).
pub fn certificate_search(
    system: &SystemSpec,
    s: f64,
    max_f_len: usize,
    checked_len: usize,
) -> Result<Option<QMCertificate>, PotentialError> {
    let maps = system.materialize(0);
    let family = SubspaceFamilyTuple::full_space(system.dim, s)?;
    let beta = family.beta().max(1e-12);
    let pair_words = words_up_to(maps.len(), checked_len);
    let mut pair_logs = Vec::with_capacity(pair_words.len());
    for w in &pair_words {
        pair_logs.push(log_psi(w, &maps, &family)?);
    }
    let candidates = words_up_to(maps.len(), max_f_len);

    // worst log ratio log(max_{k∈F} Ψ(ikj)) − log(Ψ(i)Ψ(j)) over all pairs,
    // given connecting words F
    let worst_ratio = |f: &[Word]| -> Result<f64, PotentialError> {
        let mut worst = f64::INFINITY;
        for (i, li) in pair_words.iter().zip(&pair_logs) {
            for (j, lj) in pair_words.iter().zip(&pair_logs) {
                let mut best = f64::NEG_INFINITY;
                for k in f {
                    let w = i.concat(k).concat(j);
                    best = best.max(log_psi(&w, &maps, &family)?);
                }
                worst = worst.min(best - li - lj);
            }
        }
        Ok(worst)
    };

    let mut f: Vec<Word> = Vec::new();
    let mut best_worst = f64::NEG_INFINITY;
    loop {
        let mut improved: Option<(Word, f64)> = None;
        for cand in &candidates {
            if f.contains(cand) {
                continue;
            }
            let mut trial = f.clone();
            trial.push(cand.clone());
            let w = worst_ratio(&trial)?;
            if w > best_worst + 1e-12 && improved.as_ref().map_or(true, |(_, bw)| w > *bw) {
                improved = Some((cand.clone(), w));
            }
        }
        match improved {
            Some((cand, w)) => {
                f.push(cand);
                best_worst = w;
                if best_worst >= 0.0 {
                    break; // κ ≥ 1 cannot improve meaningfully
                }
            }
            None => break,
        }
    }
    if f.is_empty() {
        return Ok(None);
    }
    let kappa = (best_worst / beta).exp();
    if !(kappa > KAPPA_FLOOR) {
        return Ok(None);
    }
    let families = family
        .tuples
        .iter()
        .map(|t| t.iter().map(|w| w.basis.clone()).collect())
        .collect();
    Ok(Some(QMCertificate {
        s,
        dim: system.dim,
        families,
        grades: family.grades.clone(),
        betas: family.betas.clone(),
        f_words: f.into_iter().map(|w| w.letters).collect(),
        kappa,
        checked_len,
        violations: 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::phi_s;
    use crate::systems::similarity_family;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps_of(mats: Vec<Matrix>) -> Vec<AffineMap> {
        mats.into_iter().map(AffineMap::linear_only).collect()
    }

    fn random_maps(rng: &mut ChaCha8Rng, d: usize, count: usize) -> Vec<AffineMap> {
        let mut out = Vec::new();
        while out.len() < count {
            let data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = Matrix::new(d, data).unwrap();
            if m.check_invertible().is_err() || m.cond() > 50.0 {
                continue;
            }
            out.push(AffineMap::linear_only(m.scale(0.5 / m.op_norm())));
        }
        out
    }

    #[test]
    fn full_space_family_equals_phi_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &d in &[2usize, 3] {
            let maps = random_maps(&mut rng, d, 2);
            for &s in &[0.4, 1.0, 1.3, 2.0] {
                if s > d as f64 {
                    continue;
                }
                let fam = SubspaceFamilyTuple::full_space(d, s).unwrap();
                for w in words_up_to(maps.len(), 3) {
                    let got = psi(&w, &maps, &fam).unwrap();
                    let want = phi_s(&w.product(&maps).mat, s).unwrap()
                        * (s * w.product(&maps).log_scale).exp();
                    assert!(
                        (got - want).abs() <= 1e-9 * want,
                        "d={d} s={s} word {:?}: {got} vs {want}",
                        w.letters
                    );
                }
            }
        }
    }

    #[test]
    fn one_dim_subspace_diagonal_product() {
        // single subspace e1 at grade 1, β = 1: Ψ = |a_11 entries product|
        let maps = maps_of(vec![
            Matrix::diagonal(&[0.5, 0.3]).unwrap(),
            Matrix::diagonal(&[0.4, 0.2]).unwrap(),
        ]);
        let e1 = Subspace::from_spanning(2, &[vec![1.0, 0.0]], 1e-12).unwrap();
        let fam = SubspaceFamilyTuple::new(2, vec![1], vec![1.0], vec![vec![e1]]).unwrap();
        let w = Word::new(vec![0, 1, 0]);
        let got = psi(&w, &maps, &fam).unwrap();
        assert!((got - 0.5 * 0.4 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_family_bounded_by_norm_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = random_maps(&mut rng, 3, 2);
        let s = 1.6;
        let fam_full = SubspaceFamilyTuple::full_space(3, s).unwrap();
        // random 1-dim subspaces in each exterior grade
        let mk = |rng: &mut ChaCha8Rng, amb: usize| {
            let v: Vec<f64> = (0..amb).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Subspace::from_spanning(amb, &[v], 1e-12).unwrap()
        };
        let tuples = vec![vec![mk(&mut rng, 3), mk(&mut rng, 3)]];
        let fam =
            SubspaceFamilyTuple::new(3, fam_full.grades.clone(), fam_full.betas.clone(), tuples)
                .unwrap();
        for w in words_up_to(maps.len(), 3) {
            let restricted = log_psi(&w, &maps, &fam).unwrap();
            let free = log_psi(&w, &maps, &fam_full).unwrap();
            assert!(restricted <= free + 1e-9);
        }
    }

    #[test]
    fn ambient_mismatch_rejected() {
        let bad = Subspace::full(5);
        let err = SubspaceFamilyTuple::new(2, vec![1], vec![1.0], vec![vec![bad]]);
        assert!(matches!(err, Err(PotentialError::AmbientMismatch { .. })));
    }

    #[test]
    fn submultiplicativity_full_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps = random_maps(&mut rng, 2, 2);
        let fam = SubspaceFamilyTuple::full_space(2, 1.3).unwrap();
        let rep = submultiplicativity_check(&maps, &fam, 3, 1e-10).unwrap();
        assert!(rep.holds, "violations: {:?}", rep.violations.len());
        assert!(rep.action_closed);
    }

    #[test]
    fn submultiplicativity_axes_family_closed() {
        // axis-permuting diagonal tuple: coordinate-axes family is closed
        let maps = maps_of(vec![
            Matrix::diagonal(&[0.5, 0.25]).unwrap(),
            Matrix::from_rows(&[&[0.0, 0.25], &[0.5, 0.0]]).unwrap(),
        ]);
        let e1 = Subspace::from_spanning(2, &[vec![1.0, 0.0]], 1e-12).unwrap();
        let e2 = Subspace::from_spanning(2, &[vec![0.0, 1.0]], 1e-12).unwrap();
        let fam =
            SubspaceFamilyTuple::new(2, vec![1], vec![1.0], vec![vec![e1], vec![e2]]).unwrap();
        let rep = submultiplicativity_check(&maps, &fam, 6, 1e-10).unwrap();
        assert!(rep.holds);
        assert!(rep.action_closed);
    }

    #[test]
    fn non_closed_family_warned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = random_maps(&mut rng, 2, 2);
        let v = Subspace::from_spanning(2, &[vec![0.6, 0.8]], 1e-12).unwrap();
        let fam = SubspaceFamilyTuple::new(2, vec![1], vec![1.0], vec![vec![v]]).unwrap();
        let rep = submultiplicativity_check(&maps, &fam, 2, 1e-10).unwrap();
        assert!(!rep.action_closed);
        assert!(!rep.closure_violations.is_empty());
    }

    #[test]
    fn certificate_positive_tuple() {
        let maps = maps_of(vec![
            Matrix::from_rows(&[&[0.3, 0.1], &[0.2, 0.4]]).unwrap(),
            Matrix::from_rows(&[&[0.25, 0.15], &[0.1, 0.35]]).unwrap(),
        ]);
        let sys = SystemSpec::from_maps(2, maps, "pos").unwrap();
        let cert = certificate_search(&sys, 1.0, 1, 3).unwrap().expect("positive tuple");
        assert!(cert.kappa > 1e-3, "kappa {}", cert.kappa);
        assert_eq!(cert.violations, 0);
        // extending the pair check by one letter only degrades κ mildly for
        // a strictly positive tuple (the constant stabilizes)
        let maps = sys.materialize(0);
        let fam = SubspaceFamilyTuple::full_space(2, 1.0).unwrap();
        let mut worst = f64::INFINITY;
        for i in words_up_to(2, 4) {
            for j in words_up_to(2, 4) {
                let li = log_psi(&i, &maps, &fam).unwrap();
                let lj = log_psi(&j, &maps, &fam).unwrap();
                let best = cert
                    .f_words
                    .iter()
                    .map(|k| {
                        log_psi(
                            &i.concat(&Word::new(k.clone())).concat(&j),
                            &maps,
                            &fam,
                        )
                        .unwrap()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                worst = worst.min(best - li - lj);
            }
        }
        let kappa_4 = (worst / cert.beta()).exp();
        assert!(kappa_4 >= 0.5 * cert.kappa, "kappa collapsed: {} -> {kappa_4}", cert.kappa);
    }

    #[test]
    fn certificate_conformal_kappa_one() {
        let sys = similarity_family(&[0.5, 0.25]).unwrap();
        let cert = certificate_search(&sys, 0.8, 1, 3).unwrap().expect("conformal");
        // norms multiply exactly: worst ratio is the smallest Ψ over F words
        assert!(cert.kappa > 0.2, "kappa {}", cert.kappa);
        assert_eq!(cert.violations, 0);
    }

    #[test]
    fn certificate_fails_on_triangular() {
        // shear-dominated triangular tuple: φ^1 quasi-multiplicativity
        // degenerates (products kill the shear direction geometrically)
        let eps = 1e-9;
        let maps = maps_of(vec![
            Matrix::from_rows(&[&[eps, 0.9], &[0.0, eps]]).unwrap(),
            Matrix::from_rows(&[&[eps, -0.9], &[0.0, eps]]).unwrap(),
        ]);
        let sys = SystemSpec::from_maps(2, maps, "tri").unwrap();
        let cert = certificate_search(&sys, 1.0, 2, 3).unwrap();
        match cert {
            None => {}
            Some(c) => assert!(c.kappa < 1e-4, "kappa unexpectedly large: {}", c.kappa),
        }
    }

    #[test]
    fn certificate_json_round_trip() {
        let sys = similarity_family(&[0.5, 0.25]).unwrap();
        let cert = certificate_search(&sys, 0.8, 1, 2).unwrap().unwrap();
        let text = cert.to_json();
        let back = QMCertificate::from_json(&text).unwrap();
        assert_eq!(back.f_words, cert.f_words);
        assert!((back.kappa - cert.kappa).abs() < 1e-15);
        let r = back.as_pressure_ref("c1");
        assert!((r.log_k - cert.log_k()).abs() < 1e-15);
    }

    #[test]
    fn psi_continuous_in_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps = random_maps(&mut rng, 2, 2);
        let w = Word::new(vec![0, 1, 0]);
        // oscillation on a refining grid within one panel stays bounded
        let vals: Vec<f64> = (0..=100)
            .map(|i| {
                let s = 1.0 + i as f64 / 100.0;
                let fam = SubspaceFamilyTuple::full_space(2, s).unwrap();
                log_psi(&w, &maps, &fam).unwrap()
            })
            .collect();
        for pair in vals.windows(2) {
            assert!((pair[1] - pair[0]).abs() < 0.5, "jump {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn p_bound_full_space() {
        // automatic construction always has p = 1, within the proven bound
        for d in 2..=4usize {
            for &s in &[0.5, 1.5, 2.5] {
                if s > d as f64 {
                    continue;
                }
                let fam = SubspaceFamilyTuple::full_space(d, s).unwrap();
                let k = s.floor() as usize;
                let bound = binomial(d, k) * binomial(d, (s.ceil() as usize).min(d));
                assert!(fam.tuples.len() <= bound.max(1));
            }
        }
    }
}
