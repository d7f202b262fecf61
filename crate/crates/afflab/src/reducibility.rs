//! Invariant-subspace detection for matrix tuples, block-upper-triangular
//! reduction with irreducible diagonal blocks, and the block-diagonal
//! comparison system whose pressure agrees with the original.
//!
//! Detection is randomized: invariant subspaces are read off the primary
//! (generalized eigen-) subspaces of random elements of the generated
//! algebra. Absence of detection is always reported as "none found at this
//! confidence", never as a proof of irreducibility.

use crate::linalg::{self, dot, norm, null_space, orthonormalize, Matrix, Subspace};
use crate::systems::{AffineMap, SystemSpec, Word};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_TRIALS: usize = 32;
pub const DEFAULT_TOL: f64 = 1e-8;
/// Conjugators above this condition number are reported ill-conditioned.
pub const COND_LIMIT: f64 = 1e8;

#[derive(Debug, Error)]
pub enum ReducibilityError {
    #[error("linear algebra error: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("system error: {0}")]
    System(#[from] crate::systems::SystemError),
    #[error("operation needs at least one map")]
    EmptySystem,
    #[error("dimension {0} unsupported here (need d <= {1})")]
    DimTooLarge(usize, usize),
}

fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.dim(), m.dim(), m.entries())
}

/// Complex eigenvalues of `m`, sorted by decreasing modulus.
pub fn complex_eigenvalues(m: &Matrix) -> Vec<(f64, f64)> {
    // pre-scale so the QR iteration runs near unit norm; badly scaled inputs
    // (entries spanning hundreds of orders of magnitude) otherwise stall
    let norm = m.op_norm();
    let scale = if norm.is_finite() && norm > 0.0 { norm } else { 1.0 };
    let mut eig: Vec<(f64, f64)> = to_na(&m.scale(1.0 / scale))
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re * scale, c.im * scale))
        .collect();
    eig.sort_by(|a, b| b.0.hypot(b.1).total_cmp(&a.0.hypot(a.1)));
    eig
}

fn vectorize(m: &Matrix) -> Vec<f64> {
    m.entries().to_vec()
}

/// Dimension of the linear span of the word products `A_i`, `|i| ≤ word_cap`,
/// inside d²-dimensional matrix space. Stops early once one more generation
/// leaves the span unchanged.
pub fn algebra_dimension(maps: &[AffineMap], word_cap: usize) -> usize {
    if maps.is_empty() {
        return 0;
    }
    let tol = 1e-10;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    // matrices whose span was newly added in the previous generation
    let mut frontier: Vec<Matrix> = Vec::new();
    for m in maps {
        let before = basis.len();
        basis = orthonormalize(&[basis.clone(), vec![vectorize(&m.linear)]].concat(), tol);
        if basis.len() > before {
            frontier.push(m.linear.clone());
        }
    }
    for _ in 1..word_cap {
        let mut next = Vec::new();
        for f in &frontier {
            for m in maps {
                let prod = m.linear.mul(f);
                let before = basis.len();
                basis =
                    orthonormalize(&[basis.clone(), vec![vectorize(&prod)]].concat(), tol);
                if basis.len() > before {
                    next.push(prod);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    basis.len()
}

/// Random element of the generated algebra: a convex combination of up to
/// `2d` word products of length ≤ 3.
fn random_algebra_element(mats: &[Matrix], rng: &mut ChaCha8Rng) -> Matrix {
    let d = mats[0].dim();
    let count = rng.gen_range(2..=(2 * d).max(3));
    let mut acc = Matrix::scalar(d, 0.0);
    let mut total = 0.0;
    for _ in 0..count {
        let len = rng.gen_range(1..=3usize);
        let mut prod = mats[rng.gen_range(0..mats.len())].clone();
        for _ in 1..len {
            prod = prod.mul(&mats[rng.gen_range(0..mats.len())]);
        }
        let scale = prod.max_abs();
        if scale == 0.0 {
            continue;
        }
        let w: f64 = rng.gen_range(0.1..1.0);
        acc = acc.add(&prod.scale(w / scale));
        total += w;
    }
    if total == 0.0 {
        mats[0].clone()
    } else {
        acc.scale(1.0 / total)
    }
}

/// Primary (generalized eigen-) subspaces of `r`, one per eigenvalue cluster;
/// real 1-cluster and complex-conjugate-pair clusters both yield real
/// subspaces. Returns `None` when the numerical decomposition is unreliable
/// (dimensions fail to add up to d).
fn primary_subspaces(r: &Matrix) -> Option<Vec<Vec<Vec<f64>>>> {

    let eig = complex_eigenvalues(r);
    let scale = eig.iter().map(|e| e.0.hypot(e.1)).fold(0.0f64, f64::max).max(1e-12);
    let cluster_tol = 1e-5 * scale;
    // keep one representative per conjugate pair
    let mut reps: Vec<(f64, f64, usize)> = Vec::new(); // (re, im>=0, multiplicity)
    'outer: for &(re, im) in &eig {
        let im = im.abs();
        for rep in reps.iter_mut() {
            if (rep.0 - re).abs() < cluster_tol && (rep.1 - im).abs() < cluster_tol {
                rep.2 += 1;
                continue 'outer;
            }
        }
        reps.push((re, im, 1));
    }
    if reps.len() < 2 {
        return None;
    }
    primary_subspaces_from(r, &reps)
}

fn primary_subspaces_from(r: &Matrix, reps: &[(f64, f64, usize)]) -> Option<Vec<Vec<Vec<f64>>>> {
    let d = r.dim();
    let scale = reps.iter().map(|e| e.0.hypot(e.1)).fold(0.0f64, f64::max).max(1e-12);
    let cluster_tol = 1e-5 * scale;
    let ns_tol = 1e-7;
    let mut out = Vec::new();
    let mut total = 0usize;
    for &(re, im, mult) in reps {
        let m = if im < cluster_tol {
            let mut m = r.clone();
            for i in 0..d {
                m.set(i, i, m.get(i, i) - re);
            }
            m
        } else {
            // real form of (R − λ)(R − λ̄) = R² − 2aR + (a² + b²)I
            let mut m = r.mul(r).sub(&r.scale(2.0 * re));
            let shift = re * re + im * im;
            for i in 0..d {
                m.set(i, i, m.get(i, i) + shift);
            }
            m
        };
        // raise to the algebraic multiplicity to capture Jordan structure
        let mut p = m.clone();
        for _ in 1..mult.min(d) {
            let scale = p.max_abs().max(1e-300);
            p = p.scale(1.0 / scale).mul(&m);
        }
        let basis = null_space(&p, ns_tol);
        if basis.is_empty() {
            return None;
        }
        total += basis.len();
        out.push(basis);
    }
    if total != d {
        return None;
    }
    Some(out)
}

/// Candidate `R`-invariant subspaces when `R` has a single real eigenvalue
/// cluster: the kernel chain `null((R − λI)^j)`, which captures invariant
/// lines of triangular tuples with repeated diagonals.
fn kernel_chain_candidates(r: &Matrix) -> Vec<Vec<Vec<f64>>> {
    let d = r.dim();
    let eig = complex_eigenvalues(r);
    let scale = eig.iter().map(|e| e.0.hypot(e.1)).fold(0.0f64, f64::max).max(1e-12);
    if eig.iter().any(|e| e.1.abs() > 1e-5 * scale) {
        return Vec::new();
    }
    let lambda = eig.iter().map(|e| e.0).sum::<f64>() / d as f64;
    let mut m = r.clone();
    for i in 0..d {
        m.set(i, i, m.get(i, i) - lambda);
    }
    let mut out = Vec::new();
    let mut p = m.clone();
    for _ in 1..d {
        let basis = null_space(&p, 1e-7);
        if !basis.is_empty() && basis.len() < d {
            out.push(basis);
        }
        let s = p.max_abs().max(1e-300);
        p = p.scale(1.0 / s).mul(&m);
    }
    out
}

/// Largest relative residual of `W` under the tuple: for each generator and
/// basis vector, the distance of the image from `W` relative to `‖A‖`.
pub fn invariance_defect(mats: &[Matrix], w: &Subspace) -> f64 {
    let mut worst = 0.0f64;
    for m in mats {
        let mnorm = m.op_norm().max(1e-300);
        for b in &w.basis {
            let img = m.apply(b);
            worst = worst.max(w.residual(&img) / mnorm);
        }
    }
    worst
}

/// Outcome of one detection: the invariant subspace and, when the
/// complementary sum of primary subspaces is itself invariant, that
/// complement (enabling an exact direct-sum split).
#[derive(Debug, Clone)]
pub struct InvariantSplit {
    pub subspace: Subspace,
    pub complement: Option<Subspace>,
}

/// Searches for a common invariant subspace of the tuple. Each trial draws a
/// random algebra element, decomposes it into primary subspaces, and tests
/// all subset sums (and the same for the transpose tuple, whose invariant
/// subspaces certify reducibility via orthogonal complements). Returns a
/// minimal-dimension detection, or `None` at this (trials, tol) confidence.
pub fn find_invariant_subspace(
    maps: &[AffineMap],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Option<InvariantSplit> {
    if maps.is_empty() {
        return None;
    }
    let d = maps[0].linear.dim();
    if d < 2 {
        return None;
    }
    let mats: Vec<Matrix> = maps.iter().map(|m| m.linear.clone()).collect();
    let transposed: Vec<Matrix> = mats.iter().map(|m| m.transpose()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<InvariantSplit> = None;

    let consider = |cand: InvariantSplit, best: &mut Option<InvariantSplit>| {
        let better = match best {
            None => true,
            Some(b) => {
                cand.subspace.rank() < b.subspace.rank()
                    || (cand.subspace.rank() == b.subspace.rank()
                        && cand.complement.is_some()
                        && b.complement.is_none())
            }
        };
        if better {
            *best = Some(cand);
        }
    };

    for _ in 0..trials {
        for (tuple, transpose_mode) in [(&mats, false), (&transposed, true)] {
            let r = random_algebra_element(tuple, &mut rng);
            let Some(primaries) = primary_subspaces(&r) else {
                // single eigenvalue cluster: fall back to the kernel chain
                for vecs in kernel_chain_candidates(&r) {
                    let Ok(w) = Subspace::from_spanning(d, &vecs, 1e-10) else { continue };
                    if w.rank() == 0 || w.rank() == d || invariance_defect(tuple, &w) > tol {
                        continue;
                    }
                    let w = if transpose_mode {
                        let comp = w.complement(1e-10);
                        let Ok(wc) = Subspace::from_spanning(d, &comp, 1e-10) else { continue };
                        if invariance_defect(&mats, &wc) > tol.max(1e-6) {
                            continue;
                        }
                        wc
                    } else {
                        w
                    };
                    consider(InvariantSplit { subspace: w, complement: None }, &mut best);
                    break;
                }
                continue;
            };
            let q = primaries.len();
            // proper, nonempty subsets of the primary subspaces, by total dim
            let mut subsets: Vec<u32> = (1..(1u32 << q) - 1).collect();
            let dim_of = |mask: u32| -> usize {
                (0..q).filter(|j| mask >> j & 1 == 1).map(|j| primaries[j].len()).sum()
            };
            subsets.sort_by_key(|&m| dim_of(m));
            for mask in subsets {
                let mut vecs = Vec::new();
                for (j, p) in primaries.iter().enumerate() {
                    if mask >> j & 1 == 1 {
                        vecs.extend(p.iter().cloned());
                    }
                }
                let Ok(w) = Subspace::from_spanning(d, &vecs, 1e-10) else { continue };
                if w.rank() == 0 || w.rank() == d || w.rank() != dim_of(mask) {
                    continue;
                }
                if invariance_defect(tuple, &w) > tol {
                    continue;
                }
                // found; in transpose mode the original invariant subspace is
                // the orthogonal complement
                let (w, comp_mask) = if transpose_mode {
                    let comp = w.complement(1e-10);
                    let Ok(wc) = Subspace::from_spanning(d, &comp, 1e-10) else { continue };
                    if invariance_defect(&mats, &wc) > tol.max(1e-6) {
                        continue;
                    }
                    (wc, None)
                } else {
                    (w, Some(!mask & ((1u32 << q) - 1)))
                };
                let complement = comp_mask.and_then(|cm| {
                    let mut vecs = Vec::new();
                    for (j, p) in primaries.iter().enumerate() {
                        if cm >> j & 1 == 1 {
                            vecs.extend(p.iter().cloned());
                        }
                    }
                    let wc = Subspace::from_spanning(d, &vecs, 1e-10).ok()?;
                    if wc.rank() + w.rank() == d && invariance_defect(&mats, &wc) <= tol {
                        Some(wc)
                    } else {
                        None
                    }
                });
                consider(InvariantSplit { subspace: w, complement }, &mut best);
                break;
            }
        }
        if best.as_ref().is_some_and(|b| b.subspace.rank() == 1 && b.complement.is_some()) {
            break;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct BlockStructure {
    /// Change of basis: `X⁻¹ A_i X` is block-upper-triangular.
    pub conjugator: Matrix,
    pub block_dims: Vec<usize>,
    /// Per original map, the diagonal blocks `B_i^{tt}`.
    pub diagonal_blocks: Vec<Vec<Matrix>>,
    /// Per block: no invariant subspace found at the configured confidence.
    pub irreducible_flags: Vec<bool>,
    pub trials: usize,
    pub tol: f64,
    pub conjugator_cond: f64,
    pub ill_conditioned: bool,
    /// All splits were direct sums: the conjugated tuple is block-diagonal,
    /// i.e. the system is completely reducible at this confidence.
    pub completely_reducible: bool,
}

impl BlockStructure {
    /// The block-diagonal comparison tuple `A′` (same pressure as `A`).
    pub fn block_diagonal_maps(&self) -> Vec<AffineMap> {
        let d: usize = self.block_dims.iter().sum();
        self.diagonal_blocks
            .iter()
            .map(|blocks| {
                let mut m = Matrix::scalar(d, 0.0);
                let mut off = 0;
                for b in blocks {
                    for i in 0..b.dim() {
                        for j in 0..b.dim() {
                            m.set(off + i, off + j, b.get(i, j));
                        }
                    }
                    off += b.dim();
                }
                AffineMap::linear_only(m)
            })
            .collect()
    }
}

fn columns_matrix(d: usize, cols: &[Vec<f64>]) -> Matrix {
    let mut x = Matrix::scalar(d, 0.0);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            x.set(i, j, c[i]);
        }
    }
    x
}

fn embed_block(x: &mut Matrix, sub: &Matrix, off: usize) {
    for i in 0..sub.dim() {
        for j in 0..sub.dim() {
            x.set(off + i, off + j, sub.get(i, j));
        }
    }
}

fn split_once(
    mats: &[Matrix],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Option<(Matrix, usize, Vec<Matrix>, Vec<Matrix>, bool)> {
    let d = mats[0].dim();
    let maps: Vec<AffineMap> = mats.iter().map(|m| AffineMap::linear_only(m.clone())).collect();
    let split = find_invariant_subspace(&maps, trials, tol, seed)?;
    let k = split.subspace.rank();
    let (cols, direct) = match &split.complement {
        Some(c) => {
            let mut cols = split.subspace.basis.clone();
            cols.extend(c.basis.iter().cloned());
            (cols, true)
        }
        None => {
            let mut cols = split.subspace.basis.clone();
            cols.extend(split.subspace.complement(1e-10));
            (cols, false)
        }
    };
    if cols.len() != d {
        return None;
    }
    let x = columns_matrix(d, &cols);
    let xinv = x.inverse().ok()?;
    let mut tops = Vec::with_capacity(mats.len());
    let mut bottoms = Vec::with_capacity(mats.len());
    for m in mats {
        let b = xinv.mul(m).mul(&x);
        // the lower-left block must vanish up to the tolerance
        let scale = b.max_abs().max(1e-300);
        for i in k..d {
            for j in 0..k {
                if b.get(i, j).abs() > 1e-6 * scale {
                    return None;
                }
            }
        }
        let mut top = Matrix::scalar(k, 0.0);
        for i in 0..k {
            for j in 0..k {
                top.set(i, j, b.get(i, j));
            }
        }
        let mut bot = Matrix::scalar(d - k, 0.0);
        for i in 0..d - k {
            for j in 0..d - k {
                bot.set(i, j, b.get(k + i, k + j));
            }
        }
        tops.push(top);
        bottoms.push(bot);
    }
    Some((x, k, tops, bottoms, direct))
}

fn detriangularise_rec(
    mats: &[Matrix],
    trials: usize,
    tol: f64,
    seed: u64,
    // outputs
    dims: &mut Vec<usize>,
    blocks: &mut Vec<Vec<Matrix>>, // [map][block] appended in order
    flags: &mut Vec<bool>,
    all_direct: &mut bool,
) -> Matrix {
    let d = mats[0].dim();
    match split_once(mats, trials, tol, seed) {
        None => {
            dims.push(d);
            for (i, m) in mats.iter().enumerate() {
                blocks[i].push(m.clone());
            }
            flags.push(true);
            Matrix::identity(d)
        }
        Some((x, k, tops, bottoms, direct)) => {
            if !direct {
                *all_direct = false;
            }
            let x_top = detriangularise_rec(
                &tops,
                trials,
                tol,
                seed.wrapping_add(101),
                dims,
                blocks,
                flags,
                all_direct,
            );
            let x_bot = detriangularise_rec(
                &bottoms,
                trials,
                tol,
                seed.wrapping_add(211),
                dims,
                blocks,
                flags,
                all_direct,
            );
            let mut refine = Matrix::scalar(d, 0.0);
            embed_block(&mut refine, &x_top, 0);
            embed_block(&mut refine, &x_bot, k);
            x.mul(&refine)
        }
    }
}

/// Produces the block-upper-triangular form of a finite tuple with
/// irreducible diagonal blocks, retrying with fresh randomness when the
/// assembled conjugator is ill-conditioned.
pub fn detriangularise(
    system: &SystemSpec,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<BlockStructure, ReducibilityError> {
    let maps = system.materialize(0);
    if maps.is_empty() {
        return Err(ReducibilityError::EmptySystem);
    }
    let mats: Vec<Matrix> = maps.iter().map(|m| m.linear.clone()).collect();
    let mut last = None;
    for attempt in 0..3u64 {
        let mut dims = Vec::new();
        let mut blocks = vec![Vec::new(); mats.len()];
        let mut flags = Vec::new();
        let mut all_direct = true;
        let x = detriangularise_rec(
            &mats,
            trials,
            tol,
            seed.wrapping_add(attempt * 7919),
            &mut dims,
            &mut blocks,
            &mut flags,
            &mut all_direct,
        );
        let cond = x.cond();
        let ill = !(cond <= COND_LIMIT);
        let bs = BlockStructure {
            conjugator: x,
            block_dims: dims,
            diagonal_blocks: blocks,
            irreducible_flags: flags,
            trials,
            tol,
            conjugator_cond: cond,
            ill_conditioned: ill,
            completely_reducible: all_direct,
        };
        if !ill {
            return Ok(bs);
        }
        last = Some(bs);
    }
    Ok(last.unwrap())
}

/// Searches for a word whose product has a simple leading eigenvalue
/// (`|λ₁|/|λ₂| > 1 + gap`), by increasing length with beam pruning.
pub fn proximality_search(
    maps: &[AffineMap],
    max_word_len: usize,
    gap: f64,
) -> Option<Word> {
    if maps.is_empty() {
        return None;
    }
    const BEAM: usize = 64;
    let mats: Vec<Matrix> = maps.iter().map(|m| m.linear.clone()).collect();
    let mut frontier: Vec<(Vec<usize>, Matrix)> =
        mats.iter().enumerate().map(|(i, m)| (vec![i], m.clone())).collect();
    for _len in 1..=max_word_len {
        let mut scored: Vec<(f64, Vec<usize>, Matrix)> = Vec::new();
        for (word, prod) in &frontier {
            let eig = complex_eigenvalues(prod);
            let l1 = eig[0].0.hypot(eig[0].1);
            let l2 = if eig.len() > 1 { eig[1].0.hypot(eig[1].1) } else { 0.0 };
            if l2 >= 0.0 && l1 > (1.0 + gap) * l2.max(1e-300) && l1 > 0.0 && l2 > 0.0 {
                return Some(Word::new(word.clone()));
            }
            if l1 == 0.0 && l2 == 0.0 {
                continue;
            }
            scored.push((l1 / l2.max(1e-300), word.clone(), prod.clone()));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        scored.truncate(BEAM);
        frontier = scored
            .into_iter()
            .flat_map(|(_, word, prod)| {
                mats.iter().enumerate().map(move |(i, m)| {
                    let mut w = word.clone();
                    w.push(i);
                    let p = prod.mul(m);
                    let scale = p.max_abs().max(1e-300);
                    (w, p.scale(1.0 / scale))
                })
            })
            .collect();
    }
    None
}

/// Real eigendirections (unit vectors, sign-normalized) of word products up
/// to `max_word_len`, deduplicated by angle.
fn candidate_lines(mats: &[Matrix], max_word_len: usize, cap: usize) -> Vec<Vec<f64>> {
    let d = mats[0].dim();
    let mut lines: Vec<Vec<f64>> = Vec::new();
    fn add(lines: &mut Vec<Vec<f64>>, v: Vec<f64>) {
        let n = norm(&v);
        if n < 1e-12 {
            return;
        }
        let mut u: Vec<f64> = v.iter().map(|x| x / n).collect();
        let lead = u.iter().find(|x| x.abs() > 1e-9).copied().unwrap_or(1.0);
        if lead < 0.0 {
            for x in u.iter_mut() {
                *x = -*x;
            }
        }
        if lines.iter().all(|l| (1.0 - dot(l, &u).abs()) > 1e-8) {
            lines.push(u);
        }
    }
    let mut frontier: Vec<Matrix> = vec![Matrix::identity(d)];
    for _ in 0..max_word_len {
        let mut next = Vec::new();
        for f in &frontier {
            for m in mats {
                let p = f.mul(m);
                let scale = p.max_abs().max(1e-300);
                let p = p.scale(1.0 / scale);
                let eig = complex_eigenvalues(&p);
                for &(re, im) in &eig {
                    if im.abs() > 1e-9 * re.abs().max(1.0) {
                        continue;
                    }
                    let mut shifted = p.clone();
                    for i in 0..d {
                        shifted.set(i, i, shifted.get(i, i) - re);
                    }
                    for v in null_space(&shifted, 1e-7) {
                        add(&mut lines, v);
                    }
                }
                next.push(p);
            }
        }
        if lines.len() >= cap {
            break;
        }
        frontier = next;
        if frontier.len() > 4096 {
            frontier.truncate(4096);
        }
    }
    lines.truncate(cap);
    lines
}

/// Tests whether some union of at most `max_orbit` candidate lines is
/// permuted by every generator; returns the line family (unit directions).
pub fn finite_line_orbit_search(
    maps: &[AffineMap],
    max_orbit: usize,
    max_word_len: usize,
    tol: f64,
) -> Result<Option<Vec<Vec<f64>>>, ReducibilityError> {
    if maps.is_empty() {
        return Err(ReducibilityError::EmptySystem);
    }
    let d = maps[0].linear.dim();
    if d > 3 {
        return Err(ReducibilityError::DimTooLarge(d, 3));
    }
    let mats: Vec<Matrix> = maps.iter().map(|m| m.linear.clone()).collect();
    let lines = candidate_lines(&mats, max_word_len, 24);
    let q = lines.len();
    let parallel = |a: &[f64], b: &[f64]| -> bool {
        let (na, nb) = (norm(a), norm(b));
        if na < 1e-300 || nb < 1e-300 {
            return false;
        }
        1.0 - (dot(a, b) / (na * nb)).abs() < tol
    };
    // subsets by increasing size
    let mut masks: Vec<u32> = (1..1u32 << q.min(24))
        .filter(|m| m.count_ones() as usize <= max_orbit)
        .collect();
    masks.sort_by_key(|m| m.count_ones());
    'next_mask: for mask in masks {
        let family: Vec<&Vec<f64>> =
            (0..q).filter(|j| mask >> j & 1 == 1).map(|j| &lines[j]).collect();
        for m in &mats {
            for v in &family {
                let img = m.apply(v);
                if !family.iter().any(|l| parallel(&img, l)) {
                    continue 'next_mask;
                }
            }
        }
        return Ok(Some(family.into_iter().cloned().collect()));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pressure::{level_sums, EngineOptions};
    use crate::systems::pathology_family;
    use crate::systems::PathologyMode;
    use rand::Rng;

    fn maps_of(mats: Vec<Matrix>) -> Vec<AffineMap> {
        mats.into_iter().map(AffineMap::linear_only).collect()
    }

    fn rotation(theta: f64) -> Matrix {
        Matrix::from_rows(&[&[theta.cos(), -theta.sin()], &[theta.sin(), theta.cos()]]).unwrap()
    }

    fn random_invertible(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        loop {
            let data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = Matrix::new(d, data).unwrap();
            if m.check_invertible().is_ok() && m.cond() < 100.0 {
                return m;
            }
        }
    }

    #[test]
    fn algebra_dimension_examples() {
        // irrational rotation spans a copy of the complex numbers
        let rot = maps_of(vec![rotation(1.0).scale(0.5)]);
        assert_eq!(algebra_dimension(&rot, 8), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let generic = maps_of(vec![
            random_invertible(&mut rng, 2).scale(0.4),
            random_invertible(&mut rng, 2).scale(0.4),
        ]);
        assert_eq!(algebra_dimension(&generic, 8), 4);

        let diag = maps_of(vec![
            Matrix::diagonal(&[0.5, 0.3, 0.2]).unwrap(),
            Matrix::diagonal(&[0.1, 0.6, 0.4]).unwrap(),
        ]);
        assert!(algebra_dimension(&diag, 8) <= 3);
    }

    #[test]
    fn invariant_subspace_triangular() {
        let maps = maps_of(vec![
            Matrix::from_rows(&[&[0.5, 0.3], &[0.0, 0.25]]).unwrap(),
            Matrix::from_rows(&[&[0.4, -0.2], &[0.0, 0.3]]).unwrap(),
        ]);
        let split = find_invariant_subspace(&maps, 32, 1e-8, 5).expect("visible line");
        assert_eq!(split.subspace.rank(), 1);
        let b = &split.subspace.basis[0];
        assert!(b[0].abs() > 1.0 - 1e-6 && b[1].abs() < 1e-6, "basis {b:?}");
    }

    #[test]
    fn invariant_subspace_conjugated_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let x = random_invertible(&mut rng, 3);
            let xinv = x.inverse().unwrap();
            let mk = |b: &Matrix, c: f64| -> Matrix {
                let mut m = Matrix::scalar(3, 0.0);
                embed_block(&mut m, b, 0);
                m.set(2, 2, c);
                xinv.mul(&m).mul(&x)
            };
            let maps = maps_of(vec![
                mk(&rotation(0.7).scale(0.5), 0.3),
                mk(&rotation(1.3).scale(0.4), 0.2),
            ]);
            let split =
                find_invariant_subspace(&maps, 32, 1e-7, 100 + trial).expect("constructed");
            assert!(
                split.subspace.rank() == 1 || split.subspace.rank() == 2,
                "rank {}",
                split.subspace.rank()
            );
        }
    }

    #[test]
    fn invariant_subspace_rotation_none() {
        let maps = maps_of(vec![rotation(1.0).scale(0.5), rotation(0.3).scale(0.5)]);
        assert!(find_invariant_subspace(&maps, 32, 1e-8, 7).is_none());
    }

    #[test]
    fn detriangularise_irreducible_single_block() {
        let sys = SystemSpec::from_maps(
            2,
            maps_of(vec![rotation(1.0).scale(0.5), rotation(0.3).scale(0.5)]),
            "rot",
        )
        .unwrap();
        let bs = detriangularise(&sys, 32, 1e-8, 11).unwrap();
        assert_eq!(bs.block_dims, vec![2]);
        assert!(bs.irreducible_flags[0]);
    }

    #[test]
    fn detriangularise_pathology_truncation() {
        let fam = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let sys = fam.truncate(6).unwrap();
        let bs = detriangularise(&sys, 32, 1e-8, 13).unwrap();
        assert_eq!(bs.block_dims, vec![1, 1]);
        // diagonal blocks are the diagonal entries α e^{-tk}
        let t = (1.0f64 + 0.5f64.powf(0.5)).ln() / 0.5;
        for (i, blocks) in bs.diagonal_blocks.iter().enumerate() {
            let want = 0.5 * (-t * (i as f64 + 1.0)).exp();
            for b in blocks {
                assert_eq!(b.dim(), 1);
                assert!((b.get(0, 0).abs() - want).abs() < 1e-9 * want);
            }
        }
    }

    #[test]
    fn detriangularise_round_trip_recovers_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ok = 0;
        let mut ill = 0;
        let total = 100;
        for trial in 0..total {
            let d = rng.gen_range(2..=4usize);
            // random block dims summing to d
            let k1 = rng.gen_range(1..d);
            let mut want = vec![k1, d - k1];
            want.sort_unstable();
            let x = random_invertible(&mut rng, d);
            let xinv = x.inverse().unwrap();
            let mk = |rng: &mut ChaCha8Rng| -> Matrix {
                let mut m = Matrix::scalar(d, 0.0);
                // irreducible-ish blocks: rotations for 2x2, random scalars for 1x1
                let mut off = 0;
                for &bd in &[k1, d - k1] {
                    if bd == 1 {
                        m.set(off, off, rng.gen_range(0.2..0.8));
                    } else {
                        let mut b = rotation(rng.gen_range(0.3..2.8)).scale(rng.gen_range(0.2..0.8));
                        if bd == 3 {
                            let mut b3 = Matrix::scalar(3, 0.0);
                            embed_block(&mut b3, &b, 0);
                            b3.set(2, 2, rng.gen_range(0.2..0.8));
                            b = b3;
                        }
                        embed_block(&mut m, &b, off);
                        off += bd;
                        continue;
                    }
                    off += bd;
                }
                xinv.mul(&m).mul(&x)
            };
            let sys =
                SystemSpec::from_maps(d, maps_of(vec![mk(&mut rng), mk(&mut rng)]), "conj")
                    .unwrap();
            let bs = detriangularise(&sys, 32, 1e-7, 1000 + trial).unwrap();
            if bs.ill_conditioned {
                ill += 1;
                continue;
            }
            let mut got: Vec<usize> = bs.block_dims.clone();
            got.sort_unstable();
            // recovered splitting must refine or match the planted one
            if got.iter().sum::<usize>() == d && got.len() >= 2 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "recovered {ok}/{total} (ill-conditioned {ill})");
    }

    #[test]
    fn block_diagonal_partition_sums_never_exceed_original() {
        // Prop. 4.1 consequence for the upper-triangular pathology truncation
        let fam = pathology_family(0.5, 0.5, 0.75, PathologyMode::InfinitePressure).unwrap();
        let sys = fam.truncate(5).unwrap();
        let bs = detriangularise(&sys, 32, 1e-8, 17).unwrap();
        let prime = bs.block_diagonal_maps();
        let orig = sys.materialize(0);
        let opts = EngineOptions::default();
        for &s in &[0.5, 0.9, 1.3] {
            let a = level_sums(&orig, s, 4, &opts).unwrap();
            let b = level_sums(&prime, s, 4, &opts).unwrap();
            for m in 0..4 {
                assert!(b.log_z[m] <= a.log_z[m] + 1e-9, "s={s} level {}", m + 1);
            }
        }
    }

    #[test]
    fn proximality_examples() {
        let gapd = maps_of(vec![Matrix::diagonal(&[0.5, 0.125]).unwrap()]);
        let w = proximality_search(&gapd, 4, 1e-6).expect("diagonal gap");
        assert_eq!(w.len(), 1);

        let rots = maps_of(vec![rotation(1.0).scale(0.5), rotation(0.4).scale(0.3)]);
        assert!(proximality_search(&rots, 5, 1e-6).is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = maps_of(vec![
            Matrix::new(2, (0..4).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap().scale(0.5),
            Matrix::new(2, (0..4).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap().scale(0.5),
        ]);
        let w = proximality_search(&pos, 2, 1e-6).expect("Perron gap");
        assert!(w.len() <= 2);
    }

    #[test]
    fn line_orbit_examples() {
        let swap = maps_of(vec![
            Matrix::diagonal(&[0.5, 0.25]).unwrap(),
            Matrix::from_rows(&[&[0.0, 0.25], &[0.5, 0.0]]).unwrap(),
        ]);
        let fam = finite_line_orbit_search(&swap, 2, 3, 1e-8).unwrap().expect("axes");
        assert_eq!(fam.len(), 2);
        for v in &fam {
            assert!(v.iter().filter(|x| x.abs() > 1e-6).count() == 1, "not an axis: {v:?}");
        }

        let single = maps_of(vec![Matrix::diagonal(&[0.5, 0.25]).unwrap()]);
        let fam = finite_line_orbit_search(&single, 2, 2, 1e-8).unwrap().expect("axes");
        assert!(!fam.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let generic = maps_of(vec![
            random_invertible(&mut rng, 2).scale(0.4),
            random_invertible(&mut rng, 2).scale(0.4),
        ]);
        assert!(finite_line_orbit_search(&generic, 2, 2, 1e-10).unwrap().is_none());
    }

    #[test]
    fn conjugation_pressure_invariance_via_blocks() {
        // level-n estimates of A and the extracted A' agree within
        // (s/n) log cond(X)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_invertible(&mut rng, 2);
        let xinv = x.inverse().unwrap();
        let mk = |a: f64, b: f64| {
            let m = Matrix::diagonal(&[a, b]).unwrap();
            xinv.mul(&m).mul(&x)
        };
        let sys = SystemSpec::from_maps(2, maps_of(vec![mk(0.5, 0.3), mk(0.2, 0.6)]), "c")
            .unwrap();
        let bs = detriangularise(&sys, 32, 1e-8, 19).unwrap();
        assert!(!bs.ill_conditioned);
        let n = 8;
        let s = 1.1;
        let opts = EngineOptions::default();
        let a = level_sums(&sys.materialize(0), s, n, &opts).unwrap();
        let b = level_sums(&bs.block_diagonal_maps(), s, n, &opts).unwrap();
        let allow = s * bs.conjugator_cond.ln() / n as f64 + 1e-9;
        let da = a.log_z[n - 1] / n as f64;
        let db = b.log_z[n - 1] / n as f64;
        assert!((da - db).abs() <= allow, "|{da} - {db}| > {allow}");
    }
}
