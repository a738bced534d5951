//! Convergence diagnostics for the PCM recursion.
//!
//! The PCM map of each step is a homographic transform of a Hamiltonian
//! matrix. Membership of a product of such matrices in the sets `ℋ_l`,
//! `ℋ_r`, `ℋ_lr` decides whether the composite map is strictly contractive
//! in the Riemannian metric on positive definite matrices. This module
//! classifies Φ's, evaluates the rank conditions that characterize those
//! sets for time-invariant plants, and estimates contraction empirically.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_sequence, DropoutModel};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, condition, hstack, matrix_power, spd_inverse, sym_inv_sqrt, sym_sqrt, symmetrize, vstack, Mat, MAX_CONDITION};
use crate::pcm::{build_phi, homographic, tilde_matrices, HamiltonianBlock};
use crate::plant::PlantModel;
use crate::rng::stream_rng;

/// Strict positive definiteness: minimum eigenvalue above this fraction of
/// the block's spectral norm.
pub const STRICT_PD_REL: f64 = 1e-9;

/// Default tolerance for the Hamiltonian identity and the `⪰ 0` conditions.
pub const DEFAULT_CLASS_TOL: f64 = 1e-9;

/// `δ(P, Q) = sqrt(Σ ln² λ_i(P Q^{-1}))`, computed from the symmetric
/// whitened matrix `L^{-1} P L^{-T}` with `Q = L Lᵀ`.
pub fn riemannian_distance(p: &Mat, q: &Mat) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Domain(format!("shape mismatch {:?} vs {:?}", p.shape(), q.shape())));
    }
    cholesky(p, "P").map_err(|_| Error::Domain("P is not positive definite".into()))?;
    let l = cholesky(q, "Q").map_err(|_| Error::Domain("Q is not positive definite".into()))?.l();
    let left = l
        .solve_lower_triangular(&symmetrize(p))
        .ok_or_else(|| Error::Domain("Q factor is singular".into()))?;
    let whitened = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Domain("Q factor is singular".into()))?;
    let eig = SymmetricEigen::new(symmetrize(&whitened)).eigenvalues;
    if eig.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("whitened matrix lost positive definiteness".into()));
    }
    Ok(eig.iter().map(|v| v.ln().powi(2)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HamiltonianClass {
    pub in_h: bool,
    pub in_hl: bool,
    pub in_hr: bool,
    pub in_hlr: bool,
}

impl HamiltonianClass {
    fn from_flags(in_h: bool, strict_info: bool, strict_gain: bool) -> Self {
        let in_hl = in_h && strict_info;
        let in_hr = in_h && strict_gain;
        HamiltonianClass { in_h, in_hl, in_hr, in_hlr: in_hl && in_hr }
    }
}

fn spectral_extremes(m: &Mat) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    (eig.min(), eig.amax())
}

/// `M ≻ 0` in the relative sense used throughout the classification.
pub fn strictly_positive(m: &Mat) -> bool {
    let (lo, scale) = spectral_extremes(m);
    scale > 0.0 && lo > STRICT_PD_REL * scale
}

fn nearly_psd(m: &Mat, tol: f64) -> bool {
    let (lo, scale) = spectral_extremes(m);
    lo >= -tol * scale.max(1.0)
}

/// Decides membership in `ℋ`, `ℋ_l`, `ℋ_r`, `ℋ_lr`.
///
/// The Hamiltonian identity is checked relative to `max(1, ‖Φ‖_F²)`; the
/// semidefinite conditions allow eigenvalues down to `−tol·max(1, ‖block‖)`.
pub fn classify_hamiltonian(phi: &HamiltonianBlock, tol: f64) -> HamiltonianClass {
    let scale = phi.to_matrix().norm().powi(2).max(1.0);
    let symplectic = phi.symplectic_residual() <= tol * scale;
    let cond = condition(&phi.b11);
    let invertible = cond.is_finite() && cond <= MAX_CONDITION;
    if !(symplectic && invertible) {
        return HamiltonianClass::default();
    }
    let gain = phi.gain_block();
    let info = phi.info_block();
    let in_h = nearly_psd(&gain, tol) && nearly_psd(&info, tol);
    HamiltonianClass::from_flags(in_h, strictly_positive(&info), strictly_positive(&gain))
}

/// The two Gramian-like sums whose nonsingularity decides whether
/// `Φ_m ⋯ Φ_1` lies in `ℋ_l` (`observability`) and `ℋ_r` (`controllability`).
#[derive(Debug, Clone)]
pub struct ProductGramians {
    pub observability: Mat,
    pub controllability: Mat,
}

/// Gramian sums for `phis` in application order (`phis[0]` acts first),
/// using only the individual blocks.
pub fn product_gramians(phis: &[HamiltonianBlock]) -> Result<ProductGramians> {
    let n = phis.first().map(|p| p.n()).ok_or_else(|| Error::Domain("empty Φ sequence".into()))?;
    for (i, phi) in phis.iter().enumerate() {
        let cond = condition(&phi.b11);
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(Error::Domain(format!("Φ₁₁ of factor {i} is singular (condition {cond:.3e})")));
        }
    }
    // Σ_i (Φ_{i-1,11} ⋯ Φ_{1,11})ᵀ Φ_{i,11}ᵀ Φ_{i,21} (Φ_{i-1,11} ⋯ Φ_{1,11})
    let mut prefix = Mat::identity(n, n);
    let mut observability = Mat::zeros(n, n);
    for phi in phis {
        observability += prefix.transpose() * phi.info_block() * &prefix;
        prefix = &phi.b11 * prefix;
    }
    // Σ_i (Φ_{m,11} ⋯ Φ_{i+1,11}) Φ_{i,12} Φ_{i,11}ᵀ (Φ_{m,11} ⋯ Φ_{i+1,11})ᵀ
    let mut suffix = Mat::identity(n, n);
    let mut controllability = Mat::zeros(n, n);
    for phi in phis.iter().rev() {
        controllability += &suffix * phi.gain_block() * suffix.transpose();
        suffix *= &phi.b11;
    }
    Ok(ProductGramians {
        observability: symmetrize(&observability),
        controllability: symmetrize(&controllability),
    })
}

/// Class of `Φ_m ⋯ Φ_1` (application order) from the determinant criteria,
/// without forming the product.
pub fn product_membership(phis: &[HamiltonianBlock]) -> Result<HamiltonianClass> {
    for (i, phi) in phis.iter().enumerate() {
        if !classify_hamiltonian(phi, DEFAULT_CLASS_TOL).in_h {
            return Err(Error::Domain(format!("factor {i} is not in the Hamiltonian set")));
        }
    }
    let g = product_gramians(phis)?;
    Ok(HamiltonianClass::from_flags(
        true,
        strictly_positive(&g.observability),
        strictly_positive(&g.controllability),
    ))
}

/// Arrival instants `1 ≤ t_1 < … < t_p ≤ N` of a length-`N` window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutPattern {
    arrivals: Vec<usize>,
    n_total: usize,
}

impl DropoutPattern {
    pub fn new(arrivals: Vec<usize>, n_total: usize) -> Result<Self> {
        if arrivals.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("arrival instants must be strictly increasing".into()));
        }
        if arrivals.first().is_some_and(|&t| t == 0) || arrivals.last().is_some_and(|&t| t > n_total) {
            return Err(Error::Domain(format!("arrival instants must lie in [1, {n_total}]")));
        }
        Ok(DropoutPattern { arrivals, n_total })
    }

    /// `gammas[k]` is `γ_{k+1}`.
    pub fn from_gammas(gammas: &[bool]) -> Self {
        DropoutPattern {
            arrivals: gammas.iter().enumerate().filter(|(_, &g)| g).map(|(k, _)| k + 1).collect(),
            n_total: gammas.len(),
        }
    }

    pub fn to_gammas(&self) -> Vec<bool> {
        let mut g = vec![false; self.n_total];
        for &t in &self.arrivals {
            g[t - 1] = true;
        }
        g
    }

    pub fn arrivals(&self) -> &[usize] {
        &self.arrivals
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// `t_j − t_{j−1} − 1` for `j = 1..=p`, with `t_0 = 0`.
    fn gaps(&self) -> Vec<usize> {
        let mut prev = 0;
        self.arrivals
            .iter()
            .map(|&t| {
                let d = t - prev - 1;
                prev = t;
                d
            })
            .collect()
    }
}

/// Time-invariant factors of the arrival (`[1]`) and dropout (`[2]`) maps.
#[derive(Debug, Clone)]
pub struct LtiFactors {
    /// `Ã`
    pub a1: Mat,
    /// `A`
    pub a2: Mat,
    /// `B Q̃^{1/2}`
    pub g1: Mat,
    /// `B Q^{1/2}`
    pub g2: Mat,
    /// `R̃^{-1/2} C̃`
    pub h1: Mat,
}

pub fn lti_factors(model: &PlantModel) -> Result<LtiFactors> {
    if !model.is_lti() {
        return Err(Error::Unsupported("rank conditions require a time-invariant plant".into()));
    }
    let tm = tilde_matrices(model, 0)?;
    let b = model.b(0)?;
    Ok(LtiFactors {
        a1: tm.a_tilde.clone(),
        a2: model.a(0)?,
        g1: &b * sym_sqrt(&tm.q_tilde, "Q̃")?,
        g2: &b * sym_sqrt(&model.q(0)?, "Q")?,
        h1: sym_inv_sqrt(&tm.r_tilde, "R̃")? * &tm.c_tilde,
    })
}

impl LtiFactors {
    pub fn n(&self) -> usize {
        self.a2.nrows()
    }

    /// Stacked observability-like matrix of a pattern.
    ///
    /// Blocks `H`, `H A₁A₂^{d_p}`, `H A₁A₂^{d_{p−1}} A₁A₂^{d_p}`, … (`p`
    /// blocks, `d_j = t_j − t_{j−1} − 1`). Its Gram matrix, congruent by
    /// `A₁A₂^{N−t_p}`, is the observability sum of `Φ_1 Φ_2 ⋯ Φ_N`.
    pub fn observability_matrix(&self, pattern: &DropoutPattern) -> Mat {
        let n = self.n();
        let gaps = pattern.gaps();
        let p = gaps.len();
        let mut blocks = Vec::with_capacity(p);
        let mut tail = Mat::identity(n, n);
        for k in 0..p {
            if k > 0 {
                let d = gaps[p - k];
                tail = &self.a1 * matrix_power(&self.a2, d) * tail;
            }
            blocks.push(&self.h1 * &tail);
        }
        vstack(&blocks, n)
    }

    /// Controllability-like matrix `C_n` of a pattern; its Gram matrix is
    /// the controllability sum of `Φ_1 Φ_2 ⋯ Φ_N`.
    pub fn controllability_matrix(&self, pattern: &DropoutPattern) -> Mat {
        let n = self.n();
        let arrivals = pattern.arrivals();
        let p = arrivals.len();
        // t_0 = 0, t_{p+1} = N + 1
        let mut t = Vec::with_capacity(p + 2);
        t.push(0);
        t.extend_from_slice(arrivals);
        t.push(pattern.n_total() + 1);

        let dropout_run = |i: usize| -> Vec<Mat> {
            let len = t[i] - t[i - 1] - 1;
            (0..len).map(|k| matrix_power(&self.a2, k) * &self.g2).collect()
        };
        let lead = matrix_power(&self.a2, t[1] - 1);

        let mut columns: Vec<Mat> = Vec::new();
        // (A₂)^{t_1−1} [G₁, A₁A₂^{d_2}G₁, …]
        let mut walk = Mat::identity(n, n);
        for j in 1..=p {
            if j > 1 {
                walk = walk * &self.a1 * matrix_power(&self.a2, t[j] - t[j - 1] - 1);
            }
            columns.push(&lead * &walk * &self.g1);
        }
        // dropouts before the first arrival
        columns.extend(dropout_run(1));
        // (A₂)^{t_1−1} A₁ [C_{n,2}, (A₂^{d_2}A₁) C_{n,3}, …]
        if p >= 1 {
            let base = &lead * &self.a1;
            let mut inner = Mat::identity(n, n);
            for j in 2..=p + 1 {
                if j > 2 {
                    inner = inner * matrix_power(&self.a2, t[j - 1] - t[j - 2] - 1) * &self.a1;
                }
                let prefix = &base * &inner;
                columns.extend(dropout_run(j).into_iter().map(|c| &prefix * c));
            }
        }
        if columns.is_empty() {
            return Mat::zeros(n, 0);
        }
        hstack(&columns, n)
    }
}

pub fn build_ob(model: &PlantModel, pattern: &DropoutPattern) -> Result<Mat> {
    Ok(lti_factors(model)?.observability_matrix(pattern))
}

pub fn build_cn(model: &PlantModel, pattern: &DropoutPattern) -> Result<Mat> {
    Ok(lti_factors(model)?.controllability_matrix(pattern))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Column,
    Row,
}

/// Singular-value rank test with threshold `max(rows, cols)·ε·σ_max`.
pub fn rank_full(m: &Mat, mode: RankMode) -> bool {
    let target = match mode {
        RankMode::Column => m.ncols(),
        RankMode::Row => m.nrows(),
    };
    if m.nrows() == 0 || m.ncols() == 0 {
        return target == 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return false;
    }
    let thr = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > thr).count() == target
}

/// `(A, H)` observable: `col{H, HA, …, HA^{n−1}}` has full column rank.
pub fn observable(a: &Mat, h: &Mat) -> bool {
    let n = a.nrows();
    let blocks: Vec<Mat> = (0..n).map(|k| h * matrix_power(a, k)).collect();
    rank_full(&vstack(&blocks, n), RankMode::Column)
}

/// `(A, G)` controllable: `[G, AG, …, A^{n−1}G]` has full row rank.
pub fn controllable(a: &Mat, g: &Mat) -> bool {
    let n = a.nrows();
    let blocks: Vec<Mat> = (0..n).map(|k| matrix_power(a, k) * g).collect();
    rank_full(&hstack(&blocks, n), RankMode::Row)
}

/// Which of the sufficient rank conditions hold, with witnessing exponents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficientConditions {
    /// `m` with `(A₁A₂^m, H₁)` observable.
    pub observability_witnesses: Vec<usize>,
    /// `m` with `(A₁A₂^m, G₁)` controllable.
    pub controllability_a1_g1: Vec<usize>,
    /// `(A₂, G₂)` controllable.
    pub controllability_a2_g2: bool,
    /// `m` with `(A₂^m A₁, G₂)` controllable.
    pub controllability_a2_a1_g2: Vec<usize>,
    pub hl_reachable: bool,
    pub hr_reachable: bool,
    pub hlr_reachable: bool,
}

pub fn sufficient_conditions(model: &PlantModel) -> Result<SufficientConditions> {
    let f = lti_factors(model)?;
    let n = f.n();
    let mut obs = Vec::new();
    let mut c1 = Vec::new();
    let mut c3 = Vec::new();
    for m in 0..n {
        let a2m = matrix_power(&f.a2, m);
        if observable(&(&f.a1 * &a2m), &f.h1) {
            obs.push(m);
        }
        if controllable(&(&f.a1 * &a2m), &f.g1) {
            c1.push(m);
        }
        if controllable(&(&a2m * &f.a1), &f.g2) {
            c3.push(m);
        }
    }
    let c2 = controllable(&f.a2, &f.g2);
    let hl = !obs.is_empty();
    let hr = !c1.is_empty() || c2 || !c3.is_empty();
    Ok(SufficientConditions {
        observability_witnesses: obs,
        controllability_a1_g1: c1,
        controllability_a2_g2: c2,
        controllability_a2_a1_g2: c3,
        hl_reachable: hl,
        hr_reachable: hr,
        hlr_reachable: hl && hr,
    })
}

/// Membership of `Φ_1 Φ_2 ⋯ Φ_N` for one dropout pattern, decided both by
/// the Gramian criteria and by the stacked rank tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternVerdict {
    pub gammas: Vec<u8>,
    pub class: HamiltonianClass,
    pub ob_full_rank: bool,
    pub cn_full_rank: bool,
}

impl PatternVerdict {
    pub fn agrees(&self) -> bool {
        self.ob_full_rank == self.class.in_hl && self.cn_full_rank == self.class.in_hr
    }
}

/// Classifies `Φ_1 ⋯ Φ_N` for the pattern `gammas` (`gammas[k] = γ_{k+1}`).
pub fn pattern_verdict(model: &PlantModel, factors: &LtiFactors, gammas: &[bool]) -> Result<PatternVerdict> {
    let mut phis = crate::pcm::phi_sequence(model, gammas)?;
    // the leftmost factor Φ_1 acts last
    phis.reverse();
    let pattern = DropoutPattern::from_gammas(gammas);
    Ok(PatternVerdict {
        gammas: gammas.iter().map(|&g| g as u8).collect(),
        class: product_membership(&phis)?,
        ob_full_rank: rank_full(&factors.observability_matrix(&pattern), RankMode::Column),
        cn_full_rank: rank_full(&factors.controllability_matrix(&pattern), RankMode::Row),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSweep {
    pub max_length: usize,
    pub patterns: usize,
    pub in_hl: usize,
    pub in_hr: usize,
    pub in_hlr: usize,
    /// Patterns where a rank test and the Gramian criterion disagree.
    pub disagreements: Vec<PatternVerdict>,
}

/// Every pattern of length `1..=max_length`.
pub fn pattern_sweep(model: &PlantModel, max_length: usize) -> Result<PatternSweep> {
    if max_length == 0 || max_length > 16 {
        return Err(Error::Usage(format!("pattern length {max_length} outside [1, 16]")));
    }
    let factors = lti_factors(model)?;
    let mut sweep = PatternSweep { max_length, patterns: 0, in_hl: 0, in_hr: 0, in_hlr: 0, disagreements: vec![] };
    for len in 1..=max_length {
        for m in 0..(1u64 << len) {
            let seq = crate::channel::ArrivalSequence::from_index(m, len);
            let v = pattern_verdict(model, &factors, seq.bits())?;
            sweep.patterns += 1;
            sweep.in_hl += v.class.in_hl as usize;
            sweep.in_hr += v.class.in_hr as usize;
            sweep.in_hlr += v.class.in_hlr as usize;
            if !v.agrees() {
                sweep.disagreements.push(v);
            }
        }
    }
    Ok(sweep)
}

/// Everything known about the PCM map of one arrival pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub gammas: Vec<u8>,
    /// Class of each `Φ_t`.
    pub steps: Vec<HamiltonianClass>,
    /// Class of `Φ_N ⋯ Φ_1`, the map `P_0 ↦ P_N`, from the Gramian criteria.
    pub composite: HamiltonianClass,
    /// Class of the explicitly formed product.
    pub composite_direct: HamiltonianClass,
    pub product_condition: f64,
    /// Rank tests for `Φ_1 ⋯ Φ_N`; absent for time-varying plants.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_tests: Option<PatternVerdict>,
    pub contraction: RatioStats,
}

pub fn classify_pattern(model: &PlantModel, gammas: &[bool], pairs: usize, seed: u64) -> Result<PatternReport> {
    if gammas.is_empty() {
        return Err(Error::Usage("pattern must be nonempty".into()));
    }
    let phis = crate::pcm::phi_sequence(model, gammas)?;
    let steps = phis.iter().map(|p| classify_hamiltonian(p, DEFAULT_CLASS_TOL)).collect();
    let composite = product_membership(&phis)?;
    let product = crate::pcm::compose(&phis, model.n());
    let rank_tests = if model.is_lti() {
        Some(pattern_verdict(model, &lti_factors(model)?, gammas)?)
    } else {
        None
    };
    let mut rng = stream_rng(seed, 0);
    Ok(PatternReport {
        gammas: gammas.iter().map(|&g| g as u8).collect(),
        steps,
        composite,
        composite_direct: classify_hamiltonian(&product, DEFAULT_CLASS_TOL),
        product_condition: product.condition(),
        rank_tests,
        contraction: RatioStats::from_samples(contraction_ratios(&phis, model.n(), pairs, &mut rng)?),
    })
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `U Λ Uᵀ` with Haar `U` and `log₁₀ Λ` uniform on `[−2, 2]`.
pub fn random_pdm<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let u = random_orthogonal(n, rng);
    let lambda = Mat::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| 10f64.powf(rng.gen_range(-2.0..=2.0))));
    symmetrize(&(&u * lambda * u.transpose()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub count: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl RatioStats {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(|a, b| a.total_cmp(b));
        let count = samples.len();
        let q = |f: f64| -> f64 {
            if count == 0 {
                return f64::NAN;
            }
            samples[((count - 1) as f64 * f).round() as usize]
        };
        RatioStats {
            count,
            max: samples.last().copied().unwrap_or(f64::NAN),
            min: samples.first().copied().unwrap_or(f64::NAN),
            mean: samples.iter().sum::<f64>() / count.max(1) as f64,
            p50: q(0.5),
            p90: q(0.9),
            p99: q(0.99),
        }
    }
}

/// Applies `phis` in order to `p`.
pub fn apply_sequence(phis: &[HamiltonianBlock], p: &Mat) -> Result<Mat> {
    phis.iter().try_fold(p.clone(), |acc, phi| homographic(phi, &acc))
}

/// Distance ratios `δ(F(P), F(Q)) / δ(P, Q)` over random pairs, where `F`
/// applies `phis` in order.
pub fn contraction_ratios<R: Rng + ?Sized>(phis: &[HamiltonianBlock], n: usize, pairs: usize, rng: &mut R) -> Result<Vec<f64>> {
    (0..pairs)
        .map(|_| {
            let p = random_pdm(n, rng);
            let q = random_pdm(n, rng);
            let before = riemannian_distance(&p, &q)?;
            let after = riemannian_distance(&apply_sequence(phis, &p)?, &apply_sequence(phis, &q)?)?;
            Ok(after / before)
        })
        .collect()
}

/// Empirical Lipschitz statistics of the composite PCM map of `gammas`
/// (`gammas[k] = γ_{k+1}`). The maximum is a lower bound of the true
/// Lipschitz constant.
pub fn estimate_contraction(model: &PlantModel, gammas: &[bool], trials: usize, seed: u64) -> Result<RatioStats> {
    let phis = crate::pcm::phi_sequence(model, gammas)?;
    let mut rng = stream_rng(seed, 0);
    Ok(RatioStats::from_samples(contraction_ratios(&phis, model.n(), trials, &mut rng)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Mean over sequences of `ln(max sampled ratio)`.
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sequences: usize,
    pub pairs_per_sequence: usize,
    pub window: usize,
    /// Whether the 95% interval lies strictly below zero.
    pub negative: bool,
}

/// Monte Carlo estimate of `E[ln Lip(F_{γ_1..γ_N})]` over channel windows,
/// with a normal-approximation 95% confidence interval.
pub fn estimate_expected_log_lipschitz(
    model: &PlantModel,
    channel: &DropoutModel,
    window: usize,
    sequence_samples: usize,
    pair_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if window == 0 {
        return Err(Error::Usage("window length must be at least 1".into()));
    }
    if sequence_samples < 2 || pair_samples == 0 {
        return Err(Error::Usage("need at least two sequences and one pair per sequence".into()));
    }
    channel.validate()?;
    // Per-step maps depend only on (t, γ); build them once.
    let maps: Vec<[HamiltonianBlock; 2]> = (0..window)
        .map(|t| Ok([build_phi(model, t, false)?, build_phi(model, t, true)?]))
        .collect::<Result<_>>()?;

    let logs: Vec<f64> = (0..sequence_samples as u64)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = stream_rng(seed, i);
            let seq = sample_sequence(channel, window, &mut rng)?;
            let phis: Vec<HamiltonianBlock> = seq
                .bits()
                .iter()
                .enumerate()
                .map(|(t, &g)| maps[t][g as usize].clone())
                .collect();
            let ratios = contraction_ratios(&phis, model.n(), pair_samples, &mut rng)?;
            Ok(ratios.into_iter().fold(f64::NEG_INFINITY, f64::max).ln())
        })
        .collect::<Result<_>>()?;

    let k = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / k;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let std_error = (var / k).sqrt();
    let half = 1.959_963_984_540_054 * std_error;
    Ok(LipschitzEstimate {
        mean,
        std_error,
        ci_low: mean - half,
        ci_high: mean + half,
        sequences: sequence_samples,
        pairs_per_sequence: pair_samples,
        window,
        negative: mean + half < 0.0,
    })
}

/// Checks that `P` is symmetric positive definite, returning its inverse.
pub fn pd_inverse(p: &Mat) -> Result<Mat> {
    spd_inverse(p, "P").map_err(|_| Error::Domain("matrix is not positive definite".into()))
}
