//! Analysis form of the PCM dynamics.
//!
//! For an arrival, the PCM update can be rewritten as a plain Riccati step
//! on modified matrices (`Ã`, `B`, `Q̃`, `C̃`, `R̃`). Both arrival and
//! dropout steps are then homographic transforms `H_m(Φ, P)` of a
//! Hamiltonian `Φ`, so a run of steps collapses to one transform of a
//! matrix product.

use std::ops::Mul;

use crate::error::{Error, Result};
use crate::estimator::{measurement_update, pcm_step, UpdateForm};
use crate::linalg::{block_diag, condition, inverse, resymmetrize, spd_inverse, sym_inv_sqrt, symmetrize, vstack, Mat, MAX_CONDITION};
use crate::plant::PlantModel;

/// Condition number above which a Φ product is flagged.
pub const PRODUCT_CONDITION_WARN: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
pub struct TildeMatrices {
    /// `Ǎ_t = A_t − λ B_t Q̌_t T_tᵀ S_t`
    pub a_check: Mat,
    /// `Q̌_t = (Q_t^{-1} + λ T_tᵀ T_t)^{-1}`
    pub q_check: Mat,
    pub s_tilde: Mat,
    pub a_tilde: Mat,
    pub b_tilde: Mat,
    pub q_tilde: Mat,
    pub c_tilde: Mat,
    pub r_tilde: Mat,
}

pub fn tilde_matrices(model: &PlantModel, t: usize) -> Result<TildeMatrices> {
    let lambda = model.lambda(t)?;
    let a = model.a(t)?;
    let b = model.b(t)?;
    let q = model.q(t)?;
    let c_next = model.c(t + 1)?;
    let r_next = model.r(t + 1)?;
    let sens = model.sensitivity_matrices(t)?;
    let (s, tt) = (&sens.s_mat, &sens.t_mat);
    let rows = s.nrows();
    let n = model.n();

    let (q_check, a_check, s_tilde) = if lambda == 0.0 {
        (q.clone(), a.clone(), Mat::zeros(rows, n))
    } else {
        let q_check = spd_inverse(
            &(spd_inverse(&q, "Q_t")? + tt.transpose() * tt * lambda),
            "Q_t^{-1} + λ T^T T",
        )?;
        let a_check = &a - &b * &q_check * tt.transpose() * s * lambda;
        let weight = Mat::identity(rows, rows) + tt * &q * tt.transpose() * lambda;
        let s_tilde = sym_inv_sqrt(&weight, "I + λ T Q T^T")? * s * lambda.sqrt();
        (q_check, a_check, s_tilde)
    };
    let a_check_inv = inverse(&a_check, "Ǎ_t")?;
    let b_tilde = &a_check_inv * &b;
    let sts = s_tilde.transpose() * &s_tilde;
    let a_tilde = &a_check + &b * &q_check * b_tilde.transpose() * &sts;
    let q_tilde = symmetrize(&(&q_check + &q_check * b_tilde.transpose() * &sts * &b_tilde * &q_check));
    let c_tilde = vstack(&[&s_tilde * &a_check_inv, c_next], n);
    let top = Mat::identity(rows, rows) + &s_tilde * &b_tilde * &q_check * b_tilde.transpose() * s_tilde.transpose();
    let r_tilde = block_diag(&symmetrize(&top), &r_next);
    Ok(TildeMatrices {
        a_check,
        q_check,
        s_tilde,
        a_tilde,
        b_tilde,
        q_tilde,
        c_tilde,
        r_tilde,
    })
}

/// PCM update for an arrival written as a Riccati step on the tilde matrices.
pub fn pcm_step_riccati_form(model: &PlantModel, p: &Mat, t: usize) -> Result<Mat> {
    let tm = tilde_matrices(model, t)?;
    let b = model.b(t)?;
    let x_pred = &tm.a_tilde * p * tm.a_tilde.transpose() + &b * &tm.q_tilde * b.transpose();
    measurement_update(&resymmetrize(x_pred, "tilde prediction"), &tm.c_tilde, &tm.r_tilde, UpdateForm::Auto)
}

/// A `2n × 2n` matrix held as four `n × n` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianBlock {
    pub b11: Mat,
    pub b12: Mat,
    pub b21: Mat,
    pub b22: Mat,
}

impl HamiltonianBlock {
    pub fn new(b11: Mat, b12: Mat, b21: Mat, b22: Mat) -> Self {
        HamiltonianBlock { b11, b12, b21, b22 }
    }

    pub fn identity(n: usize) -> Self {
        HamiltonianBlock::new(Mat::identity(n, n), Mat::zeros(n, n), Mat::zeros(n, n), Mat::identity(n, n))
    }

    /// The general member of the Hamiltonian set: `[[A, G A^{-T}], [H A, (I + H G) A^{-T}]]`
    /// for invertible `A` and symmetric `G`, `H`.
    pub fn from_parts(a: &Mat, g: &Mat, h: &Mat) -> Result<Self> {
        let n = a.nrows();
        let a_inv_t = inverse(a, "Φ₁₁")?.transpose();
        let g = symmetrize(g);
        let h = symmetrize(h);
        Ok(HamiltonianBlock::new(
            a.clone(),
            &g * &a_inv_t,
            &h * a,
            (Mat::identity(n, n) + &h * &g) * a_inv_t,
        ))
    }

    pub fn n(&self) -> usize {
        self.b11.nrows()
    }

    pub fn to_matrix(&self) -> Mat {
        let n = self.n();
        let mut m = Mat::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.b11);
        m.view_mut((0, n), (n, n)).copy_from(&self.b12);
        m.view_mut((n, 0), (n, n)).copy_from(&self.b21);
        m.view_mut((n, n), (n, n)).copy_from(&self.b22);
        m
    }

    pub fn from_matrix(m: &Mat) -> Result<Self> {
        if !m.is_square() || !m.nrows().is_multiple_of(2) {
            return Err(Error::Domain(format!("{:?} is not a 2n x 2n matrix", m.shape())));
        }
        let n = m.nrows() / 2;
        Ok(HamiltonianBlock::new(
            m.view((0, 0), (n, n)).into_owned(),
            m.view((0, n), (n, n)).into_owned(),
            m.view((n, 0), (n, n)).into_owned(),
            m.view((n, n), (n, n)).into_owned(),
        ))
    }

    /// `J = [[0, I], [−I, 0]]`.
    pub fn j_matrix(n: usize) -> Mat {
        let mut j = Mat::zeros(2 * n, 2 * n);
        for i in 0..n {
            j[(i, n + i)] = 1.0;
            j[(n + i, i)] = -1.0;
        }
        j
    }

    /// `‖ΦᵀJΦ − J‖_F`.
    pub fn symplectic_residual(&self) -> f64 {
        let phi = self.to_matrix();
        let j = Self::j_matrix(self.n());
        (phi.transpose() * &j * &phi - j).norm()
    }

    /// `Φ₁₂Φ₁₁ᵀ`, the controllability-like block.
    pub fn gain_block(&self) -> Mat {
        &self.b12 * self.b11.transpose()
    }

    /// `Φ₁₁ᵀΦ₂₁`, the observability-like block.
    pub fn info_block(&self) -> Mat {
        self.b11.transpose() * &self.b21
    }

    pub fn condition(&self) -> f64 {
        condition(&self.to_matrix())
    }

    /// Writes the full matrix as CSV rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let m = self.to_matrix();
        for i in 0..m.nrows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

impl Mul for &HamiltonianBlock {
    type Output = HamiltonianBlock;

    fn mul(self, rhs: &HamiltonianBlock) -> HamiltonianBlock {
        HamiltonianBlock::new(
            &self.b11 * &rhs.b11 + &self.b12 * &rhs.b21,
            &self.b11 * &rhs.b12 + &self.b12 * &rhs.b22,
            &self.b21 * &rhs.b11 + &self.b22 * &rhs.b21,
            &self.b21 * &rhs.b12 + &self.b22 * &rhs.b22,
        )
    }
}

/// `H_m(Φ, P) = (Φ₁₁P + Φ₁₂)(Φ₂₁P + Φ₂₂)^{-1}`, re-symmetrized.
pub fn homographic(phi: &HamiltonianBlock, p: &Mat) -> Result<Mat> {
    let num = &phi.b11 * p + &phi.b12;
    let den = &phi.b21 * p + &phi.b22;
    let cond = condition(&den);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::TransformUndefined { cond });
    }
    let den_t_inv = den
        .transpose()
        .lu()
        .solve(&num.transpose())
        .ok_or(Error::TransformUndefined { cond })?;
    Ok(resymmetrize(den_t_inv.transpose(), "homographic transform"))
}

/// The `(A, G, H)` of one PCM step `P ↦ [(A P Aᵀ + G)^{-1} + H]^{-1}`.
fn step_parts(model: &PlantModel, t: usize, gamma: bool) -> Result<(Mat, Mat, Mat)> {
    let b = model.b(t)?;
    if !gamma {
        let g = &b * model.q(t)? * b.transpose();
        return Ok((model.a(t)?, g, Mat::zeros(model.n(), model.n())));
    }
    let tm = tilde_matrices(model, t)?;
    let g = &b * &tm.q_tilde * b.transpose();
    let h = tm.c_tilde.transpose() * spd_inverse(&tm.r_tilde, "R̃_{t+1}")? * &tm.c_tilde;
    Ok((tm.a_tilde, g, h))
}

/// `Φ_{t+1}`: the Hamiltonian whose homographic transform maps `P_{t|t}` to
/// `P_{t+1|t+1}` for the given arrival flag.
pub fn build_phi(model: &PlantModel, t: usize, gamma: bool) -> Result<HamiltonianBlock> {
    let (a, g, h) = step_parts(model, t, gamma)?;
    HamiltonianBlock::from_parts(&a, &g, &h)
}

/// `Φ_1, …, Φ_N` for `gammas[k] = γ_{k+1}`, in application order.
pub fn phi_sequence(model: &PlantModel, gammas: &[bool]) -> Result<Vec<HamiltonianBlock>> {
    gammas
        .iter()
        .enumerate()
        .map(|(k, &g)| build_phi(model, k, g).map_err(|e| e.at(k)))
        .collect()
}

/// `Φ_N ⋯ Φ_1` for factors given in application order (`phis[0]` acts first).
pub fn compose(phis: &[HamiltonianBlock], n: usize) -> HamiltonianBlock {
    phis.iter().fold(HamiltonianBlock::identity(n), |acc, phi| phi * &acc)
}

/// The map `P ↦ A (P^{-1} + H)^{-1} Aᵀ + G` with `G, H ⪰ 0`.
///
/// Maps of this form are closed under composition, and composing them
/// keeps all three parameters bounded where the explicit `Φ` product grows
/// like the ratio of its stable and unstable eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiMap {
    pub a: Mat,
    pub g: Mat,
    pub h: Mat,
}

impl RiccatiMap {
    pub fn identity(n: usize) -> Self {
        RiccatiMap { a: Mat::identity(n, n), g: Mat::zeros(n, n), h: Mat::zeros(n, n) }
    }

    /// `next ∘ self`.
    pub fn then(&self, next: &RiccatiMap) -> Result<RiccatiMap> {
        let n = self.a.nrows();
        // I + G₁H₂ has the spectrum of I + G₁^{1/2} H₂ G₁^{1/2} ⪰ I
        let m = Mat::identity(n, n) + &self.g * &next.h;
        let lu = m.lu();
        let solve = |rhs: &Mat| lu.solve(rhs).ok_or(Error::TransformUndefined { cond: f64::INFINITY });
        let m_inv_a = solve(&self.a)?;
        let m_inv_g = solve(&self.g)?;
        Ok(RiccatiMap {
            a: &next.a * &m_inv_a,
            g: symmetrize(&(&next.g + &next.a * m_inv_g * next.a.transpose())),
            h: symmetrize(&(&self.h + self.a.transpose() * &next.h * &m_inv_a)),
        })
    }

    /// `A P (I + H P)^{-1} Aᵀ + G`, defined for every `P ⪰ 0`.
    pub fn apply(&self, p: &Mat) -> Result<Mat> {
        let n = p.nrows();
        let m = Mat::identity(n, n) + &self.h * p;
        let cond = condition(&m);
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(Error::TransformUndefined { cond });
        }
        // P (I + H P)^{-1} = ((I + P H)^{-1} P)ᵀ
        let core = (Mat::identity(n, n) + p * &self.h)
            .lu()
            .solve(p)
            .ok_or(Error::TransformUndefined { cond })?
            .transpose();
        Ok(resymmetrize(&self.a * core * self.a.transpose() + &self.g, "composed PCM map"))
    }
}

/// The composite map of `gammas` (`gammas[k] = γ_{k+1}`) as one `RiccatiMap`.
///
/// Each step predicts with `(A_t, G_t)` and then corrects with `H_t`, so
/// the sequence regroups as the prediction maps `(A_t, G_t, H_{t-1})`
/// followed by a final correction `(I, 0, H_N)`.
pub fn compose_steps(model: &PlantModel, gammas: &[bool]) -> Result<RiccatiMap> {
    let n = model.n();
    let mut map = RiccatiMap::identity(n);
    let mut pending = Mat::zeros(n, n);
    for (t, &g) in gammas.iter().enumerate() {
        let (a, gm, h) = step_parts(model, t, g).map_err(|e| e.at(t))?;
        map = map.then(&RiccatiMap { a, g: gm, h: pending })?;
        pending = h;
    }
    map.then(&RiccatiMap { a: Mat::identity(n, n), g: Mat::zeros(n, n), h: pending })
}

#[derive(Debug, Clone)]
pub struct ProductPcm {
    pub p: Mat,
    /// The explicit product `Φ_N ⋯ Φ_1`.
    pub product: HamiltonianBlock,
    pub condition: f64,
    /// Set when the explicit product is poorly conditioned; `p` does not
    /// depend on it.
    pub ill_conditioned: bool,
}

/// `P_{t|t}` as one transform of the composed step maps, alongside the
/// explicit product `Φ_t ⋯ Φ_1` whose homographic transform it equals.
///
/// The explicit product is only good for a handful of arrivals on a fast
/// filter (its condition number grows geometrically), so the returned PCM
/// comes from the structured composition.
pub fn pcm_via_product(model: &PlantModel, gammas: &[bool], p0: &Mat) -> Result<ProductPcm> {
    let phis = phi_sequence(model, gammas)?;
    let product = compose(&phis, model.n());
    let cond = product.condition();
    if cond > PRODUCT_CONDITION_WARN {
        log::debug!("Φ product over {} steps has condition number {cond:.3e}", gammas.len());
    }
    let p = compose_steps(model, gammas)?.apply(p0)?;
    Ok(ProductPcm {
        p,
        product,
        condition: cond,
        ill_conditioned: cond > PRODUCT_CONDITION_WARN,
    })
}

/// Step-by-step PCM recursion, `[P_{0|0}, P_{1|1}, …]`.
pub fn pcm_sequence(model: &PlantModel, gammas: &[bool], p0: &Mat) -> Result<Vec<Mat>> {
    let mut out = Vec::with_capacity(gammas.len() + 1);
    out.push(p0.clone());
    for (t, &g) in gammas.iter().enumerate() {
        let next = pcm_step(model, out.last().expect("nonempty"), g, t).map_err(|e| e.at(t))?;
        out.push(next);
    }
    Ok(out)
}
