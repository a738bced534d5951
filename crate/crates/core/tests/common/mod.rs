#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rseio_core::plant::{PlantModel, PlantParts, Schedule};

pub type Mat = DMatrix<f64>;

pub fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `L Lᵀ + floor·I` with standard normal `L`.
pub fn random_spd<R: Rng>(n: usize, floor: f64, rng: &mut R) -> Mat {
    let l = gaussian(n, n, rng);
    &l * l.transpose() / n as f64 + Mat::identity(n, n) * floor
}

/// Well-conditioned state matrix with spectral scale near `radius`.
pub fn random_state_matrix<R: Rng>(n: usize, radius: f64, rng: &mut R) -> Mat {
    loop {
        let a = Mat::identity(n, n) * radius + gaussian(n, n, rng) * (0.3 / (n as f64).sqrt());
        let sv = a.clone().singular_values();
        if sv.min() > 0.2 * radius {
            return a;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlantShape {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub n_e: usize,
    /// Scale of the Jacobian entries.
    pub jac: f64,
}

impl PlantShape {
    pub fn new(n: usize, m: usize, p: usize, n_e: usize) -> Self {
        PlantShape { n, m, p, n_e, jac: 0.2 }
    }
}

pub fn random_parts<R: Rng>(shape: PlantShape, mu: f64, rng: &mut R) -> PlantParts {
    let PlantShape { n, m, p, n_e, jac } = shape;
    let jacobians = |rows: usize, cols: usize, rng: &mut R| -> Vec<Mat> {
        (0..n_e).map(|_| gaussian(rows, cols, rng) * jac).collect()
    };
    PlantParts {
        a: Schedule::Constant(random_state_matrix(n, 0.95, rng)),
        b: Schedule::Constant(gaussian(n, m, rng)),
        c: Schedule::Constant(gaussian(p, n, rng)),
        da: Schedule::Constant(jacobians(n, n, rng)),
        db: Schedule::Constant(jacobians(n, m, rng)),
        dc: Schedule::Constant(jacobians(p, n, rng)),
        q: Schedule::Constant(random_spd(m, 0.3, rng)),
        r: Schedule::Constant(random_spd(p, 0.3, rng)),
        p0: random_spd(n, 0.3, rng),
        x0_mean: DVector::from_fn(n, |_, _| rng.sample(StandardNormal)),
        mu: Schedule::Constant(mu),
    }
}

pub fn random_plant<R: Rng>(shape: PlantShape, mu: f64, rng: &mut R) -> PlantModel {
    PlantModel::new(random_parts(shape, mu, rng)).expect("random plant is valid")
}

pub fn random_gammas<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < rate).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).abs().max()
}

pub fn rel_frob(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Minimizer of the regularized quadratic cost over `α = [x; w]`, mapped
/// through `[A B]`. Returns the state estimate and `[A B] M⁻¹ [A B]ᵀ` with
/// the measurement term removed from `M`, updated by the measurement.
pub fn quadratic_minimizer(
    model: &PlantModel,
    x_hat: &DVector<f64>,
    p: &Mat,
    y: &DVector<f64>,
    t: usize,
) -> (DVector<f64>, Mat) {
    let (n, m) = (model.n(), model.m());
    let a = model.a(t).unwrap();
    let b = model.b(t).unwrap();
    let c = model.c(t + 1).unwrap();
    let r_inv = model.r(t + 1).unwrap().try_inverse().unwrap();
    let lambda = model.lambda(t).unwrap();
    let sens = model.sensitivity_matrices(t).unwrap();

    let mut d = Mat::zeros(n + m, n + m);
    d.view_mut((0, 0), (n, n)).copy_from(&p.clone().try_inverse().unwrap());
    d.view_mut((n, n), (m, m)).copy_from(&model.q(t).unwrap().try_inverse().unwrap());
    let mut st = Mat::zeros(sens.s_mat.nrows(), n + m);
    st.view_mut((0, 0), (st.nrows(), n)).copy_from(&sens.s_mat);
    st.view_mut((0, n), (st.nrows(), m)).copy_from(&sens.t_mat);
    let mut f = Mat::zeros(n, n + m);
    f.view_mut((0, 0), (n, n)).copy_from(&a);
    f.view_mut((0, n), (n, m)).copy_from(&b);

    let regularized = &d + st.transpose() * &st * lambda;
    let hessian = &regularized + f.transpose() * c.transpose() * &r_inv * &c * &f;
    let mut alpha0 = DVector::zeros(n + m);
    alpha0.rows_mut(0, n).copy_from(x_hat);
    let rhs = &d * alpha0 + f.transpose() * c.transpose() * &r_inv * y;
    let alpha = hessian.clone().lu().solve(&rhs).unwrap();

    let x_prior = &f * regularized.try_inverse().unwrap() * f.transpose();
    let info = x_prior.try_inverse().unwrap() + c.transpose() * &r_inv * &c;
    (&f * alpha, info.try_inverse().unwrap())
}
