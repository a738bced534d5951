//! Plant description: nominal matrices, parametric-error Jacobians, noise
//! covariances and the design-parameter schedule.
//!
//! The plant is affine in the parametric error,
//! `A_t(ε) = A_t + Σ_k ε_k ∂A_t/∂ε_k` (likewise `B_t`, `C_t`), so the
//! Jacobians fully determine the perturbed dynamics.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config, Error, Result};
use crate::linalg::{cholesky, symmetrize, vstack, Mat, Vector};

/// A time-indexed quantity: constant, tabulated, or computed.
#[derive(Clone)]
pub enum Schedule<T> {
    Constant(T),
    /// Entry `t` is the value at time `t`; lookups past the end are errors.
    Table(Vec<T>),
    Func(Arc<dyn Fn(usize) -> T + Send + Sync>),
}

impl<T: Clone> Schedule<T> {
    pub fn at(&self, t: usize) -> Option<T> {
        match self {
            Schedule::Constant(v) => Some(v.clone()),
            Schedule::Table(v) => v.get(t).cloned(),
            Schedule::Func(f) => Some(f(t)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Schedule::Constant(_))
    }

    fn known_values(&self) -> Vec<T> {
        match self {
            Schedule::Constant(v) => vec![v.clone()],
            Schedule::Table(v) => v.clone(),
            Schedule::Func(f) => vec![f(0)],
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Schedule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Schedule::Table(v) => f.debug_tuple("Table").field(&v.len()).finish(),
            Schedule::Func(_) => f.write_str("Func(..)"),
        }
    }
}

/// Raw parts of a plant before validation.
#[derive(Debug, Clone)]
pub struct PlantParts {
    pub a: Schedule<Mat>,
    pub b: Schedule<Mat>,
    pub c: Schedule<Mat>,
    /// `∂A_t/∂ε_{t,k}` for `k = 1..n_e`.
    pub da: Schedule<Vec<Mat>>,
    pub db: Schedule<Vec<Mat>>,
    pub dc: Schedule<Vec<Mat>>,
    pub q: Schedule<Mat>,
    pub r: Schedule<Mat>,
    pub p0: Mat,
    pub x0_mean: Vector,
    pub mu: Schedule<f64>,
}

/// Validated plant. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PlantModel {
    n: usize,
    m: usize,
    p: usize,
    n_e: usize,
    parts: PlantParts,
}

/// Stacked sensitivity blocks `S_t` (rows × n) and `T_t` (rows × m).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPair {
    pub s_mat: Mat,
    pub t_mat: Mat,
}

impl PlantModel {
    pub fn new(parts: PlantParts) -> Result<Self> {
        let a0 = parts.a.at(0).ok_or_else(|| config("A schedule is empty"))?;
        let b0 = parts.b.at(0).ok_or_else(|| config("B schedule is empty"))?;
        let c0 = parts.c.at(0).ok_or_else(|| config("C schedule is empty"))?;
        let n = a0.nrows();
        let m = b0.ncols();
        let p = c0.nrows();
        let n_e = parts.da.at(0).map(|v| v.len()).ok_or_else(|| config("dA schedule is empty"))?;
        if n == 0 || m == 0 || p == 0 {
            return Err(config("state, noise and output dimensions must be positive"));
        }
        let model = PlantModel { n, m, p, n_e, parts };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let (n, m, p) = (self.n, self.m, self.p);
        let parts = &self.parts;
        for a in parts.a.known_values() {
            check_shape(&a, (n, n), "A")?;
        }
        for b in parts.b.known_values() {
            check_shape(&b, (n, m), "B")?;
        }
        for c in parts.c.known_values() {
            check_shape(&c, (p, n), "C")?;
        }
        for (sched, shape, name) in [
            (&parts.da, (n, n), "dA"),
            (&parts.db, (n, m), "dB"),
            (&parts.dc, (p, n), "dC"),
        ] {
            for blocks in sched.known_values() {
                if blocks.len() != self.n_e {
                    return Err(config(format!(
                        "{name} has {} Jacobian blocks, expected n_e = {}",
                        blocks.len(),
                        self.n_e
                    )));
                }
                for blk in &blocks {
                    check_shape(blk, shape, name)?;
                }
            }
        }
        for q in parts.q.known_values() {
            check_shape(&q, (m, m), "Q")?;
            cholesky(&symmetrize(&q), "Q")?;
        }
        for r in parts.r.known_values() {
            check_shape(&r, (p, p), "R")?;
            cholesky(&symmetrize(&r), "R")?;
        }
        check_shape(&parts.p0, (n, n), "P0")?;
        cholesky(&symmetrize(&parts.p0), "P0")?;
        if parts.x0_mean.len() != n {
            return Err(config(format!("x0_mean has length {}, expected {n}", parts.x0_mean.len())));
        }
        for mu in parts.mu.known_values() {
            check_mu(mu)?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn n_e(&self) -> usize {
        self.n_e
    }
    pub fn parts(&self) -> &PlantParts {
        &self.parts
    }

    /// Returns a copy with a constant design parameter.
    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        check_mu(mu)?;
        let mut parts = self.parts.clone();
        parts.mu = Schedule::Constant(mu);
        Ok(PlantModel { parts, ..self.clone() })
    }

    pub fn with_p0(&self, p0: Mat) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.p0 = p0;
        PlantModel::new(parts)
    }

    /// Whether every time-indexed quantity is constant.
    pub fn is_lti(&self) -> bool {
        let p = &self.parts;
        p.a.is_constant()
            && p.b.is_constant()
            && p.c.is_constant()
            && p.da.is_constant()
            && p.db.is_constant()
            && p.dc.is_constant()
            && p.q.is_constant()
            && p.r.is_constant()
            && p.mu.is_constant()
    }

    pub fn a(&self, t: usize) -> Result<Mat> {
        self.fetch(&self.parts.a, t, "A", (self.n, self.n))
    }
    pub fn b(&self, t: usize) -> Result<Mat> {
        self.fetch(&self.parts.b, t, "B", (self.n, self.m))
    }
    pub fn c(&self, t: usize) -> Result<Mat> {
        self.fetch(&self.parts.c, t, "C", (self.p, self.n))
    }
    pub fn q(&self, t: usize) -> Result<Mat> {
        self.fetch(&self.parts.q, t, "Q", (self.m, self.m)).map(|q| symmetrize(&q))
    }
    pub fn r(&self, t: usize) -> Result<Mat> {
        self.fetch(&self.parts.r, t, "R", (self.p, self.p)).map(|r| symmetrize(&r))
    }
    pub fn p0(&self) -> Mat {
        symmetrize(&self.parts.p0)
    }
    pub fn x0_mean(&self) -> &Vector {
        &self.parts.x0_mean
    }
    pub fn da(&self, t: usize) -> Result<Vec<Mat>> {
        self.fetch_blocks(&self.parts.da, t, "dA", (self.n, self.n))
    }
    pub fn db(&self, t: usize) -> Result<Vec<Mat>> {
        self.fetch_blocks(&self.parts.db, t, "dB", (self.n, self.m))
    }
    pub fn dc(&self, t: usize) -> Result<Vec<Mat>> {
        self.fetch_blocks(&self.parts.dc, t, "dC", (self.p, self.n))
    }

    pub fn mu(&self, t: usize) -> Result<f64> {
        let mu = self.parts.mu.at(t).ok_or_else(|| config(format!("mu schedule has no entry for t = {t}")))?;
        check_mu(mu)?;
        Ok(mu)
    }

    /// Sensitivity weight `λ_t = (1 − μ_t)/μ_t`.
    pub fn lambda(&self, t: usize) -> Result<f64> {
        let mu = self.mu(t)?;
        Ok((1.0 - mu) / mu)
    }

    pub fn a_perturbed(&self, t: usize, eps: &[f64]) -> Result<Mat> {
        perturb(self.a(t)?, &self.da(t)?, eps)
    }
    pub fn b_perturbed(&self, t: usize, eps: &[f64]) -> Result<Mat> {
        perturb(self.b(t)?, &self.db(t)?, eps)
    }
    pub fn c_perturbed(&self, t: usize, eps: &[f64]) -> Result<Mat> {
        perturb(self.c(t)?, &self.dc(t)?, eps)
    }

    /// `S_t` and `T_t`: for each error component `k`, the block
    /// `C_{t+1}·∂A_t/∂ε_{t,k}` followed by `∂C_{t+1}/∂ε_{t+1,k}·A_t`
    /// (with `B_t` in place of `A_t` for `T_t`), evaluated at zero error.
    pub fn sensitivity_matrices(&self, t: usize) -> Result<SensitivityPair> {
        let a = self.a(t)?;
        let b = self.b(t)?;
        let c_next = self.c(t + 1)?;
        let da = self.da(t)?;
        let db = self.db(t)?;
        let dc_next = self.dc(t + 1)?;
        let mut s_blocks = Vec::with_capacity(2 * self.n_e);
        let mut t_blocks = Vec::with_capacity(2 * self.n_e);
        for k in 0..self.n_e {
            s_blocks.push(&c_next * &da[k]);
            s_blocks.push(&dc_next[k] * &a);
            t_blocks.push(&c_next * &db[k]);
            t_blocks.push(&dc_next[k] * &b);
        }
        Ok(SensitivityPair {
            s_mat: vstack(&s_blocks, self.n),
            t_mat: vstack(&t_blocks, self.m),
        })
    }

    fn fetch(&self, s: &Schedule<Mat>, t: usize, name: &str, shape: (usize, usize)) -> Result<Mat> {
        let v = s.at(t).ok_or_else(|| config(format!("{name} schedule has no entry for t = {t}")))?;
        check_shape(&v, shape, name)?;
        Ok(v)
    }

    fn fetch_blocks(&self, s: &Schedule<Vec<Mat>>, t: usize, name: &str, shape: (usize, usize)) -> Result<Vec<Mat>> {
        let v = s.at(t).ok_or_else(|| config(format!("{name} schedule has no entry for t = {t}")))?;
        if v.len() != self.n_e {
            return Err(config(format!("{name} at t = {t} has {} blocks, expected {}", v.len(), self.n_e)));
        }
        for blk in &v {
            check_shape(blk, shape, name)?;
        }
        Ok(v)
    }

    /// The two-state benchmark plant with a single scalar error entering
    /// `A_t` through `[0.0198; 0]·ε·[0 5]`.
    pub fn benchmark(mu: f64) -> Self {
        let a = Mat::from_row_slice(2, 2, &[0.9802, 0.0196, 0.0, 0.9802]);
        let da = Mat::from_row_slice(2, 1, &[0.0198, 0.0]) * Mat::from_row_slice(1, 2, &[0.0, 5.0]);
        let parts = PlantParts {
            a: Schedule::Constant(a),
            b: Schedule::Constant(Mat::identity(2, 2)),
            c: Schedule::Constant(Mat::from_row_slice(1, 2, &[1.0, -1.0])),
            da: Schedule::Constant(vec![da]),
            db: Schedule::Constant(vec![Mat::zeros(2, 2)]),
            dc: Schedule::Constant(vec![Mat::zeros(1, 2)]),
            q: Schedule::Constant(Mat::from_row_slice(2, 2, &[1.9608, 0.0195, 0.0195, 1.9605])),
            r: Schedule::Constant(Mat::identity(1, 1)),
            p0: Mat::identity(2, 2),
            x0_mean: Vector::from_row_slice(&[1.0, 0.0]),
            mu: Schedule::Constant(mu),
        };
        PlantModel::new(parts).expect("benchmark plant is valid")
    }
}

fn check_shape(m: &Mat, shape: (usize, usize), name: &str) -> Result<()> {
    if m.shape() != shape {
        return Err(config(format!("{name} is {:?}, expected {:?}", m.shape(), shape)));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(config(format!("{name} has non-finite entries")));
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu <= 1.0 {
        Ok(())
    } else {
        Err(config(format!("design parameter mu = {mu} outside (0, 1]")))
    }
}

fn perturb(nominal: Mat, jac: &[Mat], eps: &[f64]) -> Result<Mat> {
    if eps.len() != jac.len() {
        return Err(config(format!("error vector has length {}, expected {}", eps.len(), jac.len())));
    }
    Ok(jac.iter().zip(eps).fold(nominal, |acc, (d, e)| acc + d * *e))
}

/// Draws the parametric error `ε_t` for each step.
pub trait ErrorSampler {
    fn sample<R: Rng + ?Sized>(&mut self, t: usize, n_e: usize, rng: &mut R) -> Vec<f64>;
}

/// Independent uniform components on `[−δ, δ]`; `δ = 0` gives the nominal plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformError {
    pub delta: f64,
}

impl ErrorSampler for UniformError {
    fn sample<R: Rng + ?Sized>(&mut self, _t: usize, n_e: usize, rng: &mut R) -> Vec<f64> {
        if self.delta == 0.0 {
            return vec![0.0; n_e];
        }
        (0..n_e).map(|_| rng.gen_range(-self.delta..=self.delta)).collect()
    }
}

impl<F> ErrorSampler for F
where
    F: FnMut(usize, usize) -> Vec<f64>,
{
    fn sample<R: Rng + ?Sized>(&mut self, t: usize, n_e: usize, _rng: &mut R) -> Vec<f64> {
        self(t, n_e)
    }
}

/// A realized plant trajectory over `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vector>,
    /// `C_t(ε_t) x_t + v_t`, before the channel gates it with `γ_t`.
    pub y: Vec<Vector>,
    /// Measurement noise `v_t`.
    pub v: Vec<Vector>,
    pub eps: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Signal delivered at `t`: `γ_t C_t(ε_t) x_t + v_t`.
    pub fn received(&self, t: usize, gamma: bool) -> &Vector {
        if gamma {
            &self.y[t]
        } else {
            &self.v[t]
        }
    }
}

struct NoiseFactor {
    cached: Option<Mat>,
}

impl NoiseFactor {
    fn new() -> Self {
        NoiseFactor { cached: None }
    }

    fn factor(&mut self, cov: Result<Mat>, constant: bool, name: &str, t: usize) -> Result<Mat> {
        if let Some(l) = &self.cached {
            return Ok(l.clone());
        }
        let cov = cov.map_err(|e| e.at(t))?;
        let l = cholesky(&cov, name).map_err(|e| e.at(t))?.l();
        if constant {
            self.cached = Some(l.clone());
        }
        Ok(l)
    }
}

fn gaussian<R: Rng + ?Sized>(factor: &Mat, rng: &mut R) -> Vector {
    let z = Vector::from_fn(factor.ncols(), |_, _| rng.sample(StandardNormal));
    factor * z
}

/// Simulates the perturbed plant for `horizon` steps.
///
/// Per step the draw order is `ε_t`, `v_t`, `w_t`; `x_0` is drawn first.
pub fn simulate_truth<S, R>(model: &PlantModel, horizon: usize, eps_sampler: &mut S, rng: &mut R) -> Result<Trajectory>
where
    S: ErrorSampler,
    R: Rng + ?Sized,
{
    if horizon == 0 {
        return Err(Error::Usage("horizon must be at least 1".into()));
    }
    let parts = model.parts();
    let p0_factor = cholesky(&model.p0(), "P0")?.l();
    let mut q_factor = NoiseFactor::new();
    let mut r_factor = NoiseFactor::new();

    let mut xs = Vec::with_capacity(horizon + 1);
    let mut ys = Vec::with_capacity(horizon + 1);
    let mut vs = Vec::with_capacity(horizon + 1);
    let mut eps_all = Vec::with_capacity(horizon + 1);

    let mut x = model.x0_mean() + gaussian(&p0_factor, rng);
    for t in 0..=horizon {
        let eps = eps_sampler.sample(t, model.n_e(), rng);
        let rl = r_factor.factor(model.r(t), parts.r.is_constant(), "R", t)?;
        let v = gaussian(&rl, rng);
        let y = model.c_perturbed(t, &eps).map_err(|e| e.at(t))? * &x + &v;
        let next = if t < horizon {
            let ql = q_factor.factor(model.q(t), parts.q.is_constant(), "Q", t)?;
            let w = gaussian(&ql, rng);
            let a = model.a_perturbed(t, &eps).map_err(|e| e.at(t))?;
            let b = model.b_perturbed(t, &eps).map_err(|e| e.at(t))?;
            Some(a * &x + b * w)
        } else {
            None
        };
        xs.push(x.clone());
        ys.push(y);
        vs.push(v);
        eps_all.push(eps);
        if let Some(nx) = next {
            x = nx;
        }
    }
    Ok(Trajectory { x: xs, y: ys, v: vs, eps: eps_all })
}
