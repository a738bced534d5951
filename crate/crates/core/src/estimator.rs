//! Robust state estimation with intermittent observations, plus the
//! Kalman baselines it is compared against.
//!
//! One step maps `(x̂_{t|t}, P_{t|t})` and the packet received at `t+1` to
//! `(x̂_{t+1|t+1}, P_{t+1|t+1})`. When the packet carries no measurement
//! (`γ_{t+1} = 0`) the step is a nominal prediction. Otherwise the nominal
//! matrices are first adjusted to penalize the innovation's sensitivity to
//! parametric errors, weighted by `λ_t = (1 − μ_t)/μ_t`, and a Kalman-style
//! update follows.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{resymmetrize, spd_inverse, spd_solve, Mat, Vector};
use crate::plant::PlantModel;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub t: usize,
    pub x_hat: Vector,
    /// Pseudo-covariance matrix `P_{t|t}`.
    pub p_mat: Mat,
}

impl EstimatorState {
    pub fn new(t: usize, x_hat: Vector, p_mat: Mat) -> Self {
        EstimatorState { t, x_hat, p_mat }
    }

    /// `x̂_{0|0} = E{x_0}`, `P_{0|0} = P_0`.
    pub fn initial(model: &PlantModel) -> Self {
        EstimatorState::new(0, model.x0_mean().clone(), model.p0())
    }
}

/// Nominal matrices after sensitivity adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedMatrices {
    pub p_hat: Mat,
    pub q_hat: Mat,
    pub b_hat: Mat,
    pub a_hat: Mat,
}

/// Computes `P̂_{t|t}`, `Q̂_t`, `B̂_t`, `Â_t` from `P_{t|t}`.
///
/// With `λ_t = 0` or vanishing sensitivities the nominal matrices are
/// returned unchanged.
pub fn adjust_matrices(model: &PlantModel, p: &Mat, t: usize) -> Result<AdjustedMatrices> {
    let lambda = model.lambda(t)?;
    let a = model.a(t)?;
    let b = model.b(t)?;
    let q = model.q(t)?;
    let sens = model.sensitivity_matrices(t)?;
    let (s, tt) = (&sens.s_mat, &sens.t_mat);
    if lambda == 0.0 || (s.iter().all(|v| *v == 0.0) && tt.iter().all(|v| *v == 0.0)) {
        return Ok(AdjustedMatrices { p_hat: p.clone(), q_hat: q, b_hat: b, a_hat: a });
    }
    let n = model.n();
    let rows = s.nrows();

    let p_inv = spd_inverse(p, "P_{t|t}")?;
    let q_inv = spd_inverse(&q, "Q_t")?;
    let sts = s.transpose() * s;
    let p_hat = spd_inverse(&(p_inv + &sts * lambda), "P_{t|t}^{-1} + λ S^T S")?;
    let inner = Mat::identity(rows, rows) + s * p * s.transpose() * lambda;
    let q_hat = spd_inverse(
        &(q_inv + tt.transpose() * spd_solve(&inner, tt, "I + λ S P S^T")? * lambda),
        "Q_t^{-1} + λ T^T (I + λ S P S^T)^{-1} T",
    )?;
    let b_hat = &b - &a * &p_hat * s.transpose() * tt * lambda;
    let a_hat = (&a - &b_hat * &q_hat * tt.transpose() * s * lambda) * (Mat::identity(n, n) - &p_hat * &sts * lambda);
    Ok(AdjustedMatrices { p_hat, q_hat, b_hat, a_hat })
}

/// How `{X^{-1} + Cᵀ R^{-1} C}^{-1}` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateForm {
    /// Invert, add the information, invert back.
    Information,
    /// `X − X Cᵀ (R + C X Cᵀ)^{-1} C X`.
    Woodbury,
    /// Woodbury when the output is smaller than the state.
    Auto,
}

pub fn measurement_update(x_pred: &Mat, c: &Mat, r: &Mat, form: UpdateForm) -> Result<Mat> {
    let form = match form {
        UpdateForm::Auto if c.nrows() < c.ncols() => UpdateForm::Woodbury,
        UpdateForm::Auto => UpdateForm::Information,
        f => f,
    };
    let out = match form {
        UpdateForm::Information => {
            let info = spd_inverse(x_pred, "predicted PCM")? + c.transpose() * spd_solve(r, c, "R_{t+1}")?;
            spd_inverse(&info, "updated information matrix")?
        }
        _ => {
            let xc = x_pred * c.transpose();
            let innov = r + c * &xc;
            x_pred - &xc * spd_solve(&innov, &xc.transpose(), "innovation covariance")?
        }
    };
    Ok(resymmetrize(out, "measurement update"))
}

/// PCM recursion alone: `P_{t|t} → P_{t+1|t+1}`.
pub fn pcm_step(model: &PlantModel, p: &Mat, gamma: bool, t: usize) -> Result<Mat> {
    pcm_step_with(model, p, gamma, t, UpdateForm::Auto)
}

pub fn pcm_step_with(model: &PlantModel, p: &Mat, gamma: bool, t: usize, form: UpdateForm) -> Result<Mat> {
    if !gamma {
        let a = model.a(t)?;
        let b = model.b(t)?;
        let q = model.q(t)?;
        return Ok(resymmetrize(&a * p * a.transpose() + &b * q * b.transpose(), "prediction"));
    }
    let adj = adjust_matrices(model, p, t)?;
    let a = model.a(t)?;
    let x_pred = &a * &adj.p_hat * a.transpose() + &adj.b_hat * &adj.q_hat * adj.b_hat.transpose();
    measurement_update(&x_pred, &model.c(t + 1)?, &model.r(t + 1)?, form)
}

fn check_inputs(model: &PlantModel, state: &EstimatorState, y: Option<&Vector>, gamma: bool) -> Result<()> {
    match (gamma, y) {
        (true, None) => Err(Error::Usage("a measurement is required when gamma = 1".into())),
        (false, Some(_)) => Err(Error::Usage("no measurement may be supplied when gamma = 0".into())),
        (true, Some(y)) if y.len() != model.p() => Err(Error::Usage(format!(
            "measurement has length {}, expected {}",
            y.len(),
            model.p()
        ))),
        _ if state.x_hat.len() != model.n() || state.p_mat.shape() != (model.n(), model.n()) => {
            Err(Error::Usage("estimator state does not match the plant dimension".into()))
        }
        _ => Ok(()),
    }
}

/// One step of the robust estimator.
pub fn rseio_step(model: &PlantModel, state: &EstimatorState, y: Option<&Vector>, gamma: bool) -> Result<EstimatorState> {
    check_inputs(model, state, y, gamma)?;
    let t = state.t;
    let step = || -> Result<EstimatorState> {
        let a = model.a(t)?;
        if !gamma {
            let p_next = pcm_step(model, &state.p_mat, false, t)?;
            return Ok(EstimatorState::new(t + 1, &a * &state.x_hat, p_next));
        }
        let y = y.expect("checked above");
        let adj = adjust_matrices(model, &state.p_mat, t)?;
        let c = model.c(t + 1)?;
        let r = model.r(t + 1)?;
        let x_pred = &a * &adj.p_hat * a.transpose() + &adj.b_hat * &adj.q_hat * adj.b_hat.transpose();
        let p_next = measurement_update(&x_pred, &c, &r, UpdateForm::Auto)?;
        let prior = &adj.a_hat * &state.x_hat;
        let innovation = y - &c * &prior;
        let gain = &p_next * c.transpose() * spd_inverse(&r, "R_{t+1}")?;
        Ok(EstimatorState::new(t + 1, prior + gain * innovation, p_next))
    };
    step().map_err(|e| e.at(t))
}

/// Covariance-form Kalman step; `γ = 0` is a pure prediction.
pub fn kalman_step(model: &PlantModel, state: &EstimatorState, y: Option<&Vector>, gamma: bool) -> Result<EstimatorState> {
    check_inputs(model, state, y, gamma)?;
    let t = state.t;
    let step = || -> Result<EstimatorState> {
        let a = model.a(t)?;
        let b = model.b(t)?;
        let q = model.q(t)?;
        let x_pred = &a * &state.x_hat;
        let p_pred = resymmetrize(&a * &state.p_mat * a.transpose() + &b * q * b.transpose(), "prediction");
        if !gamma {
            return Ok(EstimatorState::new(t + 1, x_pred, p_pred));
        }
        let y = y.expect("checked above");
        let c = model.c(t + 1)?;
        let r = model.r(t + 1)?;
        let p_next = measurement_update(&p_pred, &c, &r, UpdateForm::Auto)?;
        let gain = &p_next * c.transpose() * spd_inverse(&r, "R_{t+1}")?;
        let innovation = y - &c * &x_pred;
        Ok(EstimatorState::new(t + 1, x_pred + gain * innovation, p_next))
    };
    step().map_err(|e| e.at(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Robust estimator that uses the arrival indicator.
    Rseio,
    /// Kalman filter that skips the update when no measurement arrived.
    Kfio,
    /// Kalman filter that treats every received signal as a measurement.
    Kf,
    /// Robust estimator that treats every received signal as a measurement.
    Rse,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [EstimatorKind::Rseio, EstimatorKind::Kfio, EstimatorKind::Kf, EstimatorKind::Rse];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Rseio => "rseio",
            EstimatorKind::Kfio => "kfio",
            EstimatorKind::Kf => "kf",
            EstimatorKind::Rse => "rse",
        }
    }

    /// One step given the received signal and its arrival flag.
    pub fn step(&self, model: &PlantModel, state: &EstimatorState, received: &Vector, gamma: bool) -> Result<EstimatorState> {
        let gated = gamma.then_some(received);
        match self {
            EstimatorKind::Rseio => rseio_step(model, state, gated, gamma),
            EstimatorKind::Kfio => kalman_step(model, state, gated, gamma),
            EstimatorKind::Kf => kalman_step(model, state, Some(received), true),
            EstimatorKind::Rse => rseio_step(model, state, Some(received), true),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

/// Runs an estimator over a channel realization.
///
/// `gammas[k]` and `received[k]` belong to time `initial.t + k + 1`. The
/// returned trace starts with `initial`.
pub fn run_filter(
    model: &PlantModel,
    gammas: &[bool],
    received: &[Vector],
    kind: EstimatorKind,
    initial: EstimatorState,
) -> Result<Vec<EstimatorState>> {
    if gammas.len() != received.len() {
        return Err(Error::Usage(format!(
            "{} arrival flags but {} received signals",
            gammas.len(),
            received.len()
        )));
    }
    let mut trace = Vec::with_capacity(gammas.len() + 1);
    trace.push(initial);
    for (gamma, y) in gammas.iter().zip(received) {
        let next = kind.step(model, trace.last().expect("nonempty"), y, *gamma)?;
        trace.push(next);
    }
    Ok(trace)
}

/// Writes `t, gamma, x_hat_*, p_i_j` (upper triangle, row-major) rows.
/// The initial state has an empty `gamma` field.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[EstimatorState], gammas: &[bool]) -> Result<()> {
    let Some(first) = trace.first() else { return Ok(()) };
    let n = first.x_hat.len();
    let mut header = vec!["t".to_string(), "gamma".to_string()];
    header.extend((0..n).map(|i| format!("x_hat_{i}")));
    for i in 0..n {
        for j in i..n {
            header.push(format!("p_{i}_{j}"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for (k, st) in trace.iter().enumerate() {
        let gamma = if k == 0 {
            String::new()
        } else {
            gammas.get(k - 1).map(|g| (*g as u8).to_string()).unwrap_or_default()
        };
        let mut fields = vec![st.t.to_string(), gamma];
        fields.extend(st.x_hat.iter().map(|v| format!("{v:e}")));
        for i in 0..n {
            for j in i..n {
                fields.push(format!("{:e}", st.p_mat[(i, j)]));
            }
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_frobenius;

    fn benchmark_state() -> (PlantModel, EstimatorState) {
        let model = PlantModel::benchmark(0.8);
        let state = EstimatorState::new(0, Vector::from_row_slice(&[0.3, -1.2]), Mat::identity(2, 2));
        (model, state)
    }

    #[test]
    fn unit_mu_passes_matrices_through() {
        let model = PlantModel::benchmark(1.0);
        let p = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let adj = adjust_matrices(&model, &p, 0).unwrap();
        assert_eq!(adj.p_hat, p);
        assert_eq!(adj.q_hat, model.q(0).unwrap());
        assert_eq!(adj.b_hat, model.b(0).unwrap());
        assert_eq!(adj.a_hat, model.a(0).unwrap());
    }

    #[test]
    fn benchmark_p_hat_closed_form() {
        let (model, _) = benchmark_state();
        let adj = adjust_matrices(&model, &Mat::identity(2, 2), 0).unwrap();
        let expected = Mat::from_diagonal(&Vector::from_row_slice(&[1.0, 1.0 / (1.0 + 0.25 * 0.099 * 0.099)]));
        assert!((adj.p_hat - expected).norm() < 1e-15);
    }

    #[test]
    fn dropout_step_is_nominal_prediction() {
        let (model, state) = benchmark_state();
        let next = rseio_step(&model, &state, None, false).unwrap();
        let a = model.a(0).unwrap();
        let q = model.q(0).unwrap();
        assert_eq!(next.t, 1);
        assert_eq!(next.x_hat, &a * &state.x_hat);
        assert!((next.p_mat - (&a * a.transpose() + q)).norm() < 1e-15);
    }

    #[test]
    fn update_forms_agree() {
        let (model, _) = benchmark_state();
        let x = Mat::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 2.0]);
        let c = model.c(1).unwrap();
        let r = model.r(1).unwrap();
        let info = measurement_update(&x, &c, &r, UpdateForm::Information).unwrap();
        let wood = measurement_update(&x, &c, &r, UpdateForm::Woodbury).unwrap();
        assert!(relative_frobenius(&info, &wood) < 1e-13);
    }

    #[test]
    fn usage_errors() {
        let (model, state) = benchmark_state();
        let y = Vector::from_row_slice(&[0.1]);
        assert!(matches!(rseio_step(&model, &state, None, true), Err(Error::Usage(_))));
        assert!(matches!(rseio_step(&model, &state, Some(&y), false), Err(Error::Usage(_))));
        let bad = Vector::from_row_slice(&[0.1, 0.2]);
        assert!(matches!(kalman_step(&model, &state, Some(&bad), true), Err(Error::Usage(_))));
    }

    #[test]
    fn singular_pcm_is_reported_with_time() {
        let (model, mut state) = benchmark_state();
        state.t = 4;
        state.p_mat = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let y = Vector::from_row_slice(&[0.1]);
        let err = rseio_step(&model, &state, Some(&y), true).unwrap_err();
        assert!(matches!(err, Error::AtTime { t: 4, .. }), "{err}");
        assert!(err.is_numeric());
    }

    #[test]
    fn empty_horizon_returns_initial_state() {
        let (model, state) = benchmark_state();
        let trace = run_filter(&model, &[], &[], EstimatorKind::Rseio, state.clone()).unwrap();
        assert_eq!(trace, vec![state]);
    }

    #[test]
    fn trace_csv_layout() {
        let (model, state) = benchmark_state();
        let ys = vec![Vector::from_row_slice(&[0.5]); 2];
        let gammas = [true, false];
        let trace = run_filter(&model, &gammas, &ys, EstimatorKind::Rseio, state).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace, &gammas).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,gamma,x_hat_0,x_hat_1,p_0_0,p_0_1,p_1_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,,"));
        assert!(lines[2].starts_with("1,1,"));
        assert!(lines[3].starts_with("2,0,"));
    }

    #[test]
    fn estimator_names_roundtrip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("rsemm".parse::<EstimatorKind>().is_err());
    }
}
