//! Monte Carlo comparison of estimators and the PCM stationarity study.
//!
//! Trial `j` draws everything (initial state, `ε_t`, `v_t`, `w_t`, `γ_t`)
//! from its own stream `(seed, j)`, so results do not depend on thread
//! count. Every estimator in a trial consumes the same realization.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{sample_sequence, DropoutModel};
use crate::error::{Error, Result};
use crate::estimator::{pcm_step, run_filter, EstimatorKind, EstimatorState};
use crate::linalg::{cholesky, Mat, Vector};
use crate::plant::{simulate_truth, PlantModel, UniformError};
use crate::rng::stream_rng;

/// Trials per parallel batch; batches are reduced in index order.
const BATCH: usize = 256;

/// Stream offsets keep the stationarity draws disjoint from the MSE trials.
const STATIONARITY_STREAM: u64 = 1 << 48;
const CALIBRATION_STREAM: u64 = 1 << 52;

pub const EPDF_GRID_POINTS: usize = 100;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub plant: PlantModel,
    pub channel: DropoutModel,
    /// Bound of the uniform parametric error.
    pub delta: f64,
    pub mu: f64,
    pub horizon: usize,
    pub trials: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Initial PCMs for the stationarity study; empty skips it.
    pub p0_list: Vec<Mat>,
    /// Trials per initial PCM in the stationarity study.
    pub stationarity_trials: usize,
    /// Inclusive `t` range for time-averaged MSE.
    pub average_window: (usize, usize),
    pub seed: u64,
    /// Identifies the configuration in every output file.
    pub config_hash: String,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad(format!("delta must be a nonnegative number, got {}", self.delta));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return bad(format!("mu must lie in (0, 1], got {}", self.mu));
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        for (i, k) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(k) {
                return bad(format!("estimator `{k}` listed twice"));
            }
        }
        let (lo, hi) = self.average_window;
        if lo > hi || hi > self.horizon {
            return bad(format!("average window [{lo}, {hi}] is not inside [0, {}]", self.horizon));
        }
        let n = self.plant.n();
        for (i, p0) in self.p0_list.iter().enumerate() {
            if p0.shape() != (n, n) {
                return bad(format!("p0_list[{i}] must be {n}x{n}"));
            }
            cholesky(p0, "p0_list entry").map_err(|_| Error::Config(format!("p0_list[{i}] is not positive definite")))?;
        }
        if !self.p0_list.is_empty() && self.stationarity_trials < 2 {
            return bad("the stationarity study needs at least two trials".into());
        }
        self.channel.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedTrial {
    pub trial: usize,
    /// `None` for the estimator-comparison trials, else the P₀ index.
    pub p0_index: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpdfCurve {
    pub p0_index: usize,
    pub row: usize,
    pub col: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub integral: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityReport {
    pub p0_list: Vec<Vec<Vec<f64>>>,
    /// `samples[k][j]` is `P_{T|T}` (row-major) of trial `j` for `p0_list[k]`.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// Pairwise KS statistics of the `(0, 0)` element across `p0_list`.
    pub ks_matrix: Vec<Vec<f64>>,
    /// Same-distribution KS statistic for each P₀ from an independent replicate.
    pub calibration_ks: Vec<f64>,
    pub calibration_mean: f64,
    pub max_pairwise_ks: f64,
    /// Off-diagonal samples agree bitwise across all trials.
    pub symmetric: bool,
    pub epdf: Vec<EpdfCurve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub horizon: usize,
    pub trials: usize,
    pub included_trials: usize,
    pub excluded: Vec<ExcludedTrial>,
    /// SHA-256 over the per-trial realization digests, in trial order.
    pub realization_digest: String,
    pub average_window: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub estimators: Vec<EstimatorKind>,
    /// `mse[e][t]` for estimator `estimators[e]`, `t = 0..=horizon`.
    pub mse: Vec<Vec<f64>>,
    /// Mean of `mse[e][t]` over the average window.
    pub time_averaged_mse: Vec<f64>,
    pub stationarity: Option<StationarityReport>,
    pub metadata: SimMetadata,
}

impl SimReport {
    pub fn mse_of(&self, kind: EstimatorKind) -> Option<&[f64]> {
        self.estimators.iter().position(|k| *k == kind).map(|i| self.mse[i].as_slice())
    }

    pub fn time_averaged(&self, kind: EstimatorKind) -> Option<f64> {
        self.estimators.iter().position(|k| *k == kind).map(|i| self.time_averaged_mse[i])
    }

    /// Fraction of all trials that were excluded.
    pub fn excluded_fraction(&self) -> f64 {
        let total = self.metadata.trials
            + self
                .stationarity
                .as_ref()
                .map_or(0, |s| s.samples.iter().map(|v| v.len()).sum::<usize>());
        let total = total + self.metadata.excluded.iter().filter(|e| e.p0_index.is_some()).count();
        self.metadata.excluded.len() as f64 / total.max(1) as f64
    }
}

/// Running sum of squared errors per time index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MseAccumulator {
    sums: Vec<f64>,
    count: usize,
}

impl MseAccumulator {
    pub fn new(len: usize) -> Self {
        MseAccumulator { sums: vec![0.0; len], count: 0 }
    }

    pub fn add_errors(&mut self, errors: &[Vector]) {
        let sq: Vec<f64> = errors.iter().map(|e| e.norm_squared()).collect();
        self.add_squared(&sq);
    }

    pub fn add_squared(&mut self, squared: &[f64]) {
        assert_eq!(squared.len(), self.sums.len(), "trial length mismatch");
        for (s, v) in self.sums.iter_mut().zip(squared) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.sums.iter().map(|s| s / c).collect()
    }
}

/// `errors[j][t]` is `x_t − x̂_t` of trial `j`; returns the per-`t` mean of
/// squared norms.
pub fn empirical_mse(errors: &[Vec<Vector>]) -> Vec<f64> {
    let len = errors.first().map_or(0, |e| e.len());
    let mut acc = MseAccumulator::new(len);
    for trial in errors {
        acc.add_errors(trial);
    }
    acc.finish()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman bandwidth `0.9·min(σ̂, IQR/1.34)·n^{−1/5}`; falls back to `σ̂`
/// when the interquartile range is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Domain("density estimate needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd.is_nan() || sd <= 0.0 || !sd.is_finite() {
        return Err(Error::Domain("density estimate needs samples with positive variance".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * n.powf(-0.2))
}

/// `EPDF_GRID_POINTS` points evenly covering `[min − 3h, max + 3h]`.
pub fn default_grid(samples: &[f64], h: f64) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (EPDF_GRID_POINTS - 1) as f64;
    (0..EPDF_GRID_POINTS).map(|i| lo + step * i as f64).collect()
}

/// Gaussian-kernel density with bandwidth `h`.
pub fn kde(samples: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| samples.iter().map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Gaussian KDE with Silverman bandwidth on `grid`.
pub fn epdf(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    Ok(kde(samples, silverman_bandwidth(samples)?, grid))
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn hash_vectors(h: &mut Sha256, vs: &[Vector]) {
    for v in vs {
        for x in v.iter() {
            h.update(x.to_le_bytes());
        }
    }
}

/// Digest of the inputs an estimator consumes in one trial.
pub fn realization_digest(gammas: &[bool], received: &[Vector], x_true: &[Vector]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(gammas.iter().map(|&g| g as u8).collect::<Vec<_>>());
    hash_vectors(&mut h, received);
    hash_vectors(&mut h, x_true);
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct TrialOutcome {
    /// Squared error per estimator per `t`.
    squared: Vec<Vec<f64>>,
    digest: [u8; 32],
}

fn run_trial(cfg: &SimConfig, model: &PlantModel, j: usize) -> Result<TrialOutcome> {
    let mut rng = stream_rng(cfg.seed, j as u64);
    let traj = simulate_truth(model, cfg.horizon, &mut UniformError { delta: cfg.delta }, &mut rng)?;
    let gammas = sample_sequence(&cfg.channel, cfg.horizon, &mut rng)?.bits().to_vec();
    let received: Vec<Vector> = gammas
        .iter()
        .enumerate()
        .map(|(k, &g)| traj.received(k + 1, g).clone())
        .collect();
    let digest = realization_digest(&gammas, &received, &traj.x);
    let mut squared = Vec::with_capacity(cfg.estimators.len());
    for kind in &cfg.estimators {
        // each estimator sees exactly the digested inputs
        debug_assert_eq!(realization_digest(&gammas, &received, &traj.x), digest);
        let trace = run_filter(model, &gammas, &received, *kind, EstimatorState::initial(model))?;
        squared.push(
            trace
                .iter()
                .zip(&traj.x)
                .map(|(st, x)| (x - &st.x_hat).norm_squared())
                .collect(),
        );
    }
    Ok(TrialOutcome { squared, digest })
}

/// Runs `f(0..count)` in parallel batches, handing results to `sink` in
/// index order.
fn ordered_parallel<T: Send, F, S>(count: usize, f: F, mut sink: S) -> Result<()>
where
    F: Fn(usize) -> T + Sync,
    S: FnMut(usize, T) -> Result<()>,
{
    let mut start = 0;
    while start < count {
        let end = (start + BATCH).min(count);
        let batch: Vec<T> = (start..end).into_par_iter().map(&f).collect();
        for (k, item) in batch.into_iter().enumerate() {
            sink(start + k, item)?;
        }
        start = end;
    }
    Ok(())
}

fn final_pcm(model: &PlantModel, channel: &DropoutModel, horizon: usize, p0: &Mat, seed: u64, stream: u64) -> Result<Mat> {
    let mut rng = stream_rng(seed, stream);
    let gammas = sample_sequence(channel, horizon, &mut rng)?;
    gammas
        .bits()
        .iter()
        .enumerate()
        .try_fold(p0.clone(), |p, (t, &g)| pcm_step(model, &p, g, t))
}

fn collect_final_pcms(
    cfg: &SimConfig,
    model: &PlantModel,
    k: usize,
    base: u64,
    excluded: &mut Vec<ExcludedTrial>,
) -> Result<Vec<Vec<f64>>> {
    let p0 = &cfg.p0_list[k];
    let per = cfg.stationarity_trials as u64;
    let mut out = Vec::with_capacity(cfg.stationarity_trials);
    ordered_parallel(
        cfg.stationarity_trials,
        |j| final_pcm(model, &cfg.channel, cfg.horizon, p0, cfg.seed, base + k as u64 * per + j as u64),
        |j, r| {
            match r {
                Ok(p) => out.push(p.transpose().iter().copied().collect()),
                Err(e) if e.is_numeric() => {
                    log::warn!("stationarity trial {j} (P0 #{k}) excluded: {e}");
                    excluded.push(ExcludedTrial { trial: j, p0_index: Some(k), reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
            Ok(())
        },
    )?;
    Ok(out)
}

fn element(samples: &[Vec<f64>], idx: usize) -> Vec<f64> {
    samples.iter().map(|s| s[idx]).collect()
}

fn stationarity_study(cfg: &SimConfig, model: &PlantModel, excluded: &mut Vec<ExcludedTrial>) -> Result<StationarityReport> {
    let n = model.n();
    let count = cfg.p0_list.len();
    let mut samples = Vec::with_capacity(count);
    let mut replicate = Vec::with_capacity(count);
    for k in 0..count {
        samples.push(collect_final_pcms(cfg, model, k, STATIONARITY_STREAM, excluded)?);
        // replicate exclusions are not part of the reported samples
        let mut scratch = Vec::new();
        replicate.push(collect_final_pcms(cfg, model, k, CALIBRATION_STREAM, &mut scratch)?);
    }
    for (k, s) in samples.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Domain(format!("too few stationarity samples survived for P0 #{k}")));
        }
    }

    let first: Vec<Vec<f64>> = samples.iter().map(|s| element(s, 0)).collect();
    let mut ks_matrix = vec![vec![0.0; count]; count];
    let mut max_pairwise_ks = 0.0f64;
    for a in 0..count {
        for b in a + 1..count {
            let d = ks_statistic(&first[a], &first[b]);
            ks_matrix[a][b] = d;
            ks_matrix[b][a] = d;
            max_pairwise_ks = max_pairwise_ks.max(d);
        }
    }
    let calibration_ks: Vec<f64> = (0..count)
        .map(|k| ks_statistic(&first[k], &element(&replicate[k], 0)))
        .collect();
    let calibration_mean = calibration_ks.iter().sum::<f64>() / count as f64;

    let symmetric = samples.iter().all(|set| {
        set.iter().all(|s| (0..n).all(|i| (i + 1..n).all(|j| s[i * n + j].to_bits() == s[j * n + i].to_bits())))
    });

    let mut epdf_curves = Vec::new();
    for (k, set) in samples.iter().enumerate() {
        for row in 0..n {
            for col in 0..n {
                let values = element(set, row * n + col);
                let h = match silverman_bandwidth(&values) {
                    Ok(h) => h,
                    Err(e) => {
                        log::warn!("no density for P0 #{k} element ({row}, {col}): {e}");
                        continue;
                    }
                };
                let grid = default_grid(&values, h);
                let density = kde(&values, h, &grid);
                let integral = trapezoid(&grid, &density);
                epdf_curves.push(EpdfCurve { p0_index: k, row, col, bandwidth: h, grid, density, integral });
            }
        }
    }

    Ok(StationarityReport {
        p0_list: cfg.p0_list.iter().map(crate::linalg::to_rows).collect(),
        samples,
        ks_matrix,
        calibration_ks,
        calibration_mean,
        max_pairwise_ks,
        symmetric,
        epdf: epdf_curves,
    })
}

/// Runs the estimator comparison and, when `p0_list` is nonempty, the
/// stationarity study.
///
/// Trials whose estimators hit a numeric failure are excluded from every
/// estimator's MSE and listed in the report metadata.
pub fn run_experiment(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let model = cfg.plant.with_mu(cfg.mu)?;
    let len = cfg.horizon + 1;
    let mut accs: Vec<MseAccumulator> = cfg.estimators.iter().map(|_| MseAccumulator::new(len)).collect();
    let mut excluded = Vec::new();
    let mut digest = Sha256::new();

    ordered_parallel(
        cfg.trials,
        |j| run_trial(cfg, &model, j),
        |j, r| {
            match r {
                Ok(outcome) => {
                    digest.update(outcome.digest);
                    for (acc, sq) in accs.iter_mut().zip(&outcome.squared) {
                        acc.add_squared(sq);
                    }
                }
                Err(e) if e.is_numeric() => {
                    log::warn!("trial {j} excluded: {e}");
                    excluded.push(ExcludedTrial { trial: j, p0_index: None, reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
            Ok(())
        },
    )?;
    let included = accs[0].count();
    if included == 0 {
        return Err(Error::Domain("every trial was excluded".into()));
    }
    if !excluded.is_empty() {
        log::warn!("{} of {} trials excluded", excluded.len(), cfg.trials);
    }

    let mse: Vec<Vec<f64>> = accs.iter().map(|a| a.finish()).collect();
    let (lo, hi) = cfg.average_window;
    let time_averaged_mse = mse
        .iter()
        .map(|curve| curve[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64)
        .collect();

    let stationarity = if cfg.p0_list.is_empty() {
        None
    } else {
        Some(stationarity_study(cfg, &model, &mut excluded)?)
    };

    Ok(SimReport {
        estimators: cfg.estimators.clone(),
        mse,
        time_averaged_mse,
        stationarity,
        metadata: SimMetadata {
            seed: cfg.seed,
            config_hash: cfg.config_hash.clone(),
            horizon: cfg.horizon,
            trials: cfg.trials,
            included_trials: included,
            excluded,
            realization_digest: hex(&digest.finalize()),
            average_window: cfg.average_window,
        },
    })
}

fn provenance<W: Write>(out: &mut W, meta: &SimMetadata) -> Result<()> {
    writeln!(out, "# config_hash={} seed={}", meta.config_hash, meta.seed)?;
    Ok(())
}

/// `t` followed by one MSE column per estimator.
pub fn write_mse_csv<W: Write>(mut out: W, report: &SimReport) -> Result<()> {
    provenance(&mut out, &report.metadata)?;
    let names: Vec<&str> = report.estimators.iter().map(|k| k.name()).collect();
    writeln!(out, "t,{}", names.join(","))?;
    for t in 0..=report.metadata.horizon {
        let row: Vec<String> = report.mse.iter().map(|c| format!("{:e}", c[t])).collect();
        writeln!(out, "{t},{}", row.join(","))?;
    }
    Ok(())
}

/// One row per stationarity trial: `p0_index, trial, p_i_j` (all entries).
pub fn write_pcm_samples_csv<W: Write>(mut out: W, report: &SimReport) -> Result<()> {
    provenance(&mut out, &report.metadata)?;
    let Some(st) = &report.stationarity else { return Ok(()) };
    let n = st.p0_list.first().map_or(0, |p| p.len());
    let cols: Vec<String> = (0..n).flat_map(|i| (0..n).map(move |j| format!("p_{i}_{j}"))).collect();
    writeln!(out, "p0_index,trial,{}", cols.join(","))?;
    for (k, set) in st.samples.iter().enumerate() {
        for (j, s) in set.iter().enumerate() {
            let vals: Vec<String> = s.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{k},{j},{}", vals.join(","))?;
        }
    }
    Ok(())
}

/// Long format: `p0_index, row, col, x, density`.
pub fn write_epdf_csv<W: Write>(mut out: W, report: &SimReport) -> Result<()> {
    provenance(&mut out, &report.metadata)?;
    let Some(st) = &report.stationarity else { return Ok(()) };
    writeln!(out, "p0_index,row,col,x,density")?;
    for c in &st.epdf {
        for (x, d) in c.grid.iter().zip(&c.density) {
            writeln!(out, "{},{},{},{x:e},{d:e}", c.p0_index, c.row, c.col)?;
        }
    }
    Ok(())
}

/// Summary JSON: metadata, time-averaged MSE and the KS matrix. Samples and
/// curves are left to the CSV files.
pub fn report_summary(report: &SimReport) -> serde_json::Value {
    let averages: serde_json::Map<String, serde_json::Value> = report
        .estimators
        .iter()
        .zip(&report.time_averaged_mse)
        .map(|(k, v)| (k.name().to_string(), serde_json::json!(v)))
        .collect();
    let stationarity = report.stationarity.as_ref().map(|s| {
        serde_json::json!({
            "p0_list": s.p0_list,
            "sample_counts": s.samples.iter().map(|v| v.len()).collect::<Vec<_>>(),
            "ks_matrix": s.ks_matrix,
            "calibration_ks": s.calibration_ks,
            "calibration_mean": s.calibration_mean,
            "max_pairwise_ks": s.max_pairwise_ks,
            "symmetric": s.symmetric,
            "epdf_integrals": s.epdf.iter().map(|c| c.integral).collect::<Vec<_>>(),
        })
    });
    serde_json::json!({
        "metadata": report.metadata,
        "time_averaged_mse": averages,
        "stationarity": stationarity,
    })
}

/// Gnuplot script plotting `mse.csv` (and `epdf.csv` when present).
pub fn gnuplot_script(report: &SimReport) -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\nset ylabel 'empirical MSE'\nset logscale y\n");
    let lines: Vec<String> = (0..report.estimators.len())
        .map(|i| format!("'mse.csv' using 1:{} with lines", i + 2))
        .collect();
    s.push_str(&format!("plot {}\n", lines.join(", \\\n     ")));
    if let Some(st) = &report.stationarity {
        s.push_str("\nunset logscale y\nset ylabel 'density'\n");
        let n = st.p0_list.first().map_or(0, |p| p.len());
        for row in 0..n {
            for col in 0..n {
                s.push_str(&format!("set xlabel 'P({},{})'\npause -1\n", row + 1, col + 1));
                let curves: Vec<String> = (0..st.p0_list.len())
                    .map(|k| {
                        format!(
                            "'epdf.csv' using ($1=={k} && $2=={row} && $3=={col} ? $4 : 1/0):5 with lines title 'P0 #{k}'"
                        )
                    })
                    .collect();
                s.push_str(&format!("plot {}\n", curves.join(", \\\n     ")));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_config(trials: usize) -> SimConfig {
        SimConfig {
            plant: PlantModel::benchmark(0.8),
            channel: DropoutModel::Bernoulli { gamma: 0.8 },
            delta: 1.0,
            mu: 0.8,
            horizon: 20,
            trials,
            estimators: EstimatorKind::ALL.to_vec(),
            p0_list: vec![],
            stationarity_trials: 0,
            average_window: (5, 20),
            seed: 11,
            config_hash: "test".into(),
        }
    }

    #[test]
    fn mse_trivial_cases() {
        let zero = vec![vec![Vector::zeros(2); 4]; 3];
        assert_eq!(empirical_mse(&zero), vec![0.0; 4]);
        let single = vec![vec![Vector::from_vec(vec![3.0, 4.0])]];
        assert_eq!(empirical_mse(&single), vec![25.0]);
    }

    #[test]
    fn streaming_matches_two_pass() {
        let mut rng = stream_rng(5, 0);
        let table: Vec<Vec<Vector>> = (0..40)
            .map(|_| (0..7).map(|_| Vector::from_fn(3, |_, _| rng.sample(StandardNormal))).collect())
            .collect();
        let streamed = empirical_mse(&table);
        for t in 0..7 {
            let two_pass = table.iter().map(|tr| tr[t].dot(&tr[t])).sum::<f64>() / 40.0;
            assert!((streamed[t] - two_pass).abs() < 1e-12);
        }
    }

    #[test]
    fn ks_extremes() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&a, &[10.0, 11.0]), 1.0);
        assert!((ks_statistic(&[1.0, 2.0], &[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn epdf_standard_normal() {
        let mut rng = stream_rng(9, 0);
        let s: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let d = epdf(&s, &[0.0]).unwrap()[0];
        assert!((d - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 0.05);
    }

    #[test]
    fn epdf_two_points() {
        let s = [-1.0, 1.0];
        let h = silverman_bandwidth(&s).unwrap();
        let grid = default_grid(&s, h);
        let d = kde(&s, h, &grid);
        assert!((trapezoid(&grid, &d) - 1.0).abs() < 0.01);
        for i in 0..grid.len() {
            assert!((d[i] - d[grid.len() - 1 - i]).abs() < 1e-12);
        }
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let at0 = kde(&s, h, &[0.0])[0];
        assert!((at0 - (phi(1.0 / h) + phi(-1.0 / h)) / (2.0 * h)).abs() < 1e-15);
        assert!(matches!(epdf(&[2.0, 2.0], &grid), Err(Error::Domain(_))));
        assert!(matches!(epdf(&[2.0], &grid), Err(Error::Domain(_))));
    }

    #[test]
    fn reduction_single_trial() {
        let mut cfg = small_config(1);
        cfg.delta = 0.0;
        cfg.mu = 1.0;
        cfg.horizon = 1;
        cfg.average_window = (0, 1);
        cfg.channel = DropoutModel::Bernoulli { gamma: 1.0 };
        let rep = run_experiment(&cfg).unwrap();
        assert_eq!(rep.mse_of(EstimatorKind::Rseio), rep.mse_of(EstimatorKind::Kf));
        assert_eq!(rep.mse_of(EstimatorKind::Rseio), rep.mse_of(EstimatorKind::Kfio));
    }

    #[test]
    fn report_is_reproducible_and_thread_independent() {
        let cfg = small_config(40);
        let a = run_experiment(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_experiment(&cfg).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.metadata.included_trials, 40);
        assert!(a.mse.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn mse_csv_rows() {
        let rep = run_experiment(&small_config(3)).unwrap();
        let mut buf = Vec::new();
        write_mse_csv(&mut buf, &rep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=test seed=11");
        assert_eq!(lines.next().unwrap(), "t,rseio,kfio,kf,rse");
        assert_eq!(lines.count(), 21);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_config(1);
        cfg.mu = 0.0;
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config(1);
        cfg.average_window = (0, 21);
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(1);
        cfg.estimators = vec![EstimatorKind::Kf, EstimatorKind::Kf];
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(1);
        cfg.p0_list = vec![Mat::zeros(2, 2)];
        cfg.stationarity_trials = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_stationarity_study() {
        let mut cfg = small_config(2);
        cfg.p0_list = vec![Mat::identity(2, 2), Mat::identity(2, 2) * 10.0];
        cfg.stationarity_trials = 30;
        let rep = run_experiment(&cfg).unwrap();
        let st = rep.stationarity.unwrap();
        assert!(st.symmetric);
        assert_eq!(st.samples[0].len(), 30);
        assert_eq!(st.epdf.len(), 8);
        assert!(st.epdf.iter().all(|c| (c.integral - 1.0).abs() < 0.01));
        assert_eq!(st.ks_matrix[0][1], st.ks_matrix[1][0]);
    }
}
