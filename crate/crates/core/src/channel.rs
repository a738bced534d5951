//! Packet-arrival process `γ_t` and exact sequence probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arrival process for plant-output packets.
///
/// For the Markov chain, `alpha = P(γ_{t+1}=1 | γ_t=1)` and
/// `beta = P(γ_{t+1}=0 | γ_t=0)`; `gamma0 = P(γ_0 = 1)`. The initial state
/// `γ_0` is never emitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DropoutModel {
    Bernoulli { gamma: f64 },
    Markov { alpha: f64, beta: f64, gamma0: f64 },
}

impl DropoutModel {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let open = |v: f64| v > 0.0 && v < 1.0;
        match *self {
            DropoutModel::Bernoulli { gamma } if unit(gamma) => Ok(()),
            DropoutModel::Bernoulli { gamma } => {
                Err(Error::Domain(format!("arrival probability {gamma} outside [0, 1]")))
            }
            DropoutModel::Markov { alpha, beta, gamma0 } => {
                if !open(alpha) || !open(beta) {
                    return Err(Error::Domain(format!(
                        "Markov transition probabilities must lie in (0, 1), got alpha = {alpha}, beta = {beta}"
                    )));
                }
                if !unit(gamma0) {
                    return Err(Error::Domain(format!("initial arrival probability {gamma0} outside [0, 1]")));
                }
                Ok(())
            }
        }
    }

    /// Long-run fraction of arrivals.
    pub fn stationary_arrival_rate(&self) -> f64 {
        match *self {
            DropoutModel::Bernoulli { gamma } => gamma,
            DropoutModel::Markov { alpha, beta, .. } => (1.0 - beta) / (2.0 - alpha - beta),
        }
    }
}

/// A finite arrival pattern `γ_1..γ_N`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArrivalSequence {
    bits: Vec<bool>,
}

impl ArrivalSequence {
    pub fn new(bits: Vec<bool>) -> Self {
        ArrivalSequence { bits }
    }

    pub fn from_u8(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Domain(format!("arrival indicator {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// The sequence with index `m = Σ_i 2^{i−1} S(i)`; bit `i` (1-based) is
    /// bit `i−1` of `m`.
    pub fn from_index(m: u64, len: usize) -> Self {
        assert!(len <= 64, "index encoding supports at most 64 entries");
        ArrivalSequence {
            bits: (0..len).map(|i| (m >> i) & 1 == 1).collect(),
        }
    }

    pub fn index(&self) -> u64 {
        assert!(self.bits.len() <= 64, "index encoding supports at most 64 entries");
        self.bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn arrivals(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }
}

/// Draws `γ_1..γ_N`.
pub fn sample_sequence<R: Rng + ?Sized>(model: &DropoutModel, len: usize, rng: &mut R) -> Result<ArrivalSequence> {
    model.validate()?;
    if len == 0 {
        return Err(Error::Usage("sequence length must be at least 1".into()));
    }
    let bits = match *model {
        DropoutModel::Bernoulli { gamma } => (0..len).map(|_| rng.gen::<f64>() < gamma).collect(),
        DropoutModel::Markov { alpha, beta, gamma0 } => {
            let mut state = rng.gen::<f64>() < gamma0;
            (0..len)
                .map(|_| {
                    let stay = if state { alpha } else { beta };
                    if rng.gen::<f64>() >= stay {
                        state = !state;
                    }
                    state
                })
                .collect()
        }
    };
    Ok(ArrivalSequence { bits })
}

/// `coef · ln(p)` with the convention `0 · ln 0 = 0`.
fn weighted_ln(coef: f64, p: f64) -> f64 {
    if coef == 0.0 {
        0.0
    } else {
        coef * p.ln()
    }
}

/// Natural log of the probability that the channel emits exactly `seq`.
/// Returns `-inf` for impossible sequences.
pub fn log_sequence_probability(model: &DropoutModel, seq: &ArrivalSequence) -> Result<f64> {
    model.validate()?;
    if seq.is_empty() {
        return Err(Error::Usage("sequence must be nonempty".into()));
    }
    let n = seq.len() as f64;
    let s: Vec<f64> = seq.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    match *model {
        DropoutModel::Bernoulli { gamma } => {
            let ones: f64 = s.iter().sum();
            Ok(weighted_ln(ones, gamma) + weighted_ln(n - ones, 1.0 - gamma))
        }
        DropoutModel::Markov { alpha, beta, gamma0 } => {
            let head: f64 = s[..s.len() - 1].iter().sum();
            let tail: f64 = s[1..].iter().sum();
            let pairs: f64 = s.windows(2).map(|w| w[0] * w[1]).sum();
            let first = s[0];
            let initial = (first + (1.0 - 2.0 * first) * (beta + gamma0 * (1.0 - alpha - beta))).ln();
            Ok((n - 1.0) * beta.ln()
                + ((1.0 - alpha) / beta).ln() * head
                + (1.0 / beta - 1.0).ln() * tail
                + (alpha * beta / ((1.0 - alpha) * (1.0 - beta))).ln() * pairs
                + initial)
        }
    }
}
