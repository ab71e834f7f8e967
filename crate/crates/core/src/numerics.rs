//! Generalized advantage estimation, as a backward recursion and as one
//! upper-triangular matrix-vector product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaeInputs {
    /// Reward of each step, length `T`.
    pub rewards: Vec<f64>,
    /// Value estimate of each state, length `T + 1`; the last entry bootstraps.
    pub values: Vec<f64>,
    pub gamma: f64,
    pub lam: f64,
}

impl GaeInputs {
    pub fn new(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64) -> Result<Self> {
        let g = GaeInputs { rewards, values, gamma, lam };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.rewards.len() + 1 {
            return Err(Error::invalid(format!(
                "{} rewards need {} values, got {}",
                self.rewards.len(),
                self.rewards.len() + 1,
                self.values.len()
            )));
        }
        for (name, v) in [("gamma", self.gamma), ("lam", self.lam)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Temporal-difference residuals `r_t + gamma V_{t+1} - V_t`.
    pub fn residuals(&self) -> Vec<f64> {
        self.rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| r + self.gamma * self.values[t + 1] - self.values[t])
            .collect()
    }
}

/// Advantages by the backward recursion `A_t = delta_t + gamma lam A_{t+1}`.
pub fn gae_recursive(inputs: &GaeInputs) -> Result<Vec<f64>> {
    inputs.validate()?;
    let delta = inputs.residuals();
    let decay = inputs.gamma * inputs.lam;
    let mut adv = vec![0.0; delta.len()];
    let mut next = 0.0;
    for t in (0..delta.len()).rev() {
        next = delta[t] + decay * next;
        adv[t] = next;
    }
    Ok(adv)
}

/// Dense `T x T` operator with `U[t][k] = (gamma lam)^(k - t)` for `k >= t`.
pub fn discount_matrix(len: usize, decay: f64) -> Vec<Vec<f64>> {
    let powers = decay_powers(len, decay);
    (0..len)
        .map(|t| (0..len).map(|k| if k >= t { powers[k - t] } else { 0.0 }).collect())
        .collect()
}

fn decay_powers(len: usize, decay: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(len);
    let mut acc = 1.0;
    for _ in 0..len {
        p.push(acc);
        acc *= decay;
    }
    p
}

/// Advantages as `U delta`. Every row of `U` is a shifted copy of the same
/// power sequence, so rows are produced on the fly instead of stored.
pub fn gae_matrix(inputs: &GaeInputs) -> Result<Vec<f64>> {
    inputs.validate()?;
    let delta = inputs.residuals();
    let powers = decay_powers(delta.len(), inputs.gamma * inputs.lam);
    Ok((0..delta.len())
        .map(|t| delta[t..].iter().zip(&powers).map(|(d, p)| d * p).sum())
        .collect())
}
