//! Bradley-Terry probability, the DPO loss and its gradients, and a
//! sanity report over a file of per-pair log-probabilities.
//!
//! All logs are natural. With `Δ = β[(πw − ρw) − (πl − ρl)]` the loss is
//! `softplus(−Δ)`, computed without overflow for any finite `Δ`.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DpoError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("item {index}: {reason}")]
    InvalidItem { index: usize, reason: String },
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probability that the response with reward `r_w` beats the one with `r_l`.
pub fn bt_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoItem {
    pub logp_policy_w: f64,
    pub logp_ref_w: f64,
    pub logp_policy_l: f64,
    pub logp_ref_l: f64,
    pub beta: f64,
}

impl DpoItem {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            self.logp_policy_w,
            self.logp_ref_w,
            self.logp_policy_l,
            self.logp_ref_l,
            self.beta,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("all fields must be finite".into());
        }
        if self.beta <= 0.0 {
            return Err(format!("beta must be > 0, got {}", self.beta));
        }
        Ok(())
    }

    /// Difference of policy/reference log-ratios, before scaling by β.
    pub fn raw_margin(&self) -> f64 {
        (self.logp_policy_w - self.logp_ref_w) - (self.logp_policy_l - self.logp_ref_l)
    }

    /// The scaled margin `Δ`, also the implied reward margin.
    pub fn margin(&self) -> f64 {
        self.beta * self.raw_margin()
    }
}

pub fn dpo_loss(item: &DpoItem) -> f64 {
    softplus(-item.margin())
}

/// `(∂L/∂logp_policy_w, ∂L/∂logp_policy_l)`.
pub fn dpo_grads(item: &DpoItem) -> (f64, f64) {
    let g = item.beta * sigmoid(-item.margin());
    (-g, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub n_items: usize,
    pub mean_loss: f64,
    pub mean_implied_margin: f64,
    /// Fraction of items with positive margin; zero margins count half.
    pub accuracy: f64,
}

pub fn validate_dataset(items: &[DpoItem]) -> Result<DpoReport, DpoError> {
    if items.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let (mut loss, mut margin, mut wins) = (0.0, 0.0, 0.0);
    for (index, item) in items.iter().enumerate() {
        item.validate()
            .map_err(|reason| DpoError::InvalidItem { index, reason })?;
        let m = item.margin();
        loss += dpo_loss(item);
        margin += m;
        wins += if m > 0.0 {
            1.0
        } else if m == 0.0 {
            0.5
        } else {
            0.0
        };
    }
    let n = items.len() as f64;
    Ok(DpoReport {
        n_items: items.len(),
        mean_loss: loss / n,
        mean_implied_margin: margin / n,
        accuracy: wins / n,
    })
}
