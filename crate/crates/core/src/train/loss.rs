use serde::{Deserialize, Serialize};

use super::data::TrainingSample;
use crate::error::{shape_err, Error, Result};
use crate::pipeline::FullOutput;
use crate::tensor::Tensor;

/// Names of the nine loss terms, in order; also the loss CSV columns.
pub const TERM_NAMES: [&str; 9] = [
    "theta_l", "theta_r", "beta_l", "beta_r", "joint_l", "joint_r", "vert_l", "vert_r", "trel",
];

/// Per-term weights of the composite L1 loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub theta_l: f64,
    pub theta_r: f64,
    pub beta_l: f64,
    pub beta_r: f64,
    pub joint_l: f64,
    pub joint_r: f64,
    pub vert_l: f64,
    pub vert_r: f64,
    pub trel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self::from_array([w; 9])
    }

    pub fn from_array(w: [f64; 9]) -> Self {
        Self {
            theta_l: w[0],
            theta_r: w[1],
            beta_l: w[2],
            beta_r: w[3],
            joint_l: w[4],
            joint_r: w[5],
            vert_l: w[6],
            vert_r: w[7],
            trel: w[8],
        }
    }

    pub fn as_array(&self) -> [f64; 9] {
        [
            self.theta_l,
            self.theta_r,
            self.beta_l,
            self.beta_r,
            self.joint_l,
            self.joint_r,
            self.vert_l,
            self.vert_r,
            self.trel,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a finite nonnegative number"
                )));
            }
        }
        Ok(())
    }
}

/// Total loss with the unweighted value of each term.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub terms: [f64; 9],
}

/// `Σ_i λ_i · mean|pred_i − gt_i|` over the nine terms in [`TERM_NAMES`] order.
pub fn loss_terms(pred: [&Tensor; 9], gt: [&Tensor; 9], w: &LossWeights) -> Result<LossBreakdown> {
    let mut total = Tensor::scalar(0.0);
    let mut terms = [0.0; 9];
    for (i, ((p, g), lambda)) in pred.iter().zip(gt).zip(w.as_array()).enumerate() {
        if p.shape() != g.shape() {
            return Err(shape_err(TERM_NAMES[i], p.shape(), g.shape()));
        }
        let term = p.sub(g)?.abs().mean_all();
        terms[i] = term.item();
        total = total.add(&term.mul_scalar(lambda))?;
    }
    Ok(LossBreakdown { total, terms })
}

pub fn prediction_terms(out: &FullOutput) -> [&Tensor; 9] {
    [
        &out.theta_l,
        &out.theta_r,
        &out.beta_l,
        &out.beta_r,
        &out.joints_l,
        &out.joints_r,
        &out.vertices_l,
        &out.vertices_r,
        &out.t_rel,
    ]
}

pub fn loss(pred: &FullOutput, gt: &TrainingSample, w: &LossWeights) -> Result<LossBreakdown> {
    loss_terms(prediction_terms(pred), gt.targets(), w)
}
