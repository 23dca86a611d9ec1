use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Graph, GraphError, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("class prior {0} outside (0, 1)")]
    Prior(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskEstimator {
    #[default]
    Nnpu,
    Upu,
}

impl RiskEstimator {
    pub fn name(self) -> &'static str {
        match self {
            RiskEstimator::Nnpu => "nnpu",
            RiskEstimator::Upu => "upu",
        }
    }
}

/// How the positives-as-negative term is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosNegNorm {
    /// Divide by the number of positives.
    #[default]
    Positives,
    /// Divide by the number of unlabeled samples.
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskComponents {
    /// Mean loss of positives against `+1`.
    pub pos_risk: f64,
    /// Mean loss of unlabeled samples against `-1`.
    pub unl_neg_risk: f64,
    /// Loss of positives against `-1`, normalised per [`PosNegNorm`].
    pub pos_neg_risk: f64,
    pub prior: f64,
}

impl RiskComponents {
    /// `unl_neg_risk - prior * pos_neg_risk`, the estimated negative-class risk.
    pub fn correction(&self) -> f64 {
        self.unl_neg_risk - self.prior * self.pos_neg_risk
    }

    pub fn clamp_engaged(&self) -> bool {
        self.correction() < 0.0
    }

    pub fn upu(&self) -> f64 {
        self.prior * self.pos_risk + self.correction()
    }

    pub fn nnpu(&self) -> f64 {
        self.prior * self.pos_risk + self.correction().max(0.0)
    }

    pub fn total(&self, estimator: RiskEstimator) -> f64 {
        match estimator {
            RiskEstimator::Nnpu => self.nnpu(),
            RiskEstimator::Upu => self.upu(),
        }
    }
}

/// Sigmoid surrogate `sigma(-t z)`.
pub fn base_loss(logit: f64, target: f64) -> f64 {
    sigmoid(-target * logit)
}

fn check(pos: usize, unl: usize, prior: f64) -> Result<(), RiskError> {
    if pos == 0 {
        return Err(RiskError::EmptyBatch("positive"));
    }
    if unl == 0 {
        return Err(RiskError::EmptyBatch("unlabeled"));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(RiskError::Prior(prior));
    }
    Ok(())
}

/// PU risk over `pos_logits` and `unl_logits` (any shape), returning the graph
/// node for the total and the component values.
pub fn pu_risk(
    g: &mut Graph,
    pos_logits: NodeId,
    unl_logits: NodeId,
    prior: f64,
    estimator: RiskEstimator,
    norm: PosNegNorm,
) -> Result<(NodeId, RiskComponents), RiskError> {
    let n_p = g.value(pos_logits).numel();
    let n_u = g.value(unl_logits).numel();
    check(n_p, n_u, prior)?;

    let neg_pos = g.neg(pos_logits);
    let l_pos = g.sigmoid(neg_pos);
    let pos_risk = g.mean(l_pos);

    let l_unl = g.sigmoid(unl_logits);
    let unl_neg = g.mean(l_unl);

    let l_pos_neg = g.sigmoid(pos_logits);
    let pos_neg = match norm {
        PosNegNorm::Positives => g.mean(l_pos_neg),
        PosNegNorm::Unlabeled => {
            let s = g.sum(l_pos_neg);
            g.scale(s, 1.0 / n_u as f64)
        }
    };

    let comps = RiskComponents {
        pos_risk: g.item(pos_risk),
        unl_neg_risk: g.item(unl_neg),
        pos_neg_risk: g.item(pos_neg),
        prior,
    };

    let weighted_pos_neg = g.scale(pos_neg, prior);
    let correction = g.sub(unl_neg, weighted_pos_neg)?;
    let correction = match estimator {
        RiskEstimator::Nnpu => g.max_scalar(correction, 0.0),
        RiskEstimator::Upu => correction,
    };
    let weighted_pos = g.scale(pos_risk, prior);
    let total = g.add(weighted_pos, correction)?;
    Ok((total, comps))
}

pub fn nnpu_loss(
    g: &mut Graph,
    pos_logits: NodeId,
    unl_logits: NodeId,
    prior: f64,
) -> Result<NodeId, RiskError> {
    pu_risk(
        g,
        pos_logits,
        unl_logits,
        prior,
        RiskEstimator::Nnpu,
        PosNegNorm::Positives,
    )
    .map(|r| r.0)
}

pub fn upu_loss(
    g: &mut Graph,
    pos_logits: NodeId,
    unl_logits: NodeId,
    prior: f64,
) -> Result<NodeId, RiskError> {
    pu_risk(
        g,
        pos_logits,
        unl_logits,
        prior,
        RiskEstimator::Upu,
        PosNegNorm::Positives,
    )
    .map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn risk(pos: &[f64], unl: &[f64], prior: f64, est: RiskEstimator) -> (f64, RiskComponents) {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(pos.to_vec()));
        let u = g.param(Tensor::vector(unl.to_vec()));
        let (t, c) = pu_risk(&mut g, p, u, prior, est, PosNegNorm::Positives).unwrap();
        (g.item(t), c)
    }

    #[test]
    fn base_loss_values() {
        assert_eq!(base_loss(0.0, 1.0), 0.5);
        assert_eq!(base_loss(0.0, -1.0), 0.5);
        assert!((base_loss(10.0, 1.0) - 4.539_786_870_243_439e-5).abs() < 1e-15);
        for z in [-7.0, -0.3, 0.0, 2.5, 30.0] {
            assert!((base_loss(z, 1.0) + base_loss(z, -1.0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_logits_at_half_prior() {
        let (t, _) = risk(&[0.0; 3], &[0.0; 5], 0.5, RiskEstimator::Nnpu);
        assert_eq!(t, 0.5);
    }

    #[test]
    fn components_arithmetic() {
        let prior = 0.4;
        let c = RiskComponents {
            pos_risk: 0.4,
            unl_neg_risk: 0.2,
            pos_neg_risk: 0.5 / prior,
            prior,
        };
        assert!((c.nnpu() - prior * 0.4).abs() < 1e-15);
        assert!((c.upu() - (prior * 0.4 - 0.3)).abs() < 1e-15);
        assert!(c.clamp_engaged());
    }

    #[test]
    fn clamp_gradient_is_zero_on_correction() {
        // strongly positive unlabeled logits push the correction negative
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![5.0, 5.0]));
        let u = g.param(Tensor::vector(vec![-5.0, -5.0]));
        let (t, c) = pu_risk(
            &mut g,
            p,
            u,
            0.4,
            RiskEstimator::Nnpu,
            PosNegNorm::Positives,
        )
        .unwrap();
        assert!(c.clamp_engaged());
        g.backward(t).unwrap();
        assert!(g.grad(u).data().iter().all(|&v| v == 0.0));
        assert!(g.grad(p).data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn literal_normalization() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0; 2]));
        let u = g.constant(Tensor::vector(vec![0.0; 8]));
        let (_, c) = pu_risk(
            &mut g,
            p,
            u,
            0.3,
            RiskEstimator::Nnpu,
            PosNegNorm::Unlabeled,
        )
        .unwrap();
        assert!((c.pos_neg_risk - 0.5 * 2.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batches_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![]));
        let u = g.constant(Tensor::vector(vec![0.0]));
        assert_eq!(
            nnpu_loss(&mut g, p, u, 0.4),
            Err(RiskError::EmptyBatch("positive"))
        );
        assert_eq!(
            upu_loss(&mut g, u, p, 0.4),
            Err(RiskError::EmptyBatch("unlabeled"))
        );
        assert_eq!(nnpu_loss(&mut g, u, u, 1.0), Err(RiskError::Prior(1.0)));
    }
}
