use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId, Tensor};
use crate::models::FeatureMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("rho = {0} must lie strictly inside (0, 1)")]
    Rho(f64),
    #[error("{name} = {value} must be finite and >= 0")]
    Weight { name: &'static str, value: f64 },
    #[error("expected [n, 2] distributions, got {0:?}")]
    NotBinary(Vec<usize>),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyWeights {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ConsistencyWeights {
    fn default() -> Self {
        Self {
            rho: 0.7,
            alpha: 0.3,
            beta: 0.1,
        }
    }
}

impl ConsistencyWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        check_rho(self.rho)?;
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::Weight { name, value });
            }
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<(), LossError> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(LossError::Rho(rho))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EasyLossKind {
    SoftCe,
    HardCe,
    #[default]
    SoftDjs,
    HardDjs,
}

impl EasyLossKind {
    pub const ALL: [EasyLossKind; 4] = [Self::SoftCe, Self::HardCe, Self::SoftDjs, Self::HardDjs];

    pub fn name(self) -> &'static str {
        match self {
            Self::SoftCe => "soft-ce",
            Self::HardCe => "hard-ce",
            Self::SoftDjs => "soft-djs",
            Self::HardDjs => "hard-djs",
        }
    }

    fn hard_targets(self) -> bool {
        matches!(self, Self::HardCe | Self::HardDjs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardLossKind {
    /// Hard samples are not used.
    No,
    /// Hard samples treated as unlabeled data under the base risk.
    Nnpu,
    /// Weak/strong self-consistency only.
    #[serde(rename = "self")]
    SelfOnly,
    /// Teacher cross-consistency only.
    Cross,
    #[default]
    Dual,
}

impl HardLossKind {
    pub const ALL: [HardLossKind; 5] = [
        Self::No,
        Self::Nnpu,
        Self::SelfOnly,
        Self::Cross,
        Self::Dual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::No => "no",
            Self::Nnpu => "nnpu",
            Self::SelfOnly => "self",
            Self::Cross => "cross",
            Self::Dual => "dual",
        }
    }

    pub fn uses_cross(self) -> bool {
        matches!(self, Self::Cross | Self::Dual)
    }

    pub fn uses_self(self) -> bool {
        matches!(self, Self::SelfOnly | Self::Dual)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(weak || strong)` with the weak view as a fixed target.
    #[default]
    WeakToStrong,
    /// `KL(strong || weak)`, weak view still fixed.
    StrongToWeak,
}

fn binary_rows(g: &Graph, p: NodeId) -> Result<usize, LossError> {
    match g.shape(p) {
        &[n, 2] => Ok(n),
        s => Err(LossError::NotBinary(s.to_vec())),
    }
}

/// One-hot rows at the argmax of each two-entry row; ties go to the first
/// (positive) class.
pub fn one_hot_argmax(t: &Tensor) -> Tensor {
    let data = t
        .data()
        .chunks(2)
        .flat_map(|r| if r[0] >= r[1] { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Mean over rows of the normalised Jensen-Shannon divergence between
/// predictions `p` and targets `y`, both `[n, 2]`. Targets are treated as
/// constants.
pub fn djs_loss(g: &mut Graph, p: NodeId, y: NodeId, rho: f64) -> Result<NodeId, LossError> {
    check_rho(rho)?;
    binary_rows(g, p)?;
    let y = g.stop_gradient(y);
    let sp = g.scale(p, rho);
    let sy = g.scale(y, 1.0 - rho);
    let m = g.add(sp, sy)?;
    let kl_p = g.kl(p, m)?;
    let kl_y = g.kl(y, m)?;
    let a = g.scale(kl_p, rho);
    let b = g.scale(kl_y, 1.0 - rho);
    let per_row = g.add(a, b)?;
    let mean = g.mean(per_row);
    let z = -(1.0 - rho) * (1.0 - rho).ln();
    Ok(g.scale(mean, 1.0 / z))
}

/// Mean over rows of `-sum_k y_k log p_k`, with the clamped log.
pub fn soft_cross_entropy(g: &mut Graph, p: NodeId, y: NodeId) -> Result<NodeId, LossError> {
    binary_rows(g, p)?;
    let y = g.stop_gradient(y);
    let lp = g.log(p);
    let prod = g.mul(y, lp)?;
    let per_row = g.sum_last(prod);
    let mean = g.mean(per_row);
    Ok(g.neg(mean))
}

/// Easy-sample loss of the given kind against soft `targets`.
pub fn easy_loss(
    g: &mut Graph,
    kind: EasyLossKind,
    p: NodeId,
    targets: &Tensor,
    rho: f64,
) -> Result<NodeId, LossError> {
    let t = if kind.hard_targets() {
        one_hot_argmax(targets)
    } else {
        targets.clone()
    };
    let y = g.constant(t);
    match kind {
        EasyLossKind::SoftCe | EasyLossKind::HardCe => soft_cross_entropy(g, p, y),
        EasyLossKind::SoftDjs | EasyLossKind::HardDjs => djs_loss(g, p, y, rho),
    }
}

/// Mean over rows of `||student - teacher||_2`. The teacher side carries no
/// gradient.
pub fn cross_consistency(
    g: &mut Graph,
    student: NodeId,
    teacher: NodeId,
) -> Result<NodeId, LossError> {
    if g.shape(student) != g.shape(teacher) {
        return Err(GraphError::ShapeMismatch {
            op: "cross_consistency",
            lhs: g.shape(student).to_vec(),
            rhs: g.shape(teacher).to_vec(),
        }
        .into());
    }
    let t = g.stop_gradient(teacher);
    let diff = g.sub(student, t)?;
    let norms = g.l2_norm(diff);
    Ok(g.mean(norms))
}

/// Mean over rows of the KL divergence between weak- and strong-view
/// predictions; the weak view is a fixed target.
pub fn pred_consistency(
    g: &mut Graph,
    weak: NodeId,
    strong: NodeId,
    dir: KlDirection,
) -> Result<NodeId, LossError> {
    binary_rows(g, weak)?;
    let w = g.stop_gradient(weak);
    let kl = match dir {
        KlDirection::WeakToStrong => g.kl(w, strong)?,
        KlDirection::StrongToWeak => g.kl(strong, w)?,
    };
    Ok(g.mean(kl))
}

fn neg_cos_mean(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
    let c = g.cosine(a, b)?;
    let m = g.mean(c);
    Ok(g.neg(m))
}

/// `1/2 D(x_w, f(x_s)) + 1/2 D(x_s, f(x_w))` averaged over rows, with
/// `D = -cos`. With `stop_grad` the raw-feature arguments carry no gradient.
/// Any zero-norm row is rejected.
pub fn feat_consistency(
    g: &mut Graph,
    x_weak: NodeId,
    x_strong: NodeId,
    f: &dyn FeatureMap,
    stop_grad: bool,
) -> Result<NodeId, LossError> {
    let fw = f.map(g, x_weak)?;
    let fs = f.map(g, x_strong)?;
    let (tw, ts) = targets(g, x_weak, x_strong, stop_grad);
    let a = neg_cos_mean(g, tw, fs)?;
    let b = neg_cos_mean(g, ts, fw)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn targets(g: &mut Graph, x_weak: NodeId, x_strong: NodeId, stop_grad: bool) -> (NodeId, NodeId) {
    if stop_grad {
        (g.stop_gradient(x_weak), g.stop_gradient(x_strong))
    } else {
        (x_weak, x_strong)
    }
}

fn row_norms_positive(t: &Tensor) -> Vec<bool> {
    let d = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-12)
        .collect()
}

/// [`feat_consistency`] restricted to rows whose four cosine arguments all
/// have nonzero norm. Returns `None` when no row qualifies, plus the number
/// of rows dropped.
pub fn feat_consistency_nonzero(
    g: &mut Graph,
    x_weak: NodeId,
    x_strong: NodeId,
    f: &dyn FeatureMap,
    stop_grad: bool,
) -> Result<(Option<NodeId>, usize), LossError> {
    let fw = f.map(g, x_weak)?;
    let fs = f.map(g, x_strong)?;
    let masks: Vec<Vec<bool>> = [x_weak, x_strong, fw, fs]
        .iter()
        .map(|&id| row_norms_positive(g.value(id)))
        .collect();
    let n = masks[0].len();
    let keep: Vec<usize> = (0..n).filter(|&i| masks.iter().all(|m| m[i])).collect();
    let dropped = n - keep.len();
    if keep.is_empty() {
        return Ok((None, dropped));
    }
    let (tw, ts) = targets(g, x_weak, x_strong, stop_grad);
    let (tw, ts, fw, fs) = if dropped == 0 {
        (tw, ts, fw, fs)
    } else {
        (
            g.select_rows(tw, &keep)?,
            g.select_rows(ts, &keep)?,
            g.select_rows(fw, &keep)?,
            g.select_rows(fs, &keep)?,
        )
    };
    let a = neg_cos_mean(g, tw, fs)?;
    let b = neg_cos_mean(g, ts, fw)?;
    let s = g.add(a, b)?;
    Ok((Some(g.scale(s, 0.5)), dropped))
}

/// Graph handles for one batch of hard samples.
#[derive(Clone, Copy, Debug)]
pub struct HardInputs {
    /// Student first-layer features on the weak view.
    pub student_first: NodeId,
    /// Teacher first-layer features on the same weak view.
    pub teacher_first: NodeId,
    /// Student predictions `[n, 2]` on the weak and strong views.
    pub p_weak: NodeId,
    pub p_strong: NodeId,
    /// Student last-layer features on the weak and strong views.
    pub feat_weak: NodeId,
    pub feat_strong: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyOptions {
    pub cross: bool,
    pub self_consistency: bool,
    pub kl_direction: KlDirection,
    pub feat_stop_grad: bool,
}

impl ConsistencyOptions {
    pub fn for_kind(kind: HardLossKind) -> Self {
        Self {
            cross: kind.uses_cross(),
            self_consistency: kind.uses_self(),
            kl_direction: KlDirection::default(),
            feat_stop_grad: true,
        }
    }
}

/// Values of the individual terms of one [`hard_loss`] evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HardTerms {
    pub cross: f64,
    pub pred: f64,
    pub feat: f64,
    pub total: f64,
    /// Rows left out of the feature term for having a zero-norm argument.
    pub feat_dropped: usize,
}

/// `L_cross + alpha L_pred + beta L_feat`, with the terms disabled in `opts`
/// left out. Returns `None` when every term is disabled.
pub fn hard_loss(
    g: &mut Graph,
    x: &HardInputs,
    head: &dyn FeatureMap,
    weights: &ConsistencyWeights,
    opts: &ConsistencyOptions,
) -> Result<Option<(NodeId, HardTerms)>, LossError> {
    weights.validate()?;
    let mut terms = HardTerms::default();
    let mut parts = Vec::new();
    if opts.cross {
        let c = cross_consistency(g, x.student_first, x.teacher_first)?;
        terms.cross = g.item(c);
        parts.push(c);
    }
    if opts.self_consistency {
        let p = pred_consistency(g, x.p_weak, x.p_strong, opts.kl_direction)?;
        terms.pred = g.item(p);
        parts.push(g.scale(p, weights.alpha));
        let (f, dropped) =
            feat_consistency_nonzero(g, x.feat_weak, x.feat_strong, head, opts.feat_stop_grad)?;
        terms.feat_dropped = dropped;
        if let Some(f) = f {
            terms.feat = g.item(f);
            parts.push(g.scale(f, weights.beta));
        }
    }
    let Some(&first) = parts.first() else {
        return Ok(None);
    };
    let mut total = first;
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    terms.total = g.item(total);
    Ok(Some((total, terms)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Identity;

    fn dist(g: &mut Graph, rows: &[[f64; 2]]) -> NodeId {
        let data = rows.iter().flatten().copied().collect();
        g.param(Tensor::new(vec![rows.len(), 2], data).unwrap())
    }

    #[test]
    fn djs_zero_when_equal() {
        let mut g = Graph::new();
        let p = dist(&mut g, &[[0.3, 0.7]]);
        let y = dist(&mut g, &[[0.3, 0.7]]);
        for rho in [0.1, 0.5, 0.7, 0.95] {
            let l = djs_loss(&mut g, p, y, rho).unwrap();
            assert!(g.item(l).abs() < 1e-15);
        }
    }

    #[test]
    fn djs_gradient_only_through_prediction() {
        let mut g = Graph::new();
        let p = dist(&mut g, &[[0.8, 0.2]]);
        let y = dist(&mut g, &[[0.4, 0.6]]);
        let l = djs_loss(&mut g, p, y, 0.7).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(y).data().iter().all(|&v| v == 0.0));
        assert!(g.grad(p).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn degenerate_rho_rejected() {
        let mut g = Graph::new();
        let p = dist(&mut g, &[[0.5, 0.5]]);
        assert_eq!(djs_loss(&mut g, p, p, 0.0), Err(LossError::Rho(0.0)));
        assert_eq!(djs_loss(&mut g, p, p, 1.0), Err(LossError::Rho(1.0)));
    }

    #[test]
    fn cross_consistency_unit_difference() {
        let mut g = Graph::new();
        let s = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let t = g.param(Tensor::from_rows(&[&[0.0, 2.0, 3.0]]).unwrap());
        let c = cross_consistency(&mut g, s, t).unwrap();
        assert_eq!(g.item(c), 1.0);
        g.backward(c).unwrap();
        assert!(g.grad(t).data().iter().all(|&v| v == 0.0));
        let same = cross_consistency(&mut g, s, s).unwrap();
        assert_eq!(g.item(same), 0.0);
        let short = g.param(Tensor::from_rows(&[&[0.0, 2.0]]).unwrap());
        assert!(cross_consistency(&mut g, s, short).is_err());
    }

    #[test]
    fn pred_consistency_values() {
        let mut g = Graph::new();
        let w = dist(&mut g, &[[0.8, 0.2]]);
        let s = dist(&mut g, &[[0.5, 0.5]]);
        let k = pred_consistency(&mut g, w, s, KlDirection::WeakToStrong).unwrap();
        let expected = 0.8 * (1.6f64).ln() + 0.2 * (0.4f64).ln();
        assert!((g.item(k) - expected).abs() < 1e-12);
        g.backward(k).unwrap();
        assert!(g.grad(w).data().iter().all(|&v| v == 0.0));
        let same = pred_consistency(&mut g, w, w, KlDirection::StrongToWeak).unwrap();
        assert_eq!(g.item(same), 0.0);
    }

    #[test]
    fn feat_consistency_identity_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap());
        let nx = g.neg(x);
        let same = feat_consistency(&mut g, x, x, &Identity, true).unwrap();
        assert!((g.item(same) + 1.0).abs() < 1e-12);
        let opp = feat_consistency(&mut g, x, nx, &Identity, true).unwrap();
        assert!((g.item(opp) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rows() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]]).unwrap());
        assert!(matches!(
            feat_consistency(&mut g, x, x, &Identity, true),
            Err(LossError::Graph(GraphError::ZeroNorm { row: 1, .. }))
        ));
        let (l, dropped) = feat_consistency_nonzero(&mut g, x, x, &Identity, true).unwrap();
        assert_eq!(dropped, 1);
        assert!((g.item(l.unwrap()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_loss_composition() {
        let mut g = Graph::new();
        let first = g.param(Tensor::from_rows(&[&[0.2, 0.4]]).unwrap());
        let p = dist(&mut g, &[[0.6, 0.4]]);
        let feat = g.param(Tensor::from_rows(&[&[1.0, 3.0]]).unwrap());
        let x = HardInputs {
            student_first: first,
            teacher_first: first,
            p_weak: p,
            p_strong: p,
            feat_weak: feat,
            feat_strong: feat,
        };
        let w = ConsistencyWeights::default();
        let opts = ConsistencyOptions::for_kind(HardLossKind::Dual);
        let (_, t) = hard_loss(&mut g, &x, &Identity, &w, &opts)
            .unwrap()
            .unwrap();
        assert_eq!(t.cross, 0.0);
        assert_eq!(t.pred, 0.0);
        assert!((t.total + w.beta).abs() < 1e-12);
        let none = ConsistencyOptions::for_kind(HardLossKind::No);
        assert!(hard_loss(&mut g, &x, &Identity, &w, &none)
            .unwrap()
            .is_none());
    }

    #[test]
    fn one_hot_ties_go_positive() {
        let t = Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.2, 0.8, 0.9, 0.1]).unwrap();
        assert_eq!(one_hot_argmax(&t).data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }
}
