//! Base training, splitting, student training and teacher replacement.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId, Tensor};
use crate::data::{
    AugmentConfig, AugmentKind, AugmentationPipeline, DataError, Label, LabeledSet, PuDataset,
    PuTrain, Samples,
};
use crate::losses::{
    easy_loss, hard_loss, ConsistencyOptions, ConsistencyWeights, EasyLossKind, HardInputs,
    HardLossKind, KlDirection, LossError,
};
use crate::models::{prob_node, Architecture, ModelError, Network, PredictorHead};
use crate::optim::OptimizerConfig;
use crate::risk::{pu_risk, PosNegNorm, RiskError, RiskEstimator};
use crate::rng::{self, Rng};
use crate::splitter::{pseudo_label, train_temporary, SplitError, SplitResult, TempConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{phase} loss diverged to {loss} at epoch {epoch} (iteration {iteration})")]
    Diverged {
        phase: Phase,
        iteration: usize,
        epoch: usize,
        loss: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot evaluate on an empty test set")]
    EmptyTestSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Base,
    Temp,
    Student,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Temp => "temp",
            Phase::Student => "student",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    64
}

impl PhaseConfig {
    pub fn adam(lr: f64, epochs: usize) -> Self {
        Self {
            optimizer: OptimizerConfig::Adam { lr },
            epochs,
            batch_size: default_batch(),
        }
    }
}

/// Which unlabeled samples the hard-sample objective sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyScope {
    #[default]
    Hard,
    All,
}

impl ConsistencyScope {
    pub fn name(self) -> &'static str {
        match self {
            ConsistencyScope::Hard => "hard",
            ConsistencyScope::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base: PhaseConfig,
    pub temp: TempConfig,
    pub student: PhaseConfig,
    pub risk: RiskEstimator,
    pub pos_neg_norm: PosNegNorm,
    pub easy_loss: EasyLossKind,
    pub hard_loss: HardLossKind,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub iterations: usize,
    /// Without early stopping every unlabeled sample is easy.
    pub early_stop: bool,
    pub consistency_scope: ConsistencyScope,
    pub kl_direction: KlDirection,
    pub feat_stop_grad: bool,
    /// Labeled positives join the easy stream with `(1, 0)` targets.
    pub include_positives: bool,
    /// Weak augmentation during base training.
    pub base_augment: bool,
    pub augment: AugmentConfig,
    /// Defaults to an MLP for vectors and a small CNN for images.
    pub architecture: Option<Architecture>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base: PhaseConfig::adam(1e-4, 50),
            temp: TempConfig::default(),
            student: PhaseConfig::adam(5e-5, 100),
            risk: RiskEstimator::Nnpu,
            pos_neg_norm: PosNegNorm::Positives,
            easy_loss: EasyLossKind::SoftDjs,
            hard_loss: HardLossKind::Dual,
            rho: 0.7,
            alpha: 0.3,
            beta: 0.1,
            tau: 0.92,
            iterations: 2,
            early_stop: true,
            consistency_scope: ConsistencyScope::Hard,
            kl_direction: KlDirection::WeakToStrong,
            feat_stop_grad: true,
            include_positives: true,
            base_augment: true,
            augment: AugmentConfig::default(),
            architecture: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> ConsistencyWeights {
        ConsistencyWeights {
            rho: self.rho,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Range checks, returned as `(key, message)` pairs.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push((k.to_string(), m));
        for (name, p) in [("base", &self.base), ("student", &self.student)] {
            if p.epochs == 0 {
                bad(&format!("{name}.epochs"), "must be > 0".into());
            }
            if p.batch_size < 2 {
                bad(
                    &format!("{name}.batch_size"),
                    format!("{} must be >= 2", p.batch_size),
                );
            }
            check_lr(&p.optimizer, &format!("{name}.optimizer"), &mut bad);
        }
        if self.temp.max_epochs == 0 {
            bad("temp.max_epochs", "must be > 0".into());
        }
        if self.temp.batch_size == 0 {
            bad("temp.batch_size", "must be > 0".into());
        }
        check_lr(&self.temp.optimizer, "temp.optimizer", &mut bad);
        if !(self.rho > 0.0 && self.rho < 1.0) {
            bad(
                "rho",
                format!("{} must lie strictly inside (0, 1)", self.rho),
            );
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                bad(k, format!("{v} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            bad("tau", format!("{} must lie in [0, 1]", self.tau));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) {
            bad(
                "augment.flip_prob",
                format!("{} must lie in [0, 1]", a.flip_prob),
            );
        }
        if !(0.0..=1.0).contains(&a.dropout_prob) {
            bad(
                "augment.dropout_prob",
                format!("{} must lie in [0, 1]", a.dropout_prob),
            );
        }
        if !(a.noise_sigma.is_finite() && a.noise_sigma >= 0.0) {
            bad(
                "augment.noise_sigma",
                format!("{} must be finite and >= 0", a.noise_sigma),
            );
        }
        if !(a.jitter[0] >= 0.0 && a.jitter[0] <= a.jitter[1] && a.jitter[1].is_finite()) {
            bad(
                "augment.jitter",
                format!("{:?} must be an ordered nonnegative range", a.jitter),
            );
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.problems().first() {
            None => Ok(()),
            Some((k, m)) => Err(PipelineError::Config(format!("{k}: {m}"))),
        }
    }

    pub fn architecture_for(&self, sample_shape: &[usize]) -> Result<Architecture, PipelineError> {
        if let Some(a) = &self.architecture {
            return Ok(a.clone());
        }
        match *sample_shape {
            [d] => Ok(Architecture::default_mlp(d)),
            [c, h, w] => Ok(Architecture::default_cnn(c, h, w)),
            _ => Err(PipelineError::Config(format!(
                "no default architecture for samples of shape {sample_shape:?}"
            ))),
        }
    }
}

fn check_lr(o: &OptimizerConfig, key: &str, bad: &mut impl FnMut(&str, String)) {
    let lr = o.lr();
    if !(lr.is_finite() && lr > 0.0) {
        bad(&format!("{key}.lr"), format!("{lr} must be finite and > 0"));
    }
    if let OptimizerConfig::Sgd { momentum, .. } = o {
        if !(0.0..1.0).contains(momentum) {
            bad(
                &format!("{key}.momentum"),
                format!("{momentum} must lie in [0, 1)"),
            );
        }
    }
}

/// One row of the training curves.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    /// Temp-phase agreement with the pseudo-labels.
    pub agreement: Option<f64>,
}

/// Fraction of `test` classified correctly by the sign of the logit; a zero
/// logit counts as positive.
pub fn evaluate(model: &Network, test: &LabeledSet) -> Result<f64, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::EmptyTestSet);
    }
    let logits = model.logits(&test.samples.to_tensor())?;
    let hits = logits
        .iter()
        .zip(&test.labels)
        .filter(|(&z, &l)| Label::from_positive(z >= 0.0) == l)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Shuffled cyclic index stream.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Cycler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut c = Self {
            items: (0..n).collect(),
            pos: 0,
            rng,
        };
        c.items.shuffle(&mut c.rng);
        c
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.items.is_empty() {
            if self.pos == self.items.len() {
                self.items.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn batch_of(samples: &Samples, idx: &[usize], aug: Option<&mut AugmentationPipeline>) -> Tensor {
    match aug {
        Some(a) => a.batch(samples, idx),
        None => samples.gather(idx),
    }
}

fn grads_of(g: &Graph, ids: &[NodeId]) -> Vec<Tensor> {
    ids.iter().map(|&id| g.grad(id)).collect()
}

/// Trains a fresh network on the PU risk. Every batch holds at least one
/// labeled positive; positives cycle while each epoch passes over the
/// unlabeled set once.
pub fn train_base(
    train: &PuTrain,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Network, Vec<CurvePoint>), PipelineError> {
    let arch = cfg.architecture_for(train.unlabeled.sample_shape())?;
    let mut net = Network::init(arch, &mut rng::stream(seed, "base-init"))?;
    let (n_p, n_u) = (train.positives.len(), train.unlabeled.len());
    if n_p == 0 || n_u == 0 {
        return Err(RiskError::EmptyBatch(if n_p == 0 { "positive" } else { "unlabeled" }).into());
    }
    let b = cfg.base.batch_size;
    let k = ((b as f64 * n_p as f64 / (n_p + n_u) as f64).round() as usize).clamp(1, b - 1);
    let per_step_u = b - k;
    let steps = n_u.div_ceil(per_step_u);
    let mut pos = Cycler::new(n_p, rng::stream(seed, "base-pos"));
    let mut order_rng = rng::stream(seed, "base-order");
    let mut aug = cfg.base_augment.then(|| {
        AugmentationPipeline::new(
            AugmentKind::Weak,
            cfg.augment.clone(),
            rng::derive_seed(seed, "base-aug"),
        )
    });
    let mut opt = cfg.base.optimizer.build();
    let mut curve = Vec::with_capacity(cfg.base.epochs);
    for epoch in 0..cfg.base.epochs {
        let mut order: Vec<usize> = (0..n_u).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for s in 0..steps {
            let u_idx = &order[s * per_step_u..((s + 1) * per_step_u).min(n_u)];
            let p_idx = pos.take(k);
            let xp = batch_of(&train.positives, &p_idx, aug.as_mut());
            let xu = batch_of(&train.unlabeled, u_idx, aug.as_mut());
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let xp = g.constant(xp);
            let xu = g.constant(xu);
            let zp = net.forward(&mut g, &bound, xp)?.logits;
            let zu = net.forward(&mut g, &bound, xu)?.logits;
            let (loss, _) = pu_risk(&mut g, zp, zu, train.prior, cfg.risk, cfg.pos_neg_norm)?;
            let lv = g.item(loss);
            if !lv.is_finite() {
                return Err(PipelineError::Diverged {
                    phase: Phase::Base,
                    iteration: 0,
                    epoch,
                    loss: lv,
                });
            }
            total += lv;
            g.backward(loss)?;
            opt.step(net.params_mut(), &grads_of(&g, &bound.0));
        }
        curve.push(CurvePoint {
            iteration: 0,
            phase: Phase::Base,
            epoch,
            loss: total / steps as f64,
            agreement: None,
        });
    }
    Ok((net, curve))
}

/// Where a sample in the easy stream comes from.
#[derive(Clone, Copy, Debug)]
enum Source {
    Unlabeled(usize),
    Positive(usize),
}

struct StudentData<'a> {
    train: &'a PuTrain,
    easy: Vec<Source>,
    easy_targets: Vec<[f64; 2]>,
    hard: Vec<usize>,
}

impl StudentData<'_> {
    fn easy_batch(&self, picks: &[usize], aug: &mut AugmentationPipeline) -> (Tensor, Tensor) {
        let t = self.train;
        let shape = t.unlabeled.sample_shape().to_vec();
        let mut data = Vec::with_capacity(picks.len() * t.unlabeled.sample_len());
        let mut targets = Vec::with_capacity(picks.len() * 2);
        for &k in picks {
            let raw = match self.easy[k] {
                Source::Unlabeled(i) => t.unlabeled.get(i),
                Source::Positive(i) => t.positives.get(i),
            };
            data.extend(aug.augment(raw, &shape));
            targets.extend(self.easy_targets[k]);
        }
        let mut full = vec![picks.len()];
        full.extend(&shape);
        (
            Tensor::new(full, data).expect("batch shape"),
            Tensor::new(vec![picks.len(), 2], targets).expect("targets"),
        )
    }
}

/// Per-epoch statistics of a student run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StudentStats {
    pub steps_per_epoch: usize,
    pub hard_skipped: bool,
    /// Rows dropped from the feature term for a zero-norm argument.
    pub feat_rows_dropped: usize,
}

/// Trains a freshly initialised student against the frozen `teacher`:
/// the easy loss on easy samples (and labeled positives) plus the
/// configured hard-sample objective on hard samples.
pub fn train_student(
    teacher: &Network,
    train: &PuTrain,
    split: &SplitResult,
    pseudo: &crate::splitter::PseudoLabels,
    cfg: &TrainConfig,
    seed: u64,
    iteration: usize,
) -> Result<(Network, Vec<CurvePoint>, StudentStats), PipelineError> {
    let tag = |s: &str| format!("{s}-{iteration}");
    let arch = teacher.architecture().clone();
    let mut student = Network::init(arch.clone(), &mut rng::stream(seed, &tag("student-init")))?;
    let mut head = PredictorHead::init(
        arch.feature_dim(),
        &mut rng::stream(seed, &tag("head-init")),
    );

    let mut easy: Vec<Source> = split.easy.iter().map(|&i| Source::Unlabeled(i)).collect();
    let mut easy_targets: Vec<[f64; 2]> = split.easy.iter().map(|&i| pseudo.row(i)).collect();
    if cfg.include_positives {
        easy.extend((0..train.positives.len()).map(Source::Positive));
        easy_targets.extend(std::iter::repeat_n([1.0, 0.0], train.positives.len()));
    }
    let hard = match cfg.consistency_scope {
        ConsistencyScope::Hard => split.hard.clone(),
        ConsistencyScope::All => (0..train.unlabeled.len()).collect(),
    };
    let data = StudentData {
        train,
        easy,
        easy_targets,
        hard,
    };
    let mut stats = StudentStats::default();
    let hard_active = cfg.hard_loss != HardLossKind::No && !data.hard.is_empty();
    if cfg.hard_loss != HardLossKind::No && data.hard.is_empty() {
        log::warn!(
            "seed {seed} iteration {iteration}: hard set is empty, hard-sample term skipped"
        );
        stats.hard_skipped = true;
    }
    let n_e = data.easy.len();
    let n_h = if hard_active { data.hard.len() } else { 0 };
    if n_e + n_h == 0 {
        return Err(PipelineError::Config(
            "student phase has no training samples".into(),
        ));
    }
    let b = cfg.student.batch_size;
    let (b_e, b_h) = match (n_e, n_h) {
        (0, _) => (0, b),
        (_, 0) => (b, 0),
        _ => {
            let e = ((b as f64 * n_e as f64 / (n_e + n_h) as f64).round() as usize).clamp(1, b - 1);
            (e, b - e)
        }
    };
    let steps = (n_e + n_h).div_ceil(b);
    stats.steps_per_epoch = steps;

    let mut easy_cycle = Cycler::new(n_e, rng::stream(seed, &tag("easy-order")));
    let mut hard_cycle = Cycler::new(n_h, rng::stream(seed, &tag("hard-order")));
    let mut pos_cycle = Cycler::new(train.positives.len(), rng::stream(seed, &tag("pos-order")));
    let mut weak = AugmentationPipeline::new(
        AugmentKind::Weak,
        cfg.augment.clone(),
        rng::derive_seed(seed, &tag("student-weak")),
    );
    let mut strong = AugmentationPipeline::new(
        AugmentKind::Strong,
        cfg.augment.clone(),
        rng::derive_seed(seed, &tag("student-strong")),
    );
    let mut opt = cfg.student.optimizer.build();
    let mut head_opt = cfg.student.optimizer.build();
    let weights = cfg.weights();
    let opts = ConsistencyOptions {
        cross: cfg.hard_loss.uses_cross(),
        self_consistency: cfg.hard_loss.uses_self(),
        kl_direction: cfg.kl_direction,
        feat_stop_grad: cfg.feat_stop_grad,
    };
    let n_u = train.unlabeled.len();
    let n_p = train.positives.len();

    let mut curve = Vec::with_capacity(cfg.student.epochs);
    for epoch in 0..cfg.student.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let mut g = Graph::new();
            let bound = student.bind(&mut g, true);
            let head_bound = head.bind(&mut g, true);
            let mut parts: Vec<NodeId> = Vec::with_capacity(2);

            if b_e > 0 {
                let picks = easy_cycle.take(b_e);
                let (x, targets) = data.easy_batch(&picks, &mut weak);
                let x = g.constant(x);
                let taps = student.forward(&mut g, &bound, x)?;
                let p = prob_node(&mut g, taps.logits)?;
                parts.push(easy_loss(&mut g, cfg.easy_loss, p, &targets, cfg.rho)?);
            }

            if b_h > 0 {
                let picks: Vec<usize> = hard_cycle
                    .take(b_h)
                    .into_iter()
                    .map(|k| data.hard[k])
                    .collect();
                match cfg.hard_loss {
                    HardLossKind::No => {}
                    HardLossKind::Nnpu => {
                        let k = ((picks.len() as f64 * n_p as f64 / n_u as f64).round() as usize)
                            .max(1);
                        let xp = weak.batch(&train.positives, &pos_cycle.take(k));
                        let xu = weak.batch(&train.unlabeled, &picks);
                        let xp = g.constant(xp);
                        let xu = g.constant(xu);
                        let zp = student.forward(&mut g, &bound, xp)?.logits;
                        let zu = student.forward(&mut g, &bound, xu)?.logits;
                        let (r, _) =
                            pu_risk(&mut g, zp, zu, train.prior, cfg.risk, cfg.pos_neg_norm)?;
                        parts.push(r);
                    }
                    _ => {
                        let xw = weak.batch(&train.unlabeled, &picks);
                        let xs = strong.batch(&train.unlabeled, &picks);
                        let xw = g.constant(xw);
                        let xs = g.constant(xs);
                        let tw = student.forward(&mut g, &bound, xw)?;
                        let ts = student.forward(&mut g, &bound, xs)?;
                        let teacher_bound = teacher.bind(&mut g, false);
                        let teacher_first = teacher.forward(&mut g, &teacher_bound, xw)?.first;
                        let p_weak = prob_node(&mut g, tw.logits)?;
                        let p_strong = prob_node(&mut g, ts.logits)?;
                        let inputs = HardInputs {
                            student_first: tw.first,
                            teacher_first,
                            p_weak,
                            p_strong,
                            feat_weak: tw.last,
                            feat_strong: ts.last,
                        };
                        if let Some((h, terms)) =
                            hard_loss(&mut g, &inputs, &head_bound, &weights, &opts)?
                        {
                            stats.feat_rows_dropped += terms.feat_dropped;
                            parts.push(h);
                        }
                    }
                }
            }

            let Some(&first) = parts.first() else {
                continue;
            };
            let loss = if let Some(&second) = parts.get(1) {
                g.add(first, second)?
            } else {
                first
            };
            let lv = g.item(loss);
            if !lv.is_finite() {
                return Err(PipelineError::Diverged {
                    phase: Phase::Student,
                    iteration,
                    epoch,
                    loss: lv,
                });
            }
            total += lv;
            g.backward(loss)?;
            opt.step(student.params_mut(), &grads_of(&g, &bound.0));
            head_opt.step(head.params_mut(), &grads_of(&g, &head_bound.0));
        }
        curve.push(CurvePoint {
            iteration,
            phase: Phase::Student,
            epoch,
            loss: total / steps as f64,
            agreement: None,
        });
    }
    Ok((student, curve, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitStats {
    pub n_easy: usize,
    pub n_hard: usize,
    pub stop_epoch: usize,
    pub stop_accuracy: f64,
    pub reached_tau: bool,
}

impl From<&SplitResult> for SplitStats {
    fn from(s: &SplitResult) -> Self {
        Self {
            n_easy: s.easy.len(),
            n_hard: s.hard.len(),
            stop_epoch: s.stop_epoch,
            stop_accuracy: s.stop_accuracy,
            reached_tau: s.reached_tau,
        }
    }
}

/// Test accuracy after one iteration; iteration 0 is the base model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub accuracy: f64,
    pub split: Option<SplitStats>,
    pub student: Option<StudentStats>,
}

/// Everything one seed produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub iterations: Vec<IterationReport>,
    /// Base model first, then one student per iteration.
    pub models: Vec<Network>,
    pub curves: Vec<CurvePoint>,
}

impl SeedRun {
    pub fn final_accuracy(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn accuracy_at(&self, iteration: usize) -> Option<f64> {
        self.iterations.get(iteration).map(|r| r.accuracy)
    }
}

/// Full run for one seed: base training, then `iterations` rounds of
/// pseudo-labeling, splitting and student training, each student becoming
/// the next teacher.
pub fn run_split_pu(
    dataset: &PuDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedRun, PipelineError> {
    cfg.validate()?;
    let train = &dataset.train;
    let (base, mut curves) = train_base(train, cfg, seed)?;
    let mut iterations = vec![IterationReport {
        iteration: 0,
        accuracy: evaluate(&base, &dataset.test)?,
        split: None,
        student: None,
    }];
    let mut models = vec![base];
    for it in 1..=cfg.iterations {
        let teacher = models.last().expect("teacher");
        let pseudo = pseudo_label(teacher, &train.unlabeled)?;
        let split = if cfg.early_stop {
            let init = Network::init(
                teacher.architecture().clone(),
                &mut rng::stream(seed, &format!("temp-init-{it}")),
            )?;
            let out = train_temporary(
                init,
                &train.unlabeled,
                &pseudo,
                &cfg.temp,
                &cfg.augment,
                cfg.tau,
                rng::derive_seed(seed, &format!("temp-{it}")),
            )?;
            if !out.split.reached_tau {
                log::warn!(
                    "seed {seed} iteration {it}: agreement {:.4} never exceeded tau {} within {} epochs",
                    out.split.stop_accuracy,
                    cfg.tau,
                    cfg.temp.max_epochs
                );
            }
            curves.extend(out.epochs.iter().map(|e| CurvePoint {
                iteration: it,
                phase: Phase::Temp,
                epoch: e.epoch,
                loss: e.loss,
                agreement: Some(e.agreement),
            }));
            out.split
        } else {
            SplitResult::all_easy(train.unlabeled.len())
        };
        let (student, curve, stats) =
            train_student(teacher, train, &split, &pseudo, cfg, seed, it)?;
        curves.extend(curve);
        iterations.push(IterationReport {
            iteration: it,
            accuracy: evaluate(&student, &dataset.test)?,
            split: cfg.early_stop.then(|| SplitStats::from(&split)),
            student: Some(stats),
        });
        models.push(student);
    }
    Ok(SeedRun {
        seed,
        iterations,
        models,
        curves,
    })
}
