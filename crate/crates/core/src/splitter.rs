//! Pseudo-labeling and the early-stop easy/hard split.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, Tensor};
use crate::data::{
    AugmentConfig, AugmentKind, AugmentationPipeline, DataError, Label, OracleAccess, OracleLabels,
    Samples,
};
use crate::losses::{soft_cross_entropy, LossError};
use crate::models::{predict_prob, prob_node, ModelError, Network};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("temporary model loss became {loss} at epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("pseudo-labels cover {labels} samples but the unlabeled set has {samples}")]
    Coverage { labels: usize, samples: usize },
    #[error("invalid temporary-model setting: {0}")]
    Config(String),
}

/// Soft pseudo-labels `[n_u, 2]` ordered `(positive, negative)`, row `i`
/// belonging to unlabeled sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    probs: Tensor,
}

impl PseudoLabels {
    pub fn from_logits(logits: &[f64]) -> Self {
        let data = logits.iter().flat_map(|&z| predict_prob(z)).collect();
        Self {
            probs: Tensor::new(vec![logits.len(), 2], data).expect("two columns"),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn row(&self, i: usize) -> [f64; 2] {
        let d = self.probs.data();
        [d[2 * i], d[2 * i + 1]]
    }

    /// Argmax label of sample `i`; a tie counts as positive.
    pub fn hard(&self, i: usize) -> Label {
        let [p, n] = self.row(i);
        Label::from_positive(p >= n)
    }

    /// Rows for the given indices as a `[k, 2]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.row(i)).collect();
        Tensor::new(vec![indices.len(), 2], data).expect("two columns")
    }
}

/// Pseudo-labels from the base model's predictions on the unlabeled set.
pub fn pseudo_label(base: &Network, unlabeled: &Samples) -> Result<PseudoLabels, SplitError> {
    Ok(PseudoLabels::from_logits(
        &base.logits(&unlabeled.to_tensor())?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TempConfig {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Train on weakly augmented inputs.
    pub augment: bool,
}

impl Default for TempConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::Sgd {
                lr: 1e-3,
                momentum: 0.9,
            },
            max_epochs: 200,
            batch_size: 64,
            augment: false,
        }
    }
}

/// Fraction of samples whose argmax prediction under `logits` matches the
/// pseudo-label, plus the per-sample agreement mask.
pub fn agreement(logits: &[f64], pseudo: &PseudoLabels) -> (f64, Vec<bool>) {
    let agree: Vec<bool> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| Label::from_positive(z >= 0.0) == pseudo.hard(i))
        .collect();
    let n = agree.iter().filter(|&&a| a).count();
    (n as f64 / agree.len().max(1) as f64, agree)
}

/// Epoch-by-epoch distillation of a temporary model onto soft pseudo-labels.
pub struct TempTrainer<'a> {
    net: Network,
    unlabeled: &'a Samples,
    pseudo: &'a PseudoLabels,
    cfg: TempConfig,
    opt: Box<dyn Optimizer + Send>,
    order_rng: Rng,
    augment: Option<AugmentationPipeline>,
    epoch: usize,
    last_mask: Vec<bool>,
}

/// Outcome of one finished epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub agreement: f64,
}

impl<'a> TempTrainer<'a> {
    pub fn new(
        init: Network,
        unlabeled: &'a Samples,
        pseudo: &'a PseudoLabels,
        cfg: TempConfig,
        augment: &AugmentConfig,
        seed: u64,
    ) -> Result<Self, SplitError> {
        if pseudo.len() != unlabeled.len() {
            return Err(SplitError::Coverage {
                labels: pseudo.len(),
                samples: unlabeled.len(),
            });
        }
        if cfg.batch_size == 0 || cfg.max_epochs == 0 {
            return Err(SplitError::Config(
                "batch size and max epochs must be positive".into(),
            ));
        }
        let augment = cfg.augment.then(|| {
            AugmentationPipeline::new(
                AugmentKind::Weak,
                augment.clone(),
                rng::derive_seed(seed, "temp"),
            )
        });
        Ok(Self {
            net: init,
            unlabeled,
            pseudo,
            opt: cfg.optimizer.build(),
            cfg,
            order_rng: rng::stream(seed, "temp-order"),
            augment,
            epoch: 0,
            last_mask: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    /// Epochs completed so far.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Per-sample agreement after the last completed epoch.
    pub fn agreement_mask(&self) -> &[bool] {
        &self.last_mask
    }

    pub fn run_epoch(&mut self) -> Result<EpochStat, SplitError> {
        let n = self.unlabeled.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.order_rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let x = match &mut self.augment {
                Some(a) => a.batch(self.unlabeled, batch),
                None => self.unlabeled.gather(batch),
            };
            let mut g = Graph::new();
            let bound = self.net.bind(&mut g, true);
            let xi = g.constant(x);
            let taps = self.net.forward(&mut g, &bound, xi)?;
            let p = prob_node(&mut g, taps.logits)?;
            let y = g.constant(self.pseudo.gather(batch));
            let loss = soft_cross_entropy(&mut g, p, y)?;
            let lv = g.item(loss);
            if !lv.is_finite() {
                return Err(SplitError::Diverged {
                    epoch: self.epoch,
                    loss: lv,
                });
            }
            total += lv * batch.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor> = bound.0.iter().map(|&id| g.grad(id)).collect();
            self.opt.step(self.net.params_mut(), &grads);
        }
        let logits = self.net.logits(&self.unlabeled.to_tensor())?;
        let (acc, mask) = agreement(&logits, self.pseudo);
        self.last_mask = mask;
        let stat = EpochStat {
            epoch: self.epoch,
            loss: total / n as f64,
            agreement: acc,
        };
        self.epoch += 1;
        Ok(stat)
    }

    /// Split at the current state; `stop_epoch` is the last completed epoch.
    pub fn split(&self, reached_tau: bool) -> SplitResult {
        SplitResult::from_mask(&self.last_mask, self.epoch.saturating_sub(1), reached_tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitResult {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    /// Zero-based epoch after which training stopped.
    pub stop_epoch: usize,
    /// Agreement with the pseudo-labels at the stop.
    pub stop_accuracy: f64,
    /// False when `max_epochs` ran out before agreement exceeded tau.
    pub reached_tau: bool,
}

impl SplitResult {
    /// Agreeing samples are easy, the rest hard.
    pub fn from_mask(agree: &[bool], stop_epoch: usize, reached_tau: bool) -> Self {
        let (easy, hard): (Vec<usize>, Vec<usize>) = (0..agree.len()).partition(|&i| agree[i]);
        Self {
            stop_accuracy: easy.len() as f64 / agree.len().max(1) as f64,
            easy,
            hard,
            stop_epoch,
            reached_tau,
        }
    }

    /// Every sample is easy; used when early stopping is disabled.
    pub fn all_easy(n: usize) -> Self {
        Self::from_mask(&vec![true; n], 0, true)
    }

    pub fn n_unlabeled(&self) -> usize {
        self.easy.len() + self.hard.len()
    }
}

#[derive(Clone, Debug)]
pub struct TempOutcome {
    pub network: Network,
    pub epochs: Vec<EpochStat>,
    pub split: SplitResult,
}

/// Trains `init` on the pseudo-labels until agreement exceeds `tau` or
/// `max_epochs` run out. The latter is reported through
/// [`SplitResult::reached_tau`].
pub fn train_temporary(
    init: Network,
    unlabeled: &Samples,
    pseudo: &PseudoLabels,
    cfg: &TempConfig,
    augment: &AugmentConfig,
    tau: f64,
    seed: u64,
) -> Result<TempOutcome, SplitError> {
    let mut t = TempTrainer::new(init, unlabeled, pseudo, cfg.clone(), augment, seed)?;
    let mut epochs = Vec::new();
    let mut reached = false;
    while t.epochs_done() < cfg.max_epochs {
        let s = t.run_epoch()?;
        epochs.push(s);
        if s.agreement > tau {
            reached = true;
            break;
        }
    }
    let split = t.split(reached);
    Ok(TempOutcome {
        network: t.into_network(),
        epochs,
        split,
    })
}

/// Easy/hard partition for a trained temporary model: samples where its
/// argmax disagrees with the pseudo-label are hard.
pub fn early_stop_split(
    temp: &Network,
    unlabeled: &Samples,
    pseudo: &PseudoLabels,
    stop_epoch: usize,
    tau: f64,
) -> Result<SplitResult, SplitError> {
    let logits = temp.logits(&unlabeled.to_tensor())?;
    let (acc, mask) = agreement(&logits, pseudo);
    Ok(SplitResult::from_mask(&mask, stop_epoch, acc > tau))
}

/// Oracle noise statistics of one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitQuality {
    pub tau: f64,
    pub stop_epoch: usize,
    pub n_easy: usize,
    pub n_hard: usize,
    pub noisy_easy: usize,
    pub noisy_hard: usize,
    pub stop_accuracy: f64,
    pub reached_tau: bool,
}

impl SplitQuality {
    fn rate(noisy: usize, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            noisy as f64 / n as f64
        }
    }

    pub fn noise_rate_easy(&self) -> f64 {
        Self::rate(self.noisy_easy, self.n_easy)
    }

    pub fn noise_rate_hard(&self) -> f64 {
        Self::rate(self.noisy_hard, self.n_hard)
    }

    pub fn noise_rate_overall(&self) -> f64 {
        Self::rate(self.noisy_easy + self.noisy_hard, self.n_easy + self.n_hard)
    }
}

/// Counts pseudo-label errors in each part of the split against the hidden
/// labels.
pub fn split_quality_report(
    split: &SplitResult,
    pseudo: &PseudoLabels,
    oracle: &OracleLabels,
    access: &OracleAccess,
    tau: f64,
) -> SplitQuality {
    let truth = oracle.reveal(access);
    let noisy = |idx: &[usize]| idx.iter().filter(|&&i| pseudo.hard(i) != truth[i]).count();
    SplitQuality {
        tau,
        stop_epoch: split.stop_epoch,
        n_easy: split.easy.len(),
        n_hard: split.hard.len(),
        noisy_easy: noisy(&split.easy),
        noisy_hard: noisy(&split.hard),
        stop_accuracy: split.stop_accuracy,
        reached_tau: split.reached_tau,
    }
}

/// Split-quality rows as CSV. Without oracle rows the noise columns are left
/// empty.
pub fn write_split_csv(rows: &[(SplitQuality, Option<f64>)], w: impl Write) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "tau",
        "stop_epoch",
        "n_easy",
        "n_hard",
        "noisy_easy",
        "noisy_hard",
        "noise_rate_easy",
        "noise_rate_hard",
        "noise_rate_overall",
        "stop_accuracy",
        "reached_tau",
        "test_accuracy",
    ])?;
    for (q, acc) in rows {
        wr.write_record([
            q.tau.to_string(),
            q.stop_epoch.to_string(),
            q.n_easy.to_string(),
            q.n_hard.to_string(),
            q.noisy_easy.to_string(),
            q.noisy_hard.to_string(),
            format!("{:.6}", q.noise_rate_easy()),
            format!("{:.6}", q.noise_rate_hard()),
            format!("{:.6}", q.noise_rate_overall()),
            format!("{:.6}", q.stop_accuracy),
            q.reached_tau.to_string(),
            acc.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
