//! Meta-training loop.
//!
//! One step: strong view → online queries, weak view → momentum keys,
//! pseudo-task from keys and queue, `L_PsCo + L_MoCo`, backward, SGD,
//! EMA update of the momentum network, and finally enqueue of the keys.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::augment::InputKind;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::encoder::{EncoderState, Gradients, GradientTape, Params, Stage};
use crate::error::{Error, Result};
use crate::losses::{moco_loss, psco_loss, total_loss, LossValue};
use crate::matrix::Matrix;
use crate::rng::{self, Rng, Stream};
use crate::task_queue::{
    build_pseudo_task, pseudo_label_quality, shot_overlap_ratio, MomentumQueue, PseudoTask,
    SupportSelection,
};

/// `0.5 · lr0 · (1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Config(format!("epoch {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Params,
}

impl Sgd {
    pub fn new(like: &Params, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = like.clone();
        velocity.tensors_mut().for_each(|t| t.fill(0.0));
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn step(&mut self, theta: &mut Params, grads: &Gradients, lr: f64) {
        self.step_stages(theta, grads, lr, &[Stage::Backbone, Stage::Projector, Stage::Predictor]);
    }

    /// Updates only the listed stages; the rest of θ is untouched bit-for-bit.
    pub fn step_stages(&mut self, theta: &mut Params, grads: &Gradients, lr: f64, stages: &[Stage]) {
        for &stage in stages {
            let params = theta.stage_mut(stage).layers.iter_mut();
            let vel = self.velocity.stage_mut(stage).layers.iter_mut();
            let grad = grads.stage(stage).layers.iter();
            for ((p, v), g) in params.zip(vel).zip(grad) {
                let pairs = [
                    (p.weight.as_mut_slice(), v.weight.as_mut_slice(), g.weight.as_slice()),
                    (p.bias.as_mut_slice(), v.bias.as_mut_slice(), g.bias.as_slice()),
                ];
                for (pt, vt, gt) in pairs {
                    for ((pi, vi), gi) in pt.iter_mut().zip(vt.iter_mut()).zip(gt) {
                        *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                        *pi -= lr * *vi;
                    }
                }
            }
        }
    }
}

/// Loss terms, task and θ-gradient for fixed views and keys.
#[derive(Debug, Clone)]
pub struct Objective {
    pub psco: LossValue,
    pub moco: LossValue,
    pub total: LossValue,
    pub task: PseudoTask,
    pub grads: Gradients,
}

fn selection(cfg: &TrainConfig) -> SupportSelection {
    if cfg.task.use_sinkhorn {
        SupportSelection::Sinkhorn(cfg.sinkhorn)
    } else {
        SupportSelection::RawSimilarity
    }
}

/// Keys for a weak view: momentum `g_φ ∘ f_φ`, or online `g_θ ∘ f_θ` when the
/// momentum network is disabled. Never differentiated.
pub fn compute_keys(state: &EncoderState, weak_view: &Matrix, cfg: &TrainConfig) -> Result<Matrix> {
    if cfg.task.momentum_network {
        state.encode_keys(weak_view)
    } else {
        state.embed_online(weak_view)
    }
}

/// `L_total` and its gradient w.r.t. θ given the strong view, the keys of
/// the weak view and the queue as it stood before this batch.
pub fn compute_objective(
    state: &EncoderState,
    strong_view: &Matrix,
    keys: &Matrix,
    queue: &MomentumQueue,
    cfg: &TrainConfig,
) -> Result<Objective> {
    let mut tape = GradientTape::new();
    let queries = state.encode_queries(strong_view, &mut tape)?;
    let task = build_pseudo_task(keys, queue, cfg.task.shots, selection(cfg))?;
    let psco = psco_loss(&queries, &task, cfg.task.tau_psco)?;
    let moco = moco_loss(&queries, keys, queue.slots(), cfg.task.tau_moco)?;
    let total = total_loss(&psco, &moco)?;
    let grads = state.backward(&tape, &total.grad_queries)?;
    Ok(Objective {
        psco,
        moco,
        total,
        task,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss_total: f64,
    pub loss_psco: f64,
    pub loss_moco: f64,
    /// `None` when a query or a selected support has no ground-truth label.
    pub pseudo_label_quality: Option<f64>,
    pub shot_overlap_ratio: f64,
    /// Queue slots used as supports, per query.
    pub support_queue_indices: Vec<Vec<usize>>,
}

/// One optimization step on `batch`. `labels` are carried into the queue for
/// diagnostics and never read by the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &Matrix,
    labels: Option<&[i32]>,
    kind: InputKind,
    state: &mut EncoderState,
    optimizer: &mut Sgd,
    queue: &mut MomentumQueue,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<StepReport> {
    let strong = cfg.augment.strong.apply_batch(batch, kind, rng)?;
    let weak = cfg.augment.weak.apply_batch(batch, kind, rng)?;
    let keys = compute_keys(state, &weak, cfg)?;
    let obj = compute_objective(state, &strong, &keys, queue, cfg)?;
    for (name, v) in [
        ("total", obj.total.value),
        ("psco", obj.psco.value),
        ("moco", obj.moco.value),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }

    optimizer.step(&mut state.theta, &obj.grads, lr);
    state.ema_update(cfg.task.ema_momentum)?;

    let quality = labels.and_then(|l| {
        let ql: Vec<Option<i32>> = l.iter().copied().map(Some).collect();
        pseudo_label_quality(&obj.task, queue.labels(), &ql).ok()
    });
    let overlap = shot_overlap_ratio(&obj.task);
    queue.enqueue(&keys, labels)?;

    Ok(StepReport {
        loss_total: obj.total.value,
        loss_psco: obj.psco.value,
        loss_moco: obj.moco.value,
        pseudo_label_quality: quality,
        shot_overlap_ratio: overlap,
        support_queue_indices: obj.task.assignment.support_indices,
    })
}

/// Per-epoch metrics, serialized as one `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_psco: f64,
    pub loss_moco: f64,
    pub pseudo_label_quality: Option<f64>,
    pub shot_overlap_ratio: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} loss_total={} loss_psco={} loss_moco={} pseudo_label_quality=",
            self.epoch, self.lr, self.loss_total, self.loss_psco, self.loss_moco
        )?;
        match self.pseudo_label_quality {
            Some(q) => write!(f, "{q}")?,
            None => f.write_str("na")?,
        }
        write!(f, " shot_overlap_ratio={}", self.shot_overlap_ratio)
    }
}

impl FromStr for EpochRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed metrics field {tok:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("metrics record lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("metrics field {k} is not a number")))
        };
        let quality = match get("pseudo_label_quality")? {
            "na" => None,
            _ => Some(num("pseudo_label_quality")?),
        };
        Ok(Self {
            epoch: get("epoch")?
                .parse()
                .map_err(|_| Error::Data("epoch is not an integer".into()))?,
            lr: num("lr")?,
            loss_total: num("loss_total")?,
            loss_psco: num("loss_psco")?,
            loss_moco: num("loss_moco")?,
            pseudo_label_quality: quality,
            shot_overlap_ratio: num("shot_overlap_ratio")?,
        })
    }
}

pub fn format_metrics_log(records: &[EpochRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

/// Owns all mutable training state. Every random draw is derived from the
/// config seed plus the epoch or global step index, so a trainer rebuilt from
/// a snapshot continues exactly where the original left off.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub kind: InputKind,
    pub state: EncoderState,
    pub optimizer: Sgd,
    pub queue: MomentumQueue,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps across all epochs.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, kind: InputKind) -> Result<Self> {
        cfg.validate()?;
        let state = EncoderState::new(cfg.architecture(kind), cfg.seed)?;
        let queue = MomentumQueue::random(cfg.task.queue_size, cfg.model.embed_dim, cfg.seed)?;
        let optimizer = Sgd::new(&state.theta, cfg.optim.momentum, cfg.optim.weight_decay);
        Ok(Self {
            cfg,
            kind,
            state,
            optimizer,
            queue,
            epoch: 0,
            step: 0,
        })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.kind != self.kind {
            return Err(Error::Data(format!(
                "dataset is {:?}, trainer expects {:?}",
                dataset.kind, self.kind
            )));
        }
        if dataset.len() < self.cfg.task.batch_size {
            return Err(Error::Data(format!(
                "dataset has {} samples, batch size is {}",
                dataset.len(),
                self.cfg.task.batch_size
            )));
        }
        Ok(())
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.epoch, self.cfg.epochs.max(self.epoch), self.cfg.optim.lr)
    }

    /// Shuffled, drop-last pass over the dataset.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        self.check_dataset(dataset)?;
        let n = self.cfg.task.batch_size;
        let lr = self.current_lr()?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, Stream::Shuffle, self.epoch as u64));

        let steps = dataset.len() / n;
        let (mut total, mut psco, mut moco, mut overlap) = (0.0, 0.0, 0.0, 0.0);
        let (mut quality_sum, mut quality_n) = (0.0, 0usize);
        for b in 0..steps {
            let (x, y) = dataset.batch(&order[b * n..(b + 1) * n]);
            let mut rng = rng::stream(self.cfg.seed, Stream::Step, self.step);
            let report = train_step(
                &x,
                y.as_deref(),
                self.kind,
                &mut self.state,
                &mut self.optimizer,
                &mut self.queue,
                &self.cfg,
                lr,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", self.step)),
                other => other,
            })?;
            self.step += 1;
            total += report.loss_total;
            psco += report.loss_psco;
            moco += report.loss_moco;
            overlap += report.shot_overlap_ratio;
            if let Some(q) = report.pseudo_label_quality {
                quality_sum += q;
                quality_n += 1;
            }
        }
        self.epoch += 1;
        let s = steps as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            lr,
            loss_total: total / s,
            loss_psco: psco / s,
            loss_moco: moco / s,
            pseudo_label_quality: (quality_n > 0).then(|| quality_sum / quality_n as f64),
            shot_overlap_ratio: overlap / s,
        })
    }

    /// Runs epochs until `until` epochs have been completed in total.
    pub fn run_until(&mut self, dataset: &Dataset, until: usize) -> Result<Vec<EpochRecord>> {
        self.check_dataset(dataset)?;
        let mut log = Vec::new();
        while self.epoch < until {
            log.push(self.run_epoch(dataset)?);
        }
        Ok(log)
    }

    pub fn run(&mut self, dataset: &Dataset) -> Result<Vec<EpochRecord>> {
        self.run_until(dataset, self.cfg.epochs)
    }
}

/// Trains from scratch for `cfg.epochs` and returns the last-epoch model.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(EncoderState, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(cfg.clone(), dataset.kind)?;
    let log = trainer.run(dataset)?;
    Ok((trainer.state, log))
}
