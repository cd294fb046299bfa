//! Few-shot meta-test: episode sampling, prototype classification, optional
//! per-episode adaptation of the projector and predictor, and mean accuracy
//! with a 95% confidence interval.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{EncoderState, GradientTape, Stage};
use crate::error::{Error, Result};
use crate::losses::contrast_loss;
use crate::matrix::{dot, Matrix};
use crate::rng::{self, Rng, Stream};
use crate::trainer::Sgd;

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support_x: Matrix,
    /// Episode-local labels in `0..n_way`, class-major.
    pub support_y: Vec<usize>,
    pub query_x: Matrix,
    pub query_y: Vec<usize>,
    /// Dataset rows backing the supports and queries.
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
    /// Original dataset label of each episode class.
    pub classes: Vec<i32>,
}

/// Draws `n_way` classes among those with at least `k_shot + n_query`
/// samples, then `k_shot + n_query` distinct samples per class.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Episode("n_way and k_shot must be positive".into()));
    }
    let index_by_class = dataset.class_index()?;
    let mut eligible: Vec<(i32, &Vec<usize>)> = index_by_class
        .iter()
        .filter(|(_, rows)| rows.len() >= k_shot + n_query)
        .map(|(c, rows)| (*c, rows))
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Episode(format!(
            "{n_way}-way {k_shot}-shot with {n_query} queries needs {n_way} classes of ≥ {} samples, found {}",
            k_shot + n_query,
            eligible.len()
        )));
    }
    eligible.shuffle(rng);
    eligible.truncate(n_way);

    let mut support_rows = Vec::with_capacity(n_way * k_shot);
    let mut query_rows = Vec::with_capacity(n_way * n_query);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    let mut query_y = Vec::with_capacity(n_way * n_query);
    for (label, (_, rows)) in eligible.iter().enumerate() {
        let picked = index::sample(rng, rows.len(), k_shot + n_query);
        for (t, p) in picked.iter().enumerate() {
            if t < k_shot {
                support_rows.push(rows[p]);
                support_y.push(label);
            } else {
                query_rows.push(rows[p]);
                query_y.push(label);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        support_x: dataset.samples.select_rows(&support_rows),
        support_y,
        query_x: dataset.samples.select_rows(&query_rows),
        query_y,
        support_rows,
        query_rows,
        classes: eligible.iter().map(|(c, _)| *c).collect(),
    })
}

/// Normalized per-class sums of support representations.
pub fn prototypes(support_reps: &Matrix, support_y: &[usize], n_way: usize) -> Result<Matrix> {
    let mut protos = Matrix::zeros(n_way, support_reps.cols());
    for (row, &y) in support_reps.iter_rows().zip(support_y) {
        if y >= n_way {
            return Err(Error::Episode(format!("support label {y} outside 0..{n_way}")));
        }
        crate::matrix::axpy(1.0, row, protos.row_mut(y));
    }
    crate::encoder::normalize_rows(&mut protos)?;
    Ok(protos)
}

/// `argmax_y qᵀc_y`, ties to the lowest class index.
pub fn nearest_prototype(query_reps: &Matrix, protos: &Matrix) -> Vec<usize> {
    query_reps
        .iter_rows()
        .map(|q| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (y, c) in protos.iter_rows().enumerate() {
                let s = dot(q, c);
                if s > best_score {
                    best = y;
                    best_score = s;
                }
            }
            best
        })
        .collect()
}

/// Queries through `h_θ ∘ g_θ ∘ f_θ`, supports through `g_θ ∘ f_θ`; the
/// momentum network is not used.
pub fn prototype_predict(episode: &Episode, state: &EncoderState) -> Result<Vec<usize>> {
    let q = state.query_online(&episode.query_x)?;
    let z = state.embed_online(&episode.support_x)?;
    let protos = prototypes(&z, &episode.support_y, episode.n_way)?;
    Ok(nearest_prototype(&q, &protos))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
}

impl AdaptConfig {
    /// SGD(lr 0.01, momentum 0.9, weight decay 1e-3) at temperature `tau`.
    pub fn new(iters: usize, tau: f64) -> Self {
        Self {
            iters,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub state: EncoderState,
    /// Contrastive loss evaluated before each update.
    pub loss_trace: Vec<f64>,
}

/// Fine-tunes `g_θ` and `h_θ` on the episode's supports, each support a
/// query whose positives are all supports of its class (itself included).
/// `f_θ` is left untouched; support keys are recomputed every iteration and
/// held constant within it.
pub fn adapt(episode: &Episode, state: &EncoderState, cfg: &AdaptConfig) -> Result<Adapted> {
    let mut state = state.clone();
    let feats = state.features(&episode.support_x)?;
    let n = episode.support_y.len();
    let mut positives = Matrix::zeros(n, n);
    for (i, yi) in episode.support_y.iter().enumerate() {
        for (j, yj) in episode.support_y.iter().enumerate() {
            if yi == yj {
                positives[(i, j)] = 1.0;
            }
        }
    }
    let mut opt = Sgd::new(&state.theta, cfg.momentum, cfg.weight_decay);
    let mut loss_trace = Vec::with_capacity(cfg.iters);
    let mut tape = GradientTape::new();
    for _ in 0..cfg.iters {
        let keys = state.project_features(&feats)?;
        let queries = state.encode_queries_from_features(&feats, &mut tape)?;
        let loss = contrast_loss(&queries, &keys, &positives, cfg.tau)?;
        let grads = state.backward(&tape, &loss.grad_queries)?;
        loss_trace.push(loss.value);
        opt.step_stages(&mut state.theta, &grads, cfg.lr, &[Stage::Projector, Stage::Predictor]);
    }
    Ok(Adapted { state, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_episodes: usize,
    pub adapt: Option<AdaptConfig>,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(n_way: usize, k_shot: usize, n_episodes: usize, seed: u64) -> Self {
        Self {
            n_way,
            k_shot,
            n_query: 15,
            n_episodes,
            adapt: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    /// Mean and `1.96 · s / √n` with `s` the sample standard deviation
    /// (taken as 0 for a single episode).
    pub fn from_accuracies(n_way: usize, k_shot: usize, per_episode: Vec<f64>) -> Self {
        let n = per_episode.len();
        let mean = if n == 0 {
            0.0
        } else {
            per_episode.iter().sum::<f64>() / n as f64
        };
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Self {
            n_way,
            k_shot,
            n_episodes: n,
            mean_accuracy: mean,
            ci95,
            per_episode,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n_way={} k_shot={} n_episodes={} mean_accuracy={} ci95={}",
            self.n_way, self.k_shot, self.n_episodes, self.mean_accuracy, self.ci95
        )
    }
}

impl FromStr for EvalReport {
    type Err = Error;

    /// Parses the summary line; `per_episode` is not part of the record.
    fn from_str(line: &str) -> Result<Self> {
        let mut report = EvalReport::from_accuracies(0, 0, Vec::new());
        let bad = |k: &str| Error::Data(format!("bad eval report field {k}"));
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            match k {
                "n_way" => report.n_way = v.parse().map_err(|_| bad(k))?,
                "k_shot" => report.k_shot = v.parse().map_err(|_| bad(k))?,
                "n_episodes" => report.n_episodes = v.parse().map_err(|_| bad(k))?,
                "mean_accuracy" => report.mean_accuracy = v.parse().map_err(|_| bad(k))?,
                "ci95" => report.ci95 = v.parse().map_err(|_| bad(k))?,
                _ => return Err(bad(k)),
            }
        }
        Ok(report)
    }
}

/// Accuracy of one episode, adapting a private copy of the state first if
/// requested.
pub fn run_episode(dataset: &Dataset, state: &EncoderState, cfg: &EvalConfig, index: u64) -> Result<f64> {
    let mut rng = rng::stream(cfg.seed, Stream::Episode, index);
    let episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.n_query, &mut rng)?;
    let predicted = match &cfg.adapt {
        Some(a) if a.iters > 0 => prototype_predict(&episode, &adapt(&episode, state, a)?.state)?,
        _ => prototype_predict(&episode, state)?,
    };
    Ok(accuracy(&predicted, &episode.query_y))
}

/// Episodes are independent and seeded by `(seed, episode index)`; they are
/// evaluated in parallel without affecting the result.
pub fn evaluate(dataset: &Dataset, state: &EncoderState, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.n_episodes == 0 {
        return Err(Error::Episode("n_episodes must be positive".into()));
    }
    let per_episode = (0..cfg.n_episodes as u64)
        .into_par_iter()
        .map(|i| run_episode(dataset, state, cfg, i))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(cfg.n_way, cfg.k_shot, per_episode))
}
