//! Reference implementations and the runtime self-check suite.
//!
//! The reference functions are deliberately naive (explicit loops, no shared
//! helpers with the production paths) so that agreement between the two is
//! evidence rather than tautology.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::assignment::{brute_force_assignment, marginal_violation, select_top_k, sinkhorn, SinkhornConfig};
use crate::augment::{AugmentationPolicy, InputKind};
use crate::config::TrainConfig;
use crate::encoder::{Activation, EncoderState};
use crate::error::Result;
use crate::evaluation::{prototype_predict, Episode, EvalReport};
use crate::losses::{contrast_loss, psco_loss, psco_loss_logits_form};
use crate::matrix::Matrix;
use crate::rng::{self, Rng, Stream};
use crate::snapshot;
use crate::task_queue::{build_pseudo_task, MomentumQueue, SupportSelection};
use crate::trainer::{compute_objective, Trainer};

/// Matrix of i.i.d. standard normal rows scaled to unit length.
pub fn random_unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let r = m.row_mut(i);
        r.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Direct evaluation of the multi-positive contrastive loss: softmax by
/// explicit exponentials (after a max shift), then the masked mean of
/// negative log-probabilities.
pub fn naive_contrast_loss(q: &Matrix, keys: &Matrix, a: &Matrix, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.rows() {
        let mut logits = Vec::with_capacity(keys.rows());
        for j in 0..keys.rows() {
            let mut s = 0.0;
            for t in 0..q.cols() {
                s += q[(i, t)] * keys[(j, t)];
            }
            logits.push(s / tau);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let mut pos = 0.0;
        let mut acc = 0.0;
        for j in 0..keys.rows() {
            if a[(i, j)] != 0.0 {
                pos += a[(i, j)];
                acc += a[(i, j)] * -((logits[j] - mx).exp() / z).ln();
            }
        }
        total += acc / pos;
    }
    total / q.rows() as f64
}

/// Prototype form of the pseudo-task loss: the alignment with the mean of
/// each query's shots plus a term that does not depend on `A`.
pub fn prototype_form(q: &Matrix, supports: &Matrix, a: &Matrix, k: usize, tau: f64) -> f64 {
    let n = q.rows();
    let mut align = 0.0;
    let mut norm_term = 0.0;
    for i in 0..n {
        let mut proto = vec![0.0; q.cols()];
        for j in 0..supports.rows() {
            for t in 0..q.cols() {
                proto[t] += a[(i, j)] * supports[(j, t)] / k as f64;
            }
        }
        align += (0..q.cols()).map(|t| q[(i, t)] * proto[t]).sum::<f64>();
        let logits: Vec<f64> = (0..supports.rows())
            .map(|j| (0..q.cols()).map(|t| q[(i, t)] * supports[(j, t)]).sum::<f64>() / tau)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        norm_term += mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    }
    -align / (n as f64 * tau) + norm_term / n as f64
}

/// Single-positive InfoNCE: `−log(e^{q·k⁺/τ} / Σ_j e^{q·k_j/τ})`.
pub fn infonce(q: &[f64], positive: usize, keys: &Matrix, tau: f64) -> f64 {
    let logits: Vec<f64> = keys
        .iter_rows()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    -(logits[positive] - mx) + z.ln()
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`, maximized over entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Tiny config for gradient checks: 4-dim inputs, tanh activations, ~140
/// parameters, batch of 2 against a 6-slot queue.
pub fn gradient_check_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    cfg.model.backbone_hidden = 5;
    cfg.model.head_hidden = 5;
    cfg.model.embed_dim = 3;
    cfg.model.activation = Activation::Tanh;
    cfg.task.batch_size = 2;
    cfg.task.shots = 2;
    cfg.task.queue_size = 6;
    cfg
}

/// Largest relative error between the analytic `∂L_total/∂θ` and central
/// differences for one seeded configuration.
pub fn gradient_check(seed: u64) -> Result<f64> {
    let cfg = gradient_check_config(seed);
    let kind = InputKind::Vector { dim: 4 };
    let trainer = Trainer::new(cfg.clone(), kind)?;
    let mut rng = rng::stream(seed, Stream::Samples, 0);
    let strong = Matrix::from_vec(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let keys = random_unit_rows(2, 3, &mut rng);
    let obj = compute_objective(&trainer.state, &strong, &keys, &trainer.queue, &cfg)?;
    let analytic = obj.grads.to_vec();
    let theta = trainer.state.theta.to_vec();
    let mut probe = trainer.state.clone();
    let fd = central_differences(&theta, 1e-5, |x| {
        probe.theta.copy_from_slice(x).expect("same length");
        compute_objective(&probe, &strong, &keys, &trainer.queue, &cfg)
            .expect("finite objective")
            .total
            .value
    });
    Ok(max_relative_error(&analytic, &fd, 1e-6))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({})", self.name, self.detail)
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn similarity(n: usize, m: usize, d: usize, rng: &mut Rng) -> Result<Matrix> {
    let a = random_unit_rows(n, d, rng);
    let b = random_unit_rows(m, d, rng);
    a.matmul_t(&b)
}

/// Runs a reduced, seeded version of every module's invariants.
pub fn selfcheck() -> Vec<CheckResult> {
    let tight = SinkhornConfig {
        epsilon: 0.05,
        max_iters: 10_000,
        tol: 1e-9,
    };
    vec![
        check("sinkhorn marginals", || {
            let mut rng = rng::stream(11, Stream::Init, 0);
            let mut worst: f64 = 0.0;
            for t in 0..30 {
                let eps = [0.01, 0.05, 0.25][t % 3];
                let (n, m) = (rng.random_range(1..=64), rng.random_range(1..=64));
                let sim = similarity(n, m, 8, &mut rng)?;
                let soft = sinkhorn(&sim, &SinkhornConfig { epsilon: eps, ..tight })?;
                worst = worst.max(marginal_violation(&soft.plan));
            }
            Ok((worst < 1e-6, format!("max violation {worst:.2e}")))
        }),
        check("sinkhorn shift invariance", || {
            let mut rng = rng::stream(12, Stream::Init, 0);
            let sim = similarity(7, 11, 5, &mut rng)?;
            let mut shifted = sim.clone();
            shifted.as_mut_slice().iter_mut().for_each(|v| *v += 3.5);
            let a = sinkhorn(&sim, &tight)?.plan;
            let b = sinkhorn(&shifted, &tight)?.plan;
            let diff = max_abs_diff(a.as_slice(), b.as_slice());
            Ok((diff < 1e-9, format!("max diff {diff:.2e}")))
        }),
        check("sinkhorn permutation equivariance", || {
            let mut rng = rng::stream(13, Stream::Init, 0);
            let sim = similarity(5, 9, 4, &mut rng)?;
            let rows: Vec<usize> = vec![3, 0, 4, 1, 2];
            let cols: Vec<usize> = vec![8, 2, 5, 0, 7, 1, 3, 6, 4];
            let permuted = sim.select_rows(&rows).transpose().select_rows(&cols).transpose();
            let a = sinkhorn(&sim, &tight)?.plan;
            let b = sinkhorn(&permuted, &tight)?.plan;
            let mut diff: f64 = 0.0;
            for (pi, &i) in rows.iter().enumerate() {
                for (pj, &j) in cols.iter().enumerate() {
                    diff = diff.max((a[(i, j)] - b[(pi, pj)]).abs());
                }
            }
            Ok((diff < 1e-9, format!("max diff {diff:.2e}")))
        }),
        check("top-k matches exhaustive assignment at M = N·K", || {
            let mut rng = rng::stream(14, Stream::Init, 0);
            let cfg = SinkhornConfig {
                epsilon: 0.01,
                ..SinkhornConfig::default()
            };
            let (mut exact, trials) = (0, 50);
            for _ in 0..trials {
                let n = rng.random_range(1..=3);
                let k = rng.random_range(1..=2);
                let sim = similarity(n, n * k, 6, &mut rng)?;
                let oracle = brute_force_assignment(&sim, k)?;
                let ours = select_top_k(&sinkhorn(&sim, &cfg)?, k)?;
                exact += usize::from(sorted(&ours.support_indices) == sorted(&oracle.support_indices));
            }
            Ok((exact == trials, format!("{exact}/{trials} exact")))
        }),
        check("loss matches reference", || {
            let mut rng = rng::stream(15, Stream::Init, 0);
            let q = random_unit_rows(4, 6, &mut rng);
            let keys = random_unit_rows(9, 6, &mut rng);
            let mut a = Matrix::zeros(4, 9);
            for i in 0..4 {
                a[(i, i)] = 1.0;
                a[(i, 8 - i)] = 1.0;
            }
            let ours = contrast_loss(&q, &keys, &a, 0.3)?.value;
            let reference = naive_contrast_loss(&q, &keys, &a, 0.3);
            let diff = (ours - reference).abs();
            Ok((diff < 1e-9, format!("diff {diff:.2e}")))
        }),
        check("pseudo-task loss forms agree", || {
            let mut rng = rng::stream(16, Stream::Init, 0);
            let queue = MomentumQueue::random(32, 6, 3)?;
            let keys = random_unit_rows(5, 6, &mut rng);
            let task = build_pseudo_task(&keys, &queue, 3, SupportSelection::Sinkhorn(SinkhornConfig::default()))?;
            let q = random_unit_rows(5, 6, &mut rng);
            let eq1 = psco_loss(&q, &task, 0.7)?.value;
            let logits = psco_loss_logits_form(&q, &task, 0.7)?;
            let proto = prototype_form(&q, &task.supports, &task.assignment.a, 3, 0.7);
            let diff = (eq1 - logits).abs().max((eq1 - proto).abs());
            Ok((diff < 1e-9, format!("max diff {diff:.2e}")))
        }),
        check("single positive reduces to InfoNCE", || {
            let mut rng = rng::stream(17, Stream::Init, 0);
            let q = random_unit_rows(3, 5, &mut rng);
            let keys = random_unit_rows(7, 5, &mut rng);
            let mut a = Matrix::zeros(3, 7);
            let pos = [2, 6, 0];
            let mut reference = 0.0;
            for i in 0..3 {
                a[(i, pos[i])] = 1.0;
                reference += infonce(q.row(i), pos[i], &keys, 0.2) / 3.0;
            }
            let diff = (contrast_loss(&q, &keys, &a, 0.2)?.value - reference).abs();
            Ok((diff < 1e-9, format!("diff {diff:.2e}")))
        }),
        check("gradients match finite differences", || {
            let worst = (0..3).map(gradient_check).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
            Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
        }),
        check("EMA stays between endpoints", || {
            let mut cfg = gradient_check_config(5);
            cfg.model.activation = Activation::Relu;
            let mut state = Trainer::new(cfg.clone(), InputKind::Vector { dim: 4 })?.state;
            let other = Trainer::new(gradient_check_config(6), InputKind::Vector { dim: 4 })?.state;
            let before = state.phi.to_vec();
            state.theta = other.theta.clone();
            state.ema_update(0.9)?;
            let theta = state.theta.to_vec();
            let ok = state
                .phi
                .to_vec()
                .iter()
                .zip(&before)
                .zip(&theta)
                .all(|((p, b), t)| *p >= b.min(*t) - 1e-15 && *p <= b.max(*t) + 1e-15);
            Ok((ok, "φ within [min, max] of old φ and θ".into()))
        }),
        check("queue is FIFO", || {
            let mut queue = MomentumQueue::random(4, 2, 1)?;
            let rows = |vals: &[[f64; 2]]| Matrix::from_rows(vals);
            queue.enqueue(&rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]])?, None)?;
            queue.enqueue(&rows(&[[-1.0, 0.0], [0.0, -1.0]])?, None)?;
            let got: Vec<Vec<f64>> = queue.ordered_rows().into_iter().map(<[f64]>::to_vec).collect();
            let want = vec![vec![0.6, 0.8], vec![0.8, 0.6], vec![-1.0, 0.0], vec![0.0, -1.0]];
            Ok((got == want, format!("{got:?}")))
        }),
        check("pseudo-task structure", || {
            let mut rng = rng::stream(18, Stream::Init, 0);
            let queue = MomentumQueue::random(64, 16, 2)?;
            let keys = random_unit_rows(8, 16, &mut rng);
            let task = build_pseudo_task(&keys, &queue, 4, SupportSelection::Sinkhorn(SinkhornConfig::default()))?;
            let a = &task.assignment.a;
            let rows_ok = a.iter_rows().all(|r| r.iter().sum::<f64>() == 4.0);
            let cols_ok = (0..a.cols()).all(|j| (0..a.rows()).map(|i| a[(i, j)]).sum::<f64>() == 1.0);
            let gathered = task
                .assignment
                .flat_indices()
                .iter()
                .enumerate()
                .all(|(s, &j)| task.supports.row(s) == queue.slots().row(j));
            Ok((
                rows_ok && cols_ok && gathered && task.supports.shape() == (32, 16),
                "row sums K, column sums 1, supports equal queue rows".into(),
            ))
        }),
        check("augmentation keeps shape", || {
            let mut rng = rng::stream(19, Stream::Init, 0);
            let vec_kind = InputKind::Vector { dim: 10 };
            let img_kind = InputKind::Image { height: 6, width: 5 };
            let x: Vec<f64> = (0..30).map(f64::from).collect();
            let a = AugmentationPolicy::strong(0.1, 0.2).apply(&x[..10], vec_kind, &mut rng)?;
            let b = AugmentationPolicy::strong(0.1, 0.2).apply(&x, img_kind, &mut rng)?;
            let c = AugmentationPolicy::weak(0.05).apply(&x, img_kind, &mut rng)?;
            Ok((
                a.len() == 10 && b.len() == 30 && c.len() == 30,
                "vector and image outputs match input length".into(),
            ))
        }),
        check("prototype classifier recovers support labels", || {
            let state = EncoderState::identity(3, Activation::Linear);
            let support_x = Matrix::from_rows(&[[2.0, 0.1, 0.0], [0.0, 3.0, 0.2], [0.1, 0.0, 1.0]])?;
            let episode = Episode {
                n_way: 3,
                k_shot: 1,
                query_x: support_x.clone(),
                support_x,
                support_y: vec![0, 1, 2],
                query_y: vec![0, 1, 2],
                support_rows: vec![0, 1, 2],
                query_rows: vec![0, 1, 2],
                classes: vec![0, 1, 2],
            };
            let predicted = prototype_predict(&episode, &state)?;
            Ok((predicted == vec![0, 1, 2], format!("{predicted:?}")))
        }),
        check("confidence interval arithmetic", || {
            let r = EvalReport::from_accuracies(5, 5, vec![0.6, 0.8, 1.0, 0.8]);
            // mean 0.8, squared deviations 0.04 + 0 + 0.04 + 0 over n − 1 = 3
            let want = 1.96 * (0.08f64 / 3.0).sqrt() / 2.0;
            let diff = (r.ci95 - want).abs();
            Ok((diff < 1e-12 && (r.mean_accuracy - 0.8).abs() < 1e-12, format!("diff {diff:.2e}")))
        }),
        check("snapshot round trip", || {
            let trainer = Trainer::new(gradient_check_config(7), InputKind::Vector { dim: 4 })?;
            let bytes = snapshot::to_bytes(&trainer);
            let back = snapshot::from_bytes(&bytes)?;
            Ok((snapshot::to_bytes(&back) == bytes, format!("{} bytes", bytes.len())))
        }),
        check("config round trip", || {
            let ok = crate::config::PRESETS.iter().all(|p| {
                TrainConfig::preset(p)
                    .and_then(|c| TrainConfig::from_toml(&c.to_toml()).map(|d| d == c))
                    .unwrap_or(false)
            });
            Ok((ok, "all presets survive TOML".into()))
        }),
    ]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sorted(rows: &[Vec<usize>]) -> Vec<Vec<usize>> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.sort_unstable();
            r
        })
        .collect()
}
