//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the production loss, assignment or gradient code.

#![allow(dead_code)]

use psco_core::data::SyntheticSpec;
use psco_core::rng::{self, Stream};
use psco_core::Matrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = psco_core::rng::Rng;

pub fn seeded(seed: u64) -> Rng {
    rng::stream(seed, Stream::Samples, 0xACCE)
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Largest deviation of row sums from `1/N` and column sums from `1/M`.
pub fn marginal_error(plan: &Matrix) -> f64 {
    let (n, m) = plan.shape();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let s: f64 = (0..m).map(|j| plan[(i, j)]).sum();
        worst = worst.max((s - 1.0 / n as f64).abs());
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| plan[(i, j)]).sum();
        worst = worst.max((s - 1.0 / m as f64).abs());
    }
    worst
}

/// Exhaustive optimum of `Σ_i Σ_{j∈sel_i} S_ij` over `K` distinct columns per
/// row with no column shared between rows. Returns the value and per-row
/// sorted index sets; ties keep the first optimum met in lexicographic order.
pub fn exhaustive_assignment(sim: &Matrix, k: usize) -> (f64, Vec<Vec<usize>>) {
    fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for first in 0..m {
            for rest in subsets(m, k - 1) {
                if rest.first().is_none_or(|&r| r > first) {
                    let mut s = vec![first];
                    s.extend(rest);
                    out.push(s);
                }
            }
        }
        out
    }
    let (n, m) = sim.shape();
    let all = subsets(m, k);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut stack: Vec<Vec<usize>> = Vec::new();
    fn go(
        i: usize,
        n: usize,
        sim: &Matrix,
        all: &[Vec<usize>],
        stack: &mut Vec<Vec<usize>>,
        best: &mut Option<(f64, Vec<Vec<usize>>)>,
    ) {
        if i == n {
            let v: f64 = stack.iter().enumerate().map(|(r, s)| s.iter().map(|&j| sim[(r, j)]).sum::<f64>()).sum();
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                *best = Some((v, stack.clone()));
            }
            return;
        }
        for s in all {
            if stack.iter().flatten().any(|j| s.contains(j)) {
                continue;
            }
            stack.push(s.clone());
            go(i + 1, n, sim, all, stack, best);
            stack.pop();
        }
    }
    go(0, n, sim, &all, &mut stack, &mut best);
    best.expect("N·K ≤ M")
}

/// Row-wise cross-entropy against the target distribution `A_i / ΣA_i`, by
/// explicit exponentials.
pub fn soft_target_cross_entropy(q: &Matrix, keys: &Matrix, a: &Matrix, tau: f64) -> f64 {
    let n = q.rows();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..keys.rows()).map(|j| dot(q.row(i), keys.row(j)) / tau).collect();
        let lse = logsumexp(&logits);
        let mass: f64 = a.row(i).iter().sum();
        for j in 0..keys.rows() {
            total -= a[(i, j)] / mass * (logits[j] - lse);
        }
    }
    total / n as f64
}

/// `−(1/Nτ) Σ_i q_iᵀ c̄_i + (1/N) Σ_i logsumexp_j(q_iᵀ z_j / τ)` with
/// `c̄_i = (1/K) Σ_j A_ij z_j`.
pub fn prototype_decomposition(q: &Matrix, supports: &Matrix, a: &Matrix, k: usize, tau: f64) -> f64 {
    let n = q.rows();
    let d = q.cols();
    let mut align = 0.0;
    let mut norm = 0.0;
    for i in 0..n {
        let mut proto = vec![0.0; d];
        for j in 0..supports.rows() {
            for t in 0..d {
                proto[t] += a[(i, j)] * supports[(j, t)] / k as f64;
            }
        }
        align += dot(q.row(i), &proto);
        let logits: Vec<f64> = (0..supports.rows()).map(|j| dot(q.row(i), supports.row(j)) / tau).collect();
        norm += logsumexp(&logits);
    }
    -align / (n as f64 * tau) + norm / n as f64
}

/// `−log softmax(q·k/τ)[positive]`.
pub fn infonce(q: &[f64], keys: &Matrix, positive: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = (0..keys.rows()).map(|j| dot(q, keys.row(j)) / tau).collect();
    logsumexp(&logits) - logits[positive]
}

pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Mean and `1.96 · s / √n` with the `n − 1` sample deviation.
pub fn mean_and_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt())
}

/// Clustered family used by the desk-scale runs: 8 classes in 32 dimensions,
/// unit-radius means and within-class sigma 1/6, 512 samples per class.
pub fn desk_spec() -> SyntheticSpec {
    SyntheticSpec {
        name: "desk".into(),
        n_classes: 8,
        dim: 32,
        samples_per_class: 512,
        class_mean_scale: 1.0,
        within_class_sigma: 1.0 / 6.0,
        seed: 7,
        sample_seed: None,
        domain_shift: None,
    }
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        name: "small".into(),
        n_classes: 4,
        dim: 8,
        samples_per_class: 64,
        class_mean_scale: 1.0,
        within_class_sigma: 0.2,
        seed,
        sample_seed: None,
        domain_shift: None,
    }
}

pub fn small_config(seed: u64, epochs: usize) -> psco_core::TrainConfig {
    let mut cfg = psco_core::TrainConfig::desk();
    cfg.seed = seed;
    cfg.epochs = epochs;
    cfg.model.backbone_hidden = 16;
    cfg.model.head_hidden = 16;
    cfg.model.embed_dim = 8;
    cfg.task.batch_size = 16;
    cfg.task.queue_size = 128;
    cfg
}
