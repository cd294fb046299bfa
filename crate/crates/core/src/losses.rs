//! Generalized multi-positive contrastive loss and its two instantiations.
//!
//! For queries `q_i`, keys `k_j` and a binary positive mask `A`:
//!
//! ```text
//! L = −(1/N) Σ_i (1/Σ_j A_ij) Σ_j A_ij · log softmax_j(q_iᵀk_j / τ)
//! ```
//!
//! Keys are constants: the returned gradient is with respect to the query
//! rows only.

use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, Matrix};
use crate::task_queue::PseudoTask;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub per_query: Vec<f64>,
    /// `∂value/∂Q`, one row per query.
    pub grad_queries: Matrix,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn contrast_loss(queries: &Matrix, keys: &Matrix, a: &Matrix, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    let (n, d) = queries.shape();
    if keys.cols() != d && keys.rows() > 0 {
        return Err(Error::Shape(format!(
            "queries have dimension {d}, keys {}",
            keys.cols()
        )));
    }
    if a.shape() != (n, keys.rows()) {
        return Err(Error::Shape(format!(
            "assignment is {:?}, expected ({n}, {})",
            a.shape(),
            keys.rows()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("no queries".into()));
    }
    let mut logits = queries.matmul_t(keys)?;
    logits.scale(1.0 / tau);

    let mut per_query = Vec::with_capacity(n);
    // ∂L/∂logit_ij = (softmax_ij − A_ij/ΣA_i) / N
    let mut dlogits = Matrix::zeros(n, keys.rows());
    for i in 0..n {
        let row = logits.row(i);
        let mask = a.row(i);
        let positives: f64 = mask.iter().sum();
        if positives <= 0.0 {
            return Err(Error::Assignment(format!("query {i} has no positive key")));
        }
        let lse = log_sum_exp(row);
        let weighted: f64 = mask.iter().zip(row).map(|(m, l)| m * l).sum();
        per_query.push(lse - weighted / positives);
        for ((g, l), m) in dlogits.row_mut(i).iter_mut().zip(row).zip(mask) {
            *g = ((l - lse).exp() - m / positives) / n as f64;
        }
    }
    let value = per_query.iter().sum::<f64>() / n as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {value}")));
    }
    let mut grad_queries = dlogits.matmul(keys)?;
    grad_queries.scale(1.0 / tau);
    Ok(LossValue {
        value,
        per_query,
        grad_queries,
    })
}

/// Loss over a pseudo-task: queries against the task's supports under `A`.
pub fn psco_loss(queries: &Matrix, task: &PseudoTask, tau: f64) -> Result<LossValue> {
    contrast_loss(queries, &task.supports, &task.assignment.a, tau)
}

/// The same objective written as `mean_i[ logsumexp_j(ℓ_ij) − (1/K) Σ_j A_ij ℓ_ij ]`.
/// Agrees with [`psco_loss`] whenever every row of `A` sums to `K`.
pub fn psco_loss_logits_form(queries: &Matrix, task: &PseudoTask, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let k = task.assignment.k() as f64;
    let mut logits = queries.matmul_t(&task.supports)?;
    logits.scale(1.0 / tau);
    let n = logits.rows();
    let total: f64 = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let pos: f64 = task.assignment.a.row(i).iter().zip(row).map(|(a, l)| a * l).sum();
            log_sum_exp(row) - pos / k
        })
        .sum();
    Ok(total / n as f64)
}

/// Instance discrimination: each query's positive is its own momentum key,
/// negatives are the other batch keys and the whole queue.
pub fn moco_loss(queries: &Matrix, keys: &Matrix, queue: &Matrix, tau: f64) -> Result<LossValue> {
    if queries.rows() != keys.rows() {
        return Err(Error::Shape(format!(
            "{} queries but {} keys",
            queries.rows(),
            keys.rows()
        )));
    }
    let all_keys = keys.vstack(queue)?;
    let n = queries.rows();
    let mut a = Matrix::zeros(n, all_keys.rows());
    for i in 0..n {
        a[(i, i)] = 1.0;
    }
    contrast_loss(queries, &all_keys, &a, tau)
}

pub fn total_loss(psco: &LossValue, moco: &LossValue) -> Result<LossValue> {
    if !psco.value.is_finite() || !moco.value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss component (psco {}, moco {})",
            psco.value, moco.value
        )));
    }
    if psco.per_query.len() != moco.per_query.len() {
        return Err(Error::Shape("loss components cover different batches".into()));
    }
    let mut grad_queries = psco.grad_queries.clone();
    grad_queries.add_scaled(1.0, &moco.grad_queries)?;
    Ok(LossValue {
        value: psco.value + moco.value,
        per_query: psco
            .per_query
            .iter()
            .zip(&moco.per_query)
            .map(|(a, b)| a + b)
            .collect(),
        grad_queries,
    })
}
