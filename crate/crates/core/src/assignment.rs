//! Support selection between a batch of key representations and the queue.
//!
//! [`sinkhorn`] solves the entropy-regularized transport problem with row
//! marginals `1/N` and column marginals `1/M`, finishing with a projection
//! that makes both marginals exact; [`select_top_k`] hardens each
//! row to its `K` largest entries. [`brute_force_assignment`] enumerates the
//! exact combinatorial problem on tiny instances and exists to check the
//! other two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "sinkhorn epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn tolerance must be non-negative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub plan: Matrix,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// Marginal error of the scaled kernel when iteration stopped, before the
    /// final projection.
    pub scaling_violation: f64,
    /// Largest absolute deviation of any row sum from `1/N` or column sum
    /// from `1/M`, measured on the returned plan.
    pub marginal_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardAssignment {
    /// `N` rows of `K` queue positions.
    pub support_indices: Vec<Vec<usize>>,
    /// `N × N·K` block matrix: row `i` owns columns `i·K .. (i+1)·K`.
    pub a: Matrix,
}

impl HardAssignment {
    pub fn from_indices(support_indices: Vec<Vec<usize>>) -> Self {
        let n = support_indices.len();
        let k = support_indices.first().map_or(0, Vec::len);
        let mut a = Matrix::zeros(n, n * k);
        for i in 0..n {
            for s in 0..k {
                a[(i, i * k + s)] = 1.0;
            }
        }
        Self { support_indices, a }
    }

    pub fn k(&self) -> usize {
        self.support_indices.first().map_or(0, Vec::len)
    }

    /// Support indices flattened row-major, i.e. in `A`'s column order.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.support_indices.iter().flatten().copied().collect()
    }
}

/// Row/column log-potentials are kept in the log domain. Between absorptions
/// the iteration runs on a kernel that already has the potentials folded in,
/// so its entries stay within f64 range; scalings that drift past this bound
/// are absorbed back into the potentials and the kernel is rebuilt.
const ABSORB_THRESHOLD: f64 = 1e30;

pub fn sinkhorn(sim: &Matrix, cfg: &SinkhornConfig) -> Result<SoftAssignment> {
    cfg.validate()?;
    let (n, m) = sim.shape();
    if n == 0 || m == 0 {
        return Err(Error::Shape(format!("similarity matrix is {n}x{m}")));
    }
    if !sim.is_finite() {
        return Err(Error::Numeric("similarity matrix has non-finite entries".into()));
    }
    let eps = cfg.epsilon;
    let row_mass = 1.0 / n as f64;
    let col_mass = 1.0 / m as f64;

    let mut log_u: Vec<f64> = sim
        .iter_rows()
        .map(|r| -r.iter().copied().fold(f64::NEG_INFINITY, f64::max) / eps)
        .collect();
    let mut log_v = vec![0.0; m];
    let mut kernel = build_kernel(sim, eps, &log_u, &log_v);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];

    let mut iterations_used = 0;
    for iter in 0..cfg.max_iters {
        mat_vec(&kernel, &v, &mut kv);
        if iter > 0 {
            let row_violation = u
                .iter()
                .zip(&kv)
                .map(|(ui, kvi)| (ui * kvi - row_mass).abs())
                .fold(0.0, f64::max);
            if row_violation < cfg.tol {
                break;
            }
        }
        let mut degenerate = false;
        for (ui, kvi) in u.iter_mut().zip(&kv) {
            *ui = row_mass / kvi;
            degenerate |= !ui.is_finite() || *ui == 0.0;
        }
        if !degenerate {
            mat_t_vec(&kernel, &u, &mut ktu);
            for (vj, kj) in v.iter_mut().zip(&ktu) {
                *vj = col_mass / kj;
                degenerate |= !vj.is_finite() || *vj == 0.0;
            }
        }
        iterations_used = iter + 1;
        if degenerate {
            // Kernel entries underflowed: finish this sweep exactly in the log domain.
            absorb(&mut log_u, &mut u);
            absorb(&mut log_v, &mut v);
            log_domain_sweep(sim, eps, row_mass, col_mass, &mut log_u, &mut log_v);
            u.fill(1.0);
            v.fill(1.0);
            kernel = build_kernel(sim, eps, &log_u, &log_v);
        } else if u.iter().chain(&v).any(|s| s.abs() > ABSORB_THRESHOLD || s.abs() < 1.0 / ABSORB_THRESHOLD) {
            absorb(&mut log_u, &mut u);
            absorb(&mut log_v, &mut v);
            kernel = build_kernel(sim, eps, &log_u, &log_v);
        }
    }

    let mut plan = kernel;
    for (i, ui) in u.iter().enumerate() {
        for (p, vj) in plan.row_mut(i).iter_mut().zip(&v) {
            *p *= ui * vj;
        }
    }
    if !plan.is_finite() {
        return Err(Error::Numeric("transport plan became non-finite".into()));
    }
    let scaling_violation = marginal_violation(&plan);
    round_to_marginals(&mut plan, row_mass, col_mass);
    let marginal_violation = marginal_violation(&plan);
    Ok(SoftAssignment {
        plan,
        epsilon: eps,
        iterations_used,
        scaling_violation,
        marginal_violation,
    })
}

/// Projects a nonnegative plan onto the transport polytope: rows and then
/// columns are scaled down to at most their target mass, and the remaining
/// deficit is filled by the rank-one plan `err_r · err_cᵀ / ‖err_c‖₁`.
/// Entries move by at most the size of the original marginal error.
fn round_to_marginals(plan: &mut Matrix, row_mass: f64, col_mass: f64) {
    let (n, m) = plan.shape();
    for i in 0..n {
        let s: f64 = plan.row(i).iter().sum();
        if s > row_mass {
            let x = row_mass / s;
            plan.row_mut(i).iter_mut().for_each(|p| *p *= x);
        }
    }
    let mut cols = vec![0.0; m];
    for row in plan.iter_rows() {
        crate::matrix::axpy(1.0, row, &mut cols);
    }
    let y: Vec<f64> = cols.iter().map(|&c| if c > col_mass { col_mass / c } else { 1.0 }).collect();
    for i in 0..n {
        for (p, yj) in plan.row_mut(i).iter_mut().zip(&y) {
            *p *= yj;
        }
    }
    let err_r: Vec<f64> = plan.iter_rows().map(|r| (row_mass - r.iter().sum::<f64>()).max(0.0)).collect();
    let mut err_c = vec![col_mass; m];
    for row in plan.iter_rows() {
        crate::matrix::axpy(-1.0, row, &mut err_c);
    }
    err_c.iter_mut().for_each(|e| *e = e.max(0.0));
    let total: f64 = err_c.iter().sum();
    if total > 0.0 {
        for (i, ei) in err_r.iter().enumerate() {
            crate::matrix::axpy(ei / total, &err_c, plan.row_mut(i));
        }
    }
}

/// Max deviation of row sums from `1/N` and column sums from `1/M`.
pub fn marginal_violation(plan: &Matrix) -> f64 {
    let (n, m) = plan.shape();
    let mut cols = vec![0.0; m];
    let mut worst: f64 = 0.0;
    for row in plan.iter_rows() {
        worst = worst.max((row.iter().sum::<f64>() - 1.0 / n as f64).abs());
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    cols.iter()
        .map(|c| (c - 1.0 / m as f64).abs())
        .fold(worst, f64::max)
}

fn build_kernel(sim: &Matrix, eps: f64, log_u: &[f64], log_v: &[f64]) -> Matrix {
    let mut k = sim.clone();
    for (i, lu) in log_u.iter().enumerate() {
        for (e, lv) in k.row_mut(i).iter_mut().zip(log_v) {
            *e = (*e / eps + lu + lv).exp();
        }
    }
    k
}

fn absorb(log_s: &mut [f64], s: &mut [f64]) {
    for (l, x) in log_s.iter_mut().zip(s.iter_mut()) {
        *l += x.ln();
        *x = 1.0;
    }
}

fn log_domain_sweep(
    sim: &Matrix,
    eps: f64,
    row_mass: f64,
    col_mass: f64,
    log_u: &mut [f64],
    log_v: &mut [f64],
) {
    let (n, m) = sim.shape();
    let mut buf = vec![0.0; m.max(n)];
    for (i, lu) in log_u.iter_mut().enumerate() {
        for (b, (s, lv)) in buf.iter_mut().zip(sim.row(i).iter().zip(log_v.iter())) {
            *b = s / eps + lv;
        }
        *lu = row_mass.ln() - crate::matrix::log_sum_exp(&buf[..m]);
    }
    for j in 0..m {
        for (i, b) in buf.iter_mut().take(n).enumerate() {
            *b = sim[(i, j)] / eps + log_u[i];
        }
        log_v[j] = col_mass.ln() - crate::matrix::log_sum_exp(&buf[..n]);
    }
}

fn mat_vec(k: &Matrix, v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(k.iter_rows()) {
        *o = crate::matrix::dot(row, v);
    }
}

fn mat_t_vec(k: &Matrix, u: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (ui, row) in u.iter().zip(k.iter_rows()) {
        crate::matrix::axpy(*ui, row, out);
    }
}

/// Indices of the `k` largest entries of `row`, largest first, ties to the
/// lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    let better = |a: usize, b: usize| row[a] > row[b] || (row[a] == row[b] && a < b);
    for j in 0..row.len() {
        if best.len() == k && (k == 0 || !better(j, best[k - 1])) {
            continue;
        }
        let pos = best.partition_point(|&b| better(b, j));
        best.insert(pos, j);
        best.truncate(k);
    }
    best
}

/// Hardens each row of a score matrix to its top `k` columns. Rows are
/// selected independently; overlap across rows is allowed.
pub fn select_top_k_scores(scores: &Matrix, k: usize) -> Result<HardAssignment> {
    let m = scores.cols();
    if k == 0 || k > m {
        return Err(Error::Config(format!("K = {k} must lie in 1..={m}")));
    }
    let indices = scores.iter_rows().map(|r| top_k_indices(r, k)).collect();
    Ok(HardAssignment::from_indices(indices))
}

pub fn select_top_k(soft: &SoftAssignment, k: usize) -> Result<HardAssignment> {
    select_top_k_scores(&soft.plan, k)
}

/// Objective `Σᵢ Σ_{j ∈ selᵢ} S_ij` of a hard selection.
pub fn assignment_objective(sim: &Matrix, hard: &HardAssignment) -> f64 {
    hard.support_indices
        .iter()
        .enumerate()
        .map(|(i, js)| js.iter().map(|&j| sim[(i, j)]).sum::<f64>())
        .sum()
}

/// Largest `N·K` accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Exact optimum of `max Σ A_ij S_ij` with `K` ones per row and at most one
/// per column, by exhaustive enumeration of disjoint sorted `K`-subsets.
/// Among equal objectives the lexicographically smallest flattened index
/// tuple wins. Each row's indices are returned in ascending order.
pub fn brute_force_assignment(sim: &Matrix, k: usize) -> Result<HardAssignment> {
    let (n, m) = sim.shape();
    if n == 0 || k == 0 {
        return Err(Error::Config(format!("need N ≥ 1 and K ≥ 1, got N={n}, K={k}")));
    }
    if n * k > m {
        return Err(Error::Infeasible(format!(
            "{n} rows × {k} shots need {} distinct columns, only {m} available",
            n * k
        )));
    }
    if n * k > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "N·K = {} exceeds the exhaustive-search bound {BRUTE_FORCE_LIMIT}",
            n * k
        )));
    }
    struct Search<'a> {
        sim: &'a Matrix,
        k: usize,
        used: Vec<bool>,
        current: Vec<Vec<usize>>,
        best: Option<(f64, Vec<Vec<usize>>)>,
    }
    impl Search<'_> {
        fn row(&mut self, i: usize, value: f64) {
            if i == self.sim.rows() {
                if self.best.as_ref().is_none_or(|(b, _)| value > *b) {
                    self.best = Some((value, self.current.clone()));
                }
                return;
            }
            self.subset(i, 0, value);
        }

        fn subset(&mut self, i: usize, start: usize, value: f64) {
            if self.current[i].len() == self.k {
                self.row(i + 1, value);
                return;
            }
            for j in start..self.sim.cols() {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.current[i].push(j);
                self.subset(i, j + 1, value + self.sim[(i, j)]);
                self.current[i].pop();
                self.used[j] = false;
            }
        }
    }
    let mut search = Search {
        sim,
        k,
        used: vec![false; m],
        current: vec![Vec::with_capacity(k); n],
        best: None,
    };
    search.row(0, 0.0);
    let (_, indices) = search.best.expect("feasible instance has a solution");
    Ok(HardAssignment::from_indices(indices))
}
