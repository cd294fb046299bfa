//! Momentum queue and N-way K-shot pseudo-task assembly.

use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};

use crate::assignment::{select_top_k, select_top_k_scores, sinkhorn, HardAssignment, SinkhornConfig};
use crate::augment::{AugmentationPolicy, InputKind};
use crate::encoder::{normalize_rows, EncoderState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng, Stream};

/// Fixed-capacity ring of unit-norm key representations. Ground-truth labels
/// ride along for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumQueue {
    slots: Matrix,
    labels: Vec<Option<i32>>,
    head: usize,
    initialized_count: usize,
}

impl MomentumQueue {
    /// `capacity` isotropic Gaussian rows, normalized. No labels.
    pub fn random(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("queue dimension must be ≥ 2, got {dim}")));
        }
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        let mut rng = rng::stream(seed, Stream::Queue, 0);
        let data = (0..capacity * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut slots = Matrix::from_vec(capacity, dim, data)?;
        normalize_rows(&mut slots)?;
        Ok(Self {
            slots,
            labels: vec![None; capacity],
            head: 0,
            initialized_count: 0,
        })
    }

    pub fn from_parts(
        slots: Matrix,
        labels: Vec<Option<i32>>,
        head: usize,
        initialized_count: usize,
    ) -> Result<Self> {
        if slots.rows() == 0
            || labels.len() != slots.rows()
            || head >= slots.rows()
            || initialized_count > slots.rows()
        {
            return Err(Error::Shape(format!(
                "queue of {} rows with {} labels, head {head}, {initialized_count} initialized",
                slots.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            slots,
            labels,
            head,
            initialized_count,
        })
    }

    pub fn capacity(&self) -> usize {
        self.slots.rows()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Number of slots overwritten with real keys so far (saturates at capacity).
    pub fn initialized_count(&self) -> usize {
        self.initialized_count
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn labels(&self) -> &[Option<i32>] {
        &self.labels
    }

    /// Rows oldest first.
    pub fn ordered_rows(&self) -> Vec<&[f64]> {
        let m = self.capacity();
        (0..m).map(|k| self.slots.row((self.head + k) % m)).collect()
    }

    /// Overwrites the `keys.rows()` oldest slots, in order.
    pub fn enqueue(&mut self, keys: &Matrix, labels: Option<&[i32]>) -> Result<()> {
        let (n, m) = (keys.rows(), self.capacity());
        if n > m {
            return Err(Error::Capacity(format!("cannot enqueue {n} keys into a queue of {m}")));
        }
        if keys.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "keys have dimension {}, queue {}",
                keys.cols(),
                self.dim()
            )));
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} keys", l.len())));
            }
        }
        for r in 0..n {
            let slot = (self.head + r) % m;
            self.slots.row_mut(slot).copy_from_slice(keys.row(r));
            self.labels[slot] = labels.map(|l| l[r]);
        }
        self.head = (self.head + n) % m;
        self.initialized_count = (self.initialized_count + n).min(m);
        Ok(())
    }
}

/// How supports are chosen from the queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupportSelection {
    /// Entropic transport plan, then per-row top-K.
    Sinkhorn(SinkhornConfig),
    /// Per-row top-K of the raw similarities (ablation).
    RawSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTask {
    /// Batch positions of the queries.
    pub queries: Vec<usize>,
    /// Momentum representations `z_i` of the queries (N×d).
    pub query_keys: Matrix,
    /// Supports gathered from the queue, query-major ((N·K)×d).
    pub supports: Matrix,
    pub assignment: HardAssignment,
    /// Diagnostic: marginal violation of the transport plan, if one was solved.
    pub marginal_violation: Option<f64>,
}

impl PseudoTask {
    pub fn n_way(&self) -> usize {
        self.queries.len()
    }

    pub fn k_shot(&self) -> usize {
        self.assignment.k()
    }

    pub fn support_queue_indices(&self) -> &[Vec<usize>] {
        &self.assignment.support_indices
    }
}

/// Builds the pseudo-task from already-computed query keys. The queue must
/// not yet contain these keys.
pub fn build_pseudo_task(
    query_keys: &Matrix,
    queue: &MomentumQueue,
    k: usize,
    selection: SupportSelection,
) -> Result<PseudoTask> {
    if query_keys.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if k > queue.capacity() {
        return Err(Error::Config(format!(
            "K = {k} exceeds queue capacity {}",
            queue.capacity()
        )));
    }
    let sim = query_keys.matmul_t(queue.slots())?;
    let (assignment, marginal_violation) = match selection {
        SupportSelection::Sinkhorn(cfg) => {
            let soft = sinkhorn(&sim, &cfg)?;
            (select_top_k(&soft, k)?, Some(soft.marginal_violation))
        }
        SupportSelection::RawSimilarity => (select_top_k_scores(&sim, k)?, None),
    };
    let supports = queue.slots().select_rows(&assignment.flat_indices());
    Ok(PseudoTask {
        queries: (0..query_keys.rows()).collect(),
        query_keys: query_keys.clone(),
        supports,
        assignment,
        marginal_violation,
    })
}

/// Weak-augments the batch, encodes it with the momentum network and builds
/// the pseudo-task against the current queue.
#[allow(clippy::too_many_arguments)]
pub fn construct_pseudo_task(
    batch: &Matrix,
    state: &EncoderState,
    queue: &MomentumQueue,
    k: usize,
    selection: SupportSelection,
    weak: &AugmentationPolicy,
    kind: InputKind,
    rng: &mut Rng,
) -> Result<PseudoTask> {
    let view = weak.apply_batch(batch, kind, rng)?;
    let z = state.encode_keys(&view)?;
    build_pseudo_task(&z, queue, k, selection)
}

/// Fraction of selected supports whose true label equals their query's.
pub fn pseudo_label_quality(
    task: &PseudoTask,
    queue_labels: &[Option<i32>],
    query_labels: &[Option<i32>],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, row) in task.support_queue_indices().iter().enumerate() {
        let q = query_labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Diagnostics(format!("query {i} has no label")))?;
        for &j in row {
            let s = queue_labels
                .get(j)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Diagnostics(format!("queue slot {j} has no label")))?;
            hits += usize::from(s == q);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Diagnostics("task has no supports".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// `1 − |unique support slots| / (N·K)`.
pub fn shot_overlap_ratio(task: &PseudoTask) -> f64 {
    let all = task.assignment.flat_indices();
    if all.is_empty() {
        return 0.0;
    }
    let unique: HashSet<usize> = all.iter().copied().collect();
    1.0 - unique.len() as f64 / all.len() as f64
}
