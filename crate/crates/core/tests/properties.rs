mod common;

use common::*;
use proptest::prelude::*;
use psco_core::assignment::{select_top_k, sinkhorn, top_k_indices};
use psco_core::encoder::{Activation, Architecture};
use psco_core::evaluation::{nearest_prototype, prototypes};
use psco_core::losses::{contrast_loss, moco_loss, psco_loss, psco_loss_logits_form};
use psco_core::task_queue::{build_pseudo_task, shot_overlap_ratio};
use psco_core::{EncoderState, Matrix, MomentumQueue, SinkhornConfig, SupportSelection};

fn tight(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        max_iters: 10_000,
        tol: 1e-10,
    }
}

fn eps_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.01), Just(0.05), Just(0.25)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinkhorn_plan_has_balanced_marginals(n in 1usize..24, m in 1usize..24, eps in eps_strategy(), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let sim = unit_rows(n, 6, &mut rng).matmul_t(&unit_rows(m, 6, &mut rng)).unwrap();
        let soft = sinkhorn(&sim, &tight(eps)).unwrap();
        prop_assert!(marginal_error(&soft.plan) < 1e-6);
        prop_assert!(soft.plan.as_slice().iter().all(|p| *p >= 0.0 && p.is_finite()));
    }

    #[test]
    fn sinkhorn_ignores_constant_shifts(n in 1usize..10, m in 1usize..12, shift in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let sim = unit_rows(n, 4, &mut rng).matmul_t(&unit_rows(m, 4, &mut rng)).unwrap();
        let mut shifted = sim.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += shift);
        let a = sinkhorn(&sim, &tight(0.05)).unwrap().plan;
        let b = sinkhorn(&shifted, &tight(0.05)).unwrap().plan;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sinkhorn_commutes_with_permutations(
        rows in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        cols in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let sim = unit_rows(6, 5, &mut rng).matmul_t(&unit_rows(9, 5, &mut rng)).unwrap();
        let mut permuted = Matrix::zeros(6, 9);
        for (pi, &i) in rows.iter().enumerate() {
            for (pj, &j) in cols.iter().enumerate() {
                permuted[(pi, pj)] = sim[(i, j)];
            }
        }
        let a = sinkhorn(&sim, &tight(0.05)).unwrap().plan;
        let b = sinkhorn(&permuted, &tight(0.05)).unwrap().plan;
        for (pi, &i) in rows.iter().enumerate() {
            for (pj, &j) in cols.iter().enumerate() {
                prop_assert!((a[(i, j)] - b[(pi, pj)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn top_k_returns_largest_entries(row in prop::collection::vec(-3.0f64..3.0, 1..30), k in 1usize..8) {
        let k = k.min(row.len());
        let picked = top_k_indices(&row, k);
        prop_assert_eq!(picked.len(), k);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(picked, order[..k].to_vec());
    }

    #[test]
    fn pseudo_task_structure_holds(n in 1usize..12, k in 1usize..5, extra in 0usize..40, seed in any::<u64>()) {
        let m = n * k + extra;
        let mut rng = seeded(seed);
        let queue = MomentumQueue::random(m, 6, seed).unwrap();
        let keys = unit_rows(n, 6, &mut rng);
        let task = build_pseudo_task(&keys, &queue, k, SupportSelection::Sinkhorn(SinkhornConfig::default())).unwrap();
        let a = &task.assignment.a;
        prop_assert_eq!(a.shape(), (n, n * k));
        for i in 0..n {
            prop_assert_eq!(a.row(i).iter().sum::<f64>(), k as f64);
        }
        for j in 0..n * k {
            prop_assert_eq!((0..n).map(|i| a[(i, j)]).sum::<f64>(), 1.0);
        }
        for (slot, &q) in task.assignment.flat_indices().iter().enumerate() {
            prop_assert_eq!(task.supports.row(slot), queue.slots().row(q));
        }
        let overlap = shot_overlap_ratio(&task);
        prop_assert!((0.0..=1.0 - 1.0 / (n * k) as f64 + 1e-12).contains(&overlap));
    }

    #[test]
    fn contrast_loss_matches_soft_target_cross_entropy(
        n in 1usize..8, k in 1usize..5, d in 2usize..12, tau in 0.05f64..2.0, seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let q = unit_rows(n, d, &mut rng);
        let queue = MomentumQueue::random(n * k + 5, d, seed).unwrap();
        let keys = unit_rows(n, d, &mut rng);
        let task = build_pseudo_task(&keys, &queue, k, SupportSelection::RawSimilarity).unwrap();
        let loss = psco_loss(&q, &task, tau).unwrap().value;
        let oracle = soft_target_cross_entropy(&q, &task.supports, &task.assignment.a, tau);
        prop_assert!((loss - oracle).abs() < 1e-9);
        prop_assert!((psco_loss_logits_form(&q, &task, tau).unwrap() - oracle).abs() < 1e-9);
        let proto = prototype_decomposition(&q, &task.supports, &task.assignment.a, k, tau);
        prop_assert!((loss - proto).abs() < 1e-9);
    }

    #[test]
    fn moco_loss_is_mean_infonce(n in 1usize..6, m in 1usize..20, d in 2usize..8, tau in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let q = unit_rows(n, d, &mut rng);
        let keys = unit_rows(n, d, &mut rng);
        let queue = unit_rows(m, d, &mut rng);
        let all = keys.vstack(&queue).unwrap();
        let oracle = (0..n).map(|i| infonce(q.row(i), &all, i, tau)).sum::<f64>() / n as f64;
        prop_assert!((moco_loss(&q, &keys, &queue, tau).unwrap().value - oracle).abs() < 1e-9);
    }

    #[test]
    fn contrast_loss_gradient_matches_differences(n in 1usize..4, m in 2usize..6, d in 2usize..5, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let q = uniform_matrix(n, d, -1.0, 1.0, &mut rng);
        let keys = unit_rows(m, d, &mut rng);
        let mut a = Matrix::zeros(n, m);
        for i in 0..n {
            a[(i, i % m)] = 1.0;
            a[(i, (i + 1) % m)] = 1.0;
        }
        let analytic = contrast_loss(&q, &keys, &a, 0.5).unwrap().grad_queries;
        let fd = central_differences(q.as_slice(), 1e-5, |x| {
            soft_target_cross_entropy(&Matrix::from_vec(n, d, x.to_vec()).unwrap(), &keys, &a, 0.5)
        });
        prop_assert!(max_relative_error(analytic.as_slice(), &fd, 1e-4) < 1e-5);
    }

    #[test]
    fn ema_update_is_convex_combination(m in 0.0f64..=1.0, seed in 0u64..1000) {
        let arch = Architecture::desk(5, 6, 6, 3);
        let mut state = EncoderState::new(arch.clone(), seed).unwrap();
        let other = EncoderState::new(arch, seed + 1).unwrap();
        state.theta = other.theta.clone();
        let phi0 = state.phi.to_vec();
        state.ema_update(m).unwrap();
        let theta: Vec<f64> = other.theta.backbone.layers.iter().chain(&other.theta.projector.layers)
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
            .collect();
        for ((p1, p0), t) in state.phi.to_vec().iter().zip(&phi0).zip(&theta) {
            prop_assert!((p1 - (m * p0 + (1.0 - m) * t)).abs() < 1e-15);
            prop_assert!(*p1 >= p0.min(*t) - 1e-15 && *p1 <= p0.max(*t) + 1e-15);
        }
    }

    #[test]
    fn queue_keeps_the_newest_keys_in_order(cap in 1usize..20, batches in prop::collection::vec(1usize..8, 1..10), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut queue = MomentumQueue::random(cap, 3, seed).unwrap();
        let mut history: Vec<Vec<f64>> = queue.ordered_rows().iter().map(|r| r.to_vec()).collect();
        for b in batches {
            let b = b.min(cap);
            let keys = unit_rows(b, 3, &mut rng);
            queue.enqueue(&keys, None).unwrap();
            history.extend(keys.iter_rows().map(|r| r.to_vec()));
        }
        let expected = &history[history.len() - cap..];
        let actual: Vec<Vec<f64>> = queue.ordered_rows().iter().map(|r| r.to_vec()).collect();
        prop_assert_eq!(actual, expected.to_vec());
    }

    #[test]
    fn prototype_predictions_ignore_per_class_scale(
        scales in prop::collection::vec(0.1f64..10.0, 3),
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let reps = unit_rows(9, 4, &mut rng);
        let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
        let queries = unit_rows(7, 4, &mut rng);
        let mut scaled = reps.clone();
        for (i, &y) in labels.iter().enumerate() {
            scaled.row_mut(i).iter_mut().for_each(|v| *v *= scales[y]);
        }
        let a = nearest_prototype(&queries, &prototypes(&reps, &labels, 3).unwrap());
        let b = nearest_prototype(&queries, &prototypes(&scaled, &labels, 3).unwrap());
        prop_assert_eq!(a, b);
    }
}

#[test]
fn sinkhorn_selection_beats_random_supports() {
    let (n, k, m, d) = (8, 4, 256, 8);
    let mut margin_sum = 0.0;
    for seed in 0..100u64 {
        let mut rng = seeded(seed);
        let queue = MomentumQueue::random(m, d, seed).unwrap();
        let keys = unit_rows(n, d, &mut rng);
        let task = build_pseudo_task(&keys, &queue, k, SupportSelection::Sinkhorn(SinkhornConfig::default())).unwrap();
        let mut chosen = 0.0;
        let mut random = 0.0;
        for i in 0..n {
            for &j in &task.assignment.support_indices[i] {
                chosen += dot(keys.row(i), queue.slots().row(j));
            }
            for _ in 0..k {
                let j = rand::Rng::random_range(&mut rng, 0..m);
                random += dot(keys.row(i), queue.slots().row(j));
            }
        }
        margin_sum += (chosen - random) / (n * k) as f64;
    }
    assert!(margin_sum / 100.0 >= 0.0, "mean margin {}", margin_sum / 100.0);
}

#[test]
fn sinkhorn_reduces_overlap_on_clustered_queues() {
    let (n, k, m, d) = (16, 4, 1024, 8);
    let (mut with, mut without) = (0.0, 0.0);
    for seed in 0..100u64 {
        let mut rng = seeded(seed);
        let centers = unit_rows(4, d, &mut rng);
        let noisy = |rows: usize, rng: &mut common::Rng| {
            let mut out = Matrix::zeros(rows, d);
            let noise = unit_rows(rows, d, rng);
            for r in 0..rows {
                let c = centers.row(r % 4);
                let v: Vec<f64> = (0..d).map(|t| c[t] + 0.3 * noise[(r, t)]).collect();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                out.row_mut(r).iter_mut().zip(&v).for_each(|(o, x)| *o = x / nv);
            }
            out
        };
        let mut queue = MomentumQueue::random(m, d, seed).unwrap();
        queue.enqueue(&noisy(m, &mut rng), None).unwrap();
        let keys = noisy(n, &mut rng);
        let sink = SupportSelection::Sinkhorn(SinkhornConfig { epsilon: 0.01, ..SinkhornConfig::default() });
        with += shot_overlap_ratio(&build_pseudo_task(&keys, &queue, k, sink).unwrap());
        without += shot_overlap_ratio(&build_pseudo_task(&keys, &queue, k, SupportSelection::RawSimilarity).unwrap());
    }
    assert!(with < without, "sinkhorn {with} vs raw {without}");
}

#[test]
fn sinkhorn_overlap_is_small_on_random_data() {
    let (n, k, d) = (8, 4, 16);
    let m = 16 * n * k;
    let mut total = 0.0;
    for seed in 0..100u64 {
        let mut rng = seeded(seed);
        let queue = MomentumQueue::random(m, d, seed).unwrap();
        let keys = unit_rows(n, d, &mut rng);
        let task = build_pseudo_task(&keys, &queue, k, SupportSelection::Sinkhorn(SinkhornConfig::default())).unwrap();
        total += shot_overlap_ratio(&task);
    }
    assert!(total / 100.0 < 0.05, "mean overlap {}", total / 100.0);
}

#[test]
fn top_k_of_plan_selects_k_per_row() {
    let mut rng = seeded(3);
    let sim = unit_rows(5, 4, &mut rng).matmul_t(&unit_rows(20, 4, &mut rng)).unwrap();
    let hard = select_top_k(&sinkhorn(&sim, &SinkhornConfig::default()).unwrap(), 3).unwrap();
    assert!(hard.support_indices.iter().all(|r| r.len() == 3));
    let _ = Activation::Relu;
}
