use glind::autodiff::{softmax_rows, SegmentNorm, Tape};
use glind::data::{build_knn_graph, Dataset, KnnSpec, Label, Metric, Task};
use glind::layers::{
    euler_diffusion_step, gate_probabilities, glind_gat_layer, glind_gcn_layer, glind_trans_layer,
    linear_attention_aggregate, sample_branch, DiffusivityField, GumbelMode, LayerKind, LayerParams, ATTENTION_EPS,
};
use glind::metrics::{roc_auc, EvalMetric};
use glind::model::{ForwardOptions, Model, ModelConfig};
use glind::objective::{categorical_kl, exact_deconfounded_loglik, reweighted_elbo, PriorEstimate};
use glind::train::evaluate;
use glind::verify::quadratic_attention;
use glind::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(r, c, 1.0, rng)
}

fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, edges).unwrap()
}

fn simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn kind_of(i: usize) -> LayerKind {
    LayerKind::ALL[i % 3]
}

fn layer_params(kind: LayerKind, d: usize, k: usize, seed: u64) -> LayerParams {
    let mut cfg = ModelConfig::new(kind, d, d, 2);
    cfg.hypotheses = k;
    cfg.layers = 1;
    let model = Model::new(cfg.clone(), seed).unwrap();
    model.params.layer(&cfg, 0)
}

fn apply_layer(kind: LayerKind, z: &Tensor, g: &Graph, p: &LayerParams, h: &Tensor) -> Tensor {
    match kind {
        LayerKind::Gcn => glind_gcn_layer(z, g, p, h, 0.5),
        LayerKind::Gat => glind_gat_layer(z, g, p, h, 0.5, 0.2, SegmentNorm::Softmax),
        LayerKind::Trans => glind_trans_layer(z, Some(g), p, h, 0.5),
    }
    .unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for (u, &pu) in perm.iter().enumerate() {
        for c in 0..t.cols() {
            out.set(pu, c, t.get(u, c)).unwrap();
        }
    }
    out
}

fn assert_graph_valid(g: &Graph) {
    for u in 0..g.num_nodes() {
        assert!(!g.has_edge(u, u), "self loop at {u}");
        for &v in g.neighbors(u) {
            assert!(g.has_edge(v, u), "edge {u}-{v} not symmetric");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-100.0f64..100.0, 1..40), cols in 1usize..6) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let s = softmax_rows(&x);
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic(seed in any::<u64>(), kind in 0usize..3) {
        let mut r = rng(seed);
        let n = r.gen_range(2..12);
        let cfg = ModelConfig::new(kind_of(kind), 3, 5, 2);
        let model = Model::new(cfg, seed).unwrap();
        let x = random_tensor(n, 3, &mut r);
        let g = random_graph(n, 0.3, &mut r);
        let run = || {
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let xv = tape.constant(x.clone());
            let out = model.forward(&tape, &bound, xv, &g, &ForwardOptions::train(seed, 7)).unwrap();
            let v = tape.value(out.logits).clone();
            v
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn constructed_graphs_are_symmetric_without_self_loops(seed in any::<u64>(), n in 1usize..30, p in 0.0f64..0.6) {
        let mut r = rng(seed);
        assert_graph_valid(&random_graph(n, p, &mut r));
        let x = random_tensor(n.max(2), 3, &mut r);
        let k = r.gen_range(1..x.rows());
        for metric in [Metric::Euclidean, Metric::Cosine, Metric::AngleBiasedCosine { theta_degrees: 120.0 }] {
            assert_graph_valid(&build_knn_graph(&x, &KnnSpec::new(k, metric).unwrap()).unwrap());
        }
    }

    #[test]
    fn gate_and_sample_rows_sum_to_one(seed in any::<u64>(), n in 1usize..20, d in 1usize..6, k in 1usize..6, tau in 0.01f64..100.0) {
        let mut r = rng(seed);
        let z = random_tensor(n, d, &mut r).map(|v| 10.0 * v);
        let w = random_tensor(k, d, &mut r).map(|v| 10.0 * v);
        let pi = gate_probabilities(&z, &w).unwrap();
        for mode in [GumbelMode::PaperLiteral, GumbelMode::LogSpace] {
            let h = sample_branch(&pi, tau, seed, mode).unwrap();
            for u in 0..n {
                prop_assert!((pi.row(u).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((h.row(u).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_diffusion_conserves_column_sums(seed in any::<u64>(), n in 1usize..=50, d in 1usize..5) {
        let mut r = rng(seed);
        let g = random_graph(n, 0.2, &mut r);
        let z = random_tensor(n, d, &mut r);
        let mut rates = std::collections::HashMap::new();
        let field = DiffusivityField::from_fn(&g, |u, v| {
            *rates.entry((u.min(v), u.max(v))).or_insert_with(|| r.gen_range(0.0..2.0))
        })
        .unwrap();
        let next = euler_diffusion_step(&z, &g, &field, 0.3).unwrap();
        let drift = next.column_sums().max_abs_diff(&z.column_sums());
        prop_assert!(drift < 1e-9, "drift {drift}");
    }

    #[test]
    fn consensus_is_fixed_under_zero_weights(seed in any::<u64>(), n in 1usize..=50, d in 1usize..6, k in 1usize..4, kind in 0usize..3) {
        let mut r = rng(seed);
        let g = random_graph(n, 0.15, &mut r);
        let row: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let z = Tensor::from_rows(&vec![row; n]).unwrap();
        let kind = kind_of(kind);
        let p = LayerParams::zeros(kind, d, k, true);
        let h = Tensor::filled(n, k, 1.0 / k as f64);
        prop_assert_eq!(apply_layer(kind, &z, &g, &p, &h), z);
    }

    #[test]
    fn linear_attention_matches_quadratic_form(seed in any::<u64>(), n in 1usize..=64, d in 1usize..=16) {
        let mut r = rng(seed);
        let z = random_tensor(n, d, &mut r);
        let wk = random_tensor(d, d, &mut r);
        let wq = random_tensor(d, d, &mut r);
        let fast = linear_attention_aggregate(&z, &wk, &wq, ATTENTION_EPS).unwrap();
        let slow = quadratic_attention(&z, &wk, &wq).unwrap();
        let err = fast.max_abs_diff(&slow) / slow.max_abs().max(1e-12);
        prop_assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn layers_are_permutation_equivariant(seed in any::<u64>(), n in 2usize..16, d in 1usize..6, k in 1usize..4, kind in 0usize..3) {
        let mut r = rng(seed);
        let kind = kind_of(kind);
        let g = random_graph(n, 0.3, &mut r);
        let z = random_tensor(n, d, &mut r);
        let h = Tensor::new(n, k, (0..n).flat_map(|_| simplex(k, &mut r)).collect()).unwrap();
        let p = layer_params(kind, d, k, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let out = apply_layer(kind, &z, &g, &p, &h);
        let out_p = apply_layer(kind, &permute_rows(&z, &perm), &g.permuted(&perm), &p, &permute_rows(&h, &perm));
        prop_assert!(out_p.max_abs_diff(&permute_rows(&out, &perm)) < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(seed in any::<u64>(), k in 1usize..8) {
        let mut r = rng(seed);
        let q = simplex(k, &mut r);
        let p = simplex(k, &mut r);
        let kl = categorical_kl(&q, &p).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(categorical_kl(&q, &q).unwrap(), 0.0);
        if q.iter().zip(&p).any(|(a, b)| (a - b).abs() > 1e-6) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn reweighted_elbo_never_exceeds_exact_loglik(seed in any::<u64>(), kind in 0usize..3) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=5);
        let mut cfg = ModelConfig::new(kind_of(kind), 2, r.gen_range(1..=4), 2);
        cfg.layers = r.gen_range(1..=2);
        cfg.hypotheses = r.gen_range(1..=3);
        let model = Model::new(cfg.clone(), seed).unwrap();
        let x = random_tensor(n, 2, &mut r);
        let g = random_graph(n, 0.4, &mut r);
        let labels: Vec<Label> = (0..n).map(|_| Label::Class(r.gen_range(0..2))).collect();
        let prior = |r: &mut ChaCha8Rng| PriorEstimate::new((0..cfg.layers).map(|_| simplex(cfg.hypotheses, r)).collect()).unwrap();
        let (p0, q) = (prior(&mut r), prior(&mut r));
        let exact = exact_deconfounded_loglik(&model, &x, &labels, &g, &p0).unwrap();
        let elbo = reweighted_elbo(&model, &x, &labels, &g, &q, &p0).unwrap();
        prop_assert!(elbo <= exact + 1e-8, "elbo {elbo} exact {exact}");
    }

    #[test]
    fn evaluation_ignores_index_order_and_unscored_labels(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(4..20);
        let x = random_tensor(n, 3, &mut r);
        let g = random_graph(n, 0.3, &mut r);
        let labels: Vec<Label> = (0..n).map(|u| if u % 3 == 0 { Label::Missing } else { Label::Class(r.gen_range(0..3)) }).collect();
        let ds = Dataset::new(x.clone(), labels.clone(), vec![0; n], Task::Classification, 3).unwrap();
        let model = Model::new(ModelConfig::new(LayerKind::Gcn, 3, 4, 3), seed).unwrap();
        let mut idx: Vec<usize> = (0..n).filter(|u| u % 3 != 0).collect();
        let base = evaluate(&model, &ds, &g, &idx, EvalMetric::Accuracy).unwrap();
        idx.shuffle(&mut r);
        prop_assert_eq!(evaluate(&model, &ds, &g, &idx, EvalMetric::Accuracy).unwrap(), base);
        let relabeled: Vec<Label> = labels.iter().map(|l| if l.is_labeled() { *l } else { Label::Class(r.gen_range(0..3)) }).collect();
        let ds2 = Dataset::new(x, relabeled, vec![0; n], Task::Classification, 3).unwrap();
        prop_assert_eq!(evaluate(&model, &ds2, &g, &idx, EvalMetric::Accuracy).unwrap(), base);
    }

    #[test]
    fn constant_scores_give_half_auc(c in -5.0f64..5.0, flags in prop::collection::vec(any::<bool>(), 2..40)) {
        prop_assume!(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f));
        prop_assert_eq!(roc_auc(&vec![c; flags.len()], &flags).unwrap(), 0.5);
    }
}
