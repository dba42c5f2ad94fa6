//! Gradient verification: analytic gradients from the tape must agree with
//! central finite differences on randomly composed graphs, on conv stacks,
//! on the full model with every fusion head, and on every loss builder.
//!
//! [DERIVED] All expected values here come from an independent oracle:
//! central finite differences of the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tristream::datagen::{generate, DatasetConfig};
use tristream::graph::{finite_diff_gradient, Graph, NodeId, DIST_EPS};
use tristream::losses::{
    estimate_priors, graph_class_balanced_focal, graph_cross_entropy, graph_logit_adjusted_ce,
    graph_reciprocal_triplet, graph_triplet,
};
use tristream::model::{forward_snippet, init_params, FusionMethod, ModelConfig, ModelGraph};
use tristream::params::ParamStore;
use tristream::tensor::Tensor;

const FD_EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Randomly composed chain graphs
// ---------------------------------------------------------------------------

/// One step of a random program over same-length vector nodes. Indices refer
/// to the growing node pool; scalar-producing steps feed a separate pool that
/// is summed into the final output.
#[derive(Clone, Copy, Debug)]
enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize),
    Relu(usize),
    Sigmoid(usize),
    /// exp(sigmoid(x)): bounded input keeps finite differences stable.
    ExpSig(usize),
    /// log(sigmoid(x) + 0.5): argument stays in (0.5, 1.5).
    LogSig(usize),
    /// 1/max(sigmoid(x) + 0.5, eps): smooth away from the guard.
    RecipSig(usize),
    Softmax(usize),
    L2(usize),
    MatMul(usize),
    Dist(usize, usize),
}

struct Program {
    num_params: usize,
    dim: usize,
    scale: f64,
    steps: Vec<Step>,
    with_matrix: bool,
}

fn random_program(rng: &mut ChaCha8Rng) -> Program {
    let num_params = rng.random_range(1..=3usize);
    let dim = rng.random_range(3..=5usize);
    let n_steps = rng.random_range(3..=8usize);
    let mut pool = num_params; // number of vector nodes so far
    let mut steps = Vec::with_capacity(n_steps);
    let mut with_matrix = false;
    for _ in 0..n_steps {
        let a = rng.random_range(0..pool);
        let b = rng.random_range(0..pool);
        let step = match rng.random_range(0..12u32) {
            0 => Step::Add(a, b),
            1 => Step::Sub(a, b),
            2 => Step::Mul(a, b),
            3 => Step::ScalarMul(a),
            4 => Step::Relu(a),
            5 => Step::Sigmoid(a),
            6 => Step::ExpSig(a),
            7 => Step::LogSig(a),
            8 => Step::RecipSig(a),
            9 => Step::Softmax(a),
            10 => Step::L2(a),
            11 => {
                if rng.random_bool(0.5) {
                    with_matrix = true;
                    Step::MatMul(a)
                } else {
                    Step::Dist(a, b)
                }
            }
            _ => unreachable!(),
        };
        if !matches!(step, Step::Dist(_, _)) {
            pool += 1;
        }
        steps.push(step);
    }
    Program {
        num_params,
        dim,
        scale: rng.random_range(0.3..1.5),
        steps,
        with_matrix,
    }
}

fn program_store(prog: &Program, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for i in 0..prog.num_params {
        let data: Vec<f64> = (0..prog.dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        store
            .insert(&format!("p{i}"), Tensor::from_vec(vec![prog.dim], data).unwrap())
            .unwrap();
    }
    if prog.with_matrix {
        let data: Vec<f64> = (0..prog.dim * prog.dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        store
            .insert(
                "w",
                Tensor::from_vec(vec![prog.dim, prog.dim], data).unwrap(),
            )
            .unwrap();
    }
    store
}

/// Replay the program on a fresh graph; returns (graph, scalar output node).
fn build_program(prog: &Program, store: &ParamStore) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let mut pool: Vec<NodeId> = (0..prog.num_params)
        .map(|i| g.param(store, &format!("p{i}")).unwrap())
        .collect();
    let half = g.constant(Tensor::from_vec(vec![prog.dim], vec![0.5; prog.dim]).unwrap());
    let mut scalars: Vec<NodeId> = Vec::new();
    for step in &prog.steps {
        let node = match *step {
            Step::Add(a, b) => g.add(pool[a], pool[b]).unwrap(),
            Step::Sub(a, b) => g.sub(pool[a], pool[b]).unwrap(),
            Step::Mul(a, b) => g.mul(pool[a], pool[b]).unwrap(),
            Step::ScalarMul(a) => g.scalar_mul(prog.scale, pool[a]),
            Step::Relu(a) => g.relu(pool[a]),
            Step::Sigmoid(a) => g.sigmoid(pool[a]),
            Step::ExpSig(a) => {
                let s = g.sigmoid(pool[a]);
                g.exp(s)
            }
            Step::LogSig(a) => {
                let s = g.sigmoid(pool[a]);
                let shifted = g.add(s, half).unwrap();
                g.log(shifted)
            }
            Step::RecipSig(a) => {
                let s = g.sigmoid(pool[a]);
                let shifted = g.add(s, half).unwrap();
                g.recip_guard(shifted, DIST_EPS)
            }
            Step::Softmax(a) => g.softmax(pool[a]).unwrap(),
            Step::L2(a) => {
                // sigmoid keeps the vector strictly positive: never a zero
                // vector, and away from the normalization kink
                let s = g.sigmoid(pool[a]);
                g.l2_normalize(s).unwrap()
            }
            Step::MatMul(a) => {
                let w = g.param(store, "w").unwrap();
                g.matmul(w, pool[a]).unwrap()
            }
            Step::Dist(a, b) => {
                let d = g.euclidean_distance(pool[a], pool[b]).unwrap();
                scalars.push(d);
                continue;
            }
        };
        pool.push(node);
    }
    let last = *pool.last().unwrap();
    let mut out = g.mean_axis(last, 0).unwrap();
    for s in scalars {
        out = g.add(out, s).unwrap();
    }
    (g, out)
}

fn check_program(prog: &Program, store: &ParamStore) -> f64 {
    let (g, out) = build_program(prog, store);
    let mut grads = store.clone();
    grads.zero_grads();
    g.accumulate_grads(out, &mut grads).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let point = store.value(name).unwrap().clone();
        let mut f = |t: &Tensor| {
            let mut s = store.clone();
            *s.value_mut(name).unwrap() = t.clone();
            let (g2, out2) = build_program(prog, &s);
            g2.value(out2).item()
        };
        let fd = finite_diff_gradient(&mut f, &point, FD_EPS);
        let analytic = grads.grad(name).unwrap();
        for (a, b) in analytic.data().iter().zip(fd.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// [DERIVED] 200 random composite graphs: analytic vs central finite
/// differences, max abs deviation <= 1e-4 on every parameter entry.
#[test]
fn random_graphs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let prog = random_program(&mut rng);
        let store = program_store(&prog, &mut rng);
        let w = check_program(&prog, &store);
        assert!(
            w <= TOL,
            "case {case}: max gradient deviation {w:.3e} exceeds {TOL:.0e}"
        );
        worst = worst.max(w);
    }
    println!("200 random graphs: worst deviation {worst:.3e}");
}

// ---------------------------------------------------------------------------
// conv3d stacks
// ---------------------------------------------------------------------------

fn conv_case(seed: u64, cin: usize, cout: usize, t: usize, hw: usize, k: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let rand_t = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    };
    store.insert("x", rand_t(&mut rng, vec![cin, t, hw, hw])).unwrap();
    store
        .insert("k", rand_t(&mut rng, vec![cout, cin, k, k, k]))
        .unwrap();
    store.insert("b", rand_t(&mut rng, vec![cout])).unwrap();

    let build = |s: &ParamStore| {
        let mut g = Graph::new();
        let x = g.param(s, "x").unwrap();
        let kn = g.param(s, "k").unwrap();
        let b = g.param(s, "b").unwrap();
        let y = g.conv3d(x, kn, b).unwrap();
        let act = g.sigmoid(y);
        let pooled = g.global_avg_pool(act).unwrap();
        let out = g.mean_axis(pooled, 0).unwrap();
        (g, out)
    };

    let (g, out) = build(&store);
    let mut grads = store.clone();
    grads.zero_grads();
    g.accumulate_grads(out, &mut grads).unwrap();
    for name in ["x", "k", "b"] {
        let point = store.value(name).unwrap().clone();
        let mut f = |tensor: &Tensor| {
            let mut s = store.clone();
            *s.value_mut(name).unwrap() = tensor.clone();
            let (g2, o2) = build(&s);
            g2.value(o2).item()
        };
        let fd = finite_diff_gradient(&mut f, &point, FD_EPS);
        let analytic = grads.grad(name).unwrap();
        for (a, b) in analytic.data().iter().zip(fd.data()) {
            assert!(
                (a - b).abs() <= TOL,
                "conv3d seed {seed} param {name}: {a} vs {b}"
            );
        }
    }
}

/// [DERIVED] conv3d forward/backward against finite differences across
/// several channel/spatial/kernel configurations.
#[test]
fn conv3d_matches_finite_differences() {
    conv_case(1, 1, 1, 2, 2, 1);
    conv_case(2, 2, 3, 3, 3, 3);
    conv_case(3, 3, 2, 2, 4, 3);
    conv_case(4, 1, 2, 4, 2, 3);
    conv_case(5, 2, 2, 3, 3, 1);
}

// ---------------------------------------------------------------------------
// Full model with each fusion head + hybrid loss
// ---------------------------------------------------------------------------

fn tiny_dataset_cfg() -> DatasetConfig {
    DatasetConfig {
        num_classes: 4,
        head_classes: vec![0],
        snippet_len: 2,
        spatial: 2,
        channels: [1, 1, 1],
        imbalance_ratio: 2.0,
        max_class_samples: 6,
        noise_sigma: 0.3,
        seed: 11,
    }
}

fn tiny_model_cfg(fusion: FusionMethod) -> ModelConfig {
    ModelConfig {
        encoding_dim: 4,
        embedding_dim: None,
        conv_channels: vec![2],
        kernel: 3,
        fusion_method: fusion,
        conv_fusion_out_channels: 2,
        num_classes: 4,
        stream_channels: vec![1, 1, 1],
        active_streams: vec![0, 1, 2],
    }
}

/// Hybrid objective over an (anchor, positive, negative) triple of snippets.
fn model_loss(
    cfg: &ModelConfig,
    store: &ParamStore,
    snippets: &[&tristream::datagen::Snippet; 3],
) -> (ModelGraph, NodeId) {
    let mut mg = ModelGraph::new();
    let (emb_a, logits_a) = forward_snippet(&mut mg, store, cfg, snippets[0]).unwrap();
    let (emb_p, _) = forward_snippet(&mut mg, store, cfg, snippets[1]).unwrap();
    let (emb_n, _) = forward_snippet(&mut mg, store, cfg, snippets[2]).unwrap();
    let y = snippets[0].label;
    let ce = graph_cross_entropy(&mut mg.graph, logits_a, y).unwrap();
    let d_ap = mg.graph.euclidean_distance(emb_a, emb_p).unwrap();
    let d_an = mg.graph.euclidean_distance(emb_a, emb_n).unwrap();
    let rt = graph_reciprocal_triplet(&mut mg.graph, d_ap, d_an).unwrap();
    let scaled = mg.graph.scalar_mul(0.1, rt);
    let total = mg.graph.add(ce, scaled).unwrap();
    (mg, total)
}

/// [DERIVED] End-to-end gradients (three encoders, fusion head, classifier,
/// hybrid loss) against finite differences, for all three fusion methods.
#[test]
fn full_model_gradients_match_finite_differences() {
    let ds = generate(&tiny_dataset_cfg()).unwrap();
    // anchor/positive share class 0; negative from another class
    let mut anchor = None;
    let mut positive = None;
    let mut negative = None;
    for s in &ds.snippets {
        if s.label == 0 {
            if anchor.is_none() {
                anchor = Some(s);
            } else if positive.is_none() {
                positive = Some(s);
            }
        } else if negative.is_none() {
            negative = Some(s);
        }
    }
    let triple = [anchor.unwrap(), positive.unwrap(), negative.unwrap()];

    for fusion in [FusionMethod::Avg, FusionMethod::Elem, FusionMethod::Conv] {
        let cfg = tiny_model_cfg(fusion);
        let store = init_params(&cfg, 5).unwrap();
        let (mg, total) = model_loss(&cfg, &store, &triple);
        let mut grads = store.clone();
        grads.zero_grads();
        mg.graph.accumulate_grads(total, &mut grads).unwrap();

        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            let point = store.value(name).unwrap().clone();
            let mut f = |t: &Tensor| {
                let mut s = store.clone();
                *s.value_mut(name).unwrap() = t.clone();
                let (mg2, total2) = model_loss(&cfg, &s, &triple);
                mg2.graph.value(total2).item()
            };
            let fd = finite_diff_gradient(&mut f, &point, FD_EPS);
            let analytic = grads.grad(name).unwrap();
            for (a, b) in analytic.data().iter().zip(fd.data()) {
                let rel = (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()));
                assert!(
                    rel <= TOL,
                    "{fusion:?} param {name}: analytic {a} vs fd {b} (rel {rel:.3e})"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Loss builders on raw logit parameters
// ---------------------------------------------------------------------------

/// [DERIVED] Every graph-level loss differentiated w.r.t. raw logits matches
/// finite differences.
#[test]
fn loss_builders_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let priors = estimate_priors(&[0, 0, 0, 1, 1, 2], 3).unwrap();
    for case in 0..20 {
        let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = rng.random_range(0..3usize);
        let mut store = ParamStore::new();
        store
            .insert("z", Tensor::from_vec(vec![3], logits).unwrap())
            .unwrap();

        type LossBuilder = Box<dyn Fn(&mut Graph, NodeId) -> NodeId>;
        let p1 = priors.clone();
        let p2 = priors.clone();
        let p3 = priors.clone();
        let builders: Vec<(&str, LossBuilder)> = vec![
            ("ce", Box::new(|g: &mut Graph, z| graph_cross_entropy(g, z, 1).unwrap())),
            (
                "la",
                Box::new(move |g: &mut Graph, z| {
                    graph_logit_adjusted_ce(g, z, y, &p1, 1.0).unwrap()
                }),
            ),
            (
                "cb",
                Box::new(move |g: &mut Graph, z| {
                    graph_class_balanced_focal(g, z, y, &p2, 0.99, 1.0, false).unwrap()
                }),
            ),
            (
                "cb_literal",
                Box::new(move |g: &mut Graph, z| {
                    graph_class_balanced_focal(g, z, y, &p3, 0.99, 1.0, true).unwrap()
                }),
            ),
        ];
        for (label, build_loss) in &builders {
            let build = |s: &ParamStore| {
                let mut g = Graph::new();
                let z = g.param(s, "z").unwrap();
                let out = build_loss(&mut g, z);
                (g, out)
            };
            let (g, out) = build(&store);
            let mut grads = store.clone();
            grads.zero_grads();
            g.accumulate_grads(out, &mut grads).unwrap();
            let point = store.value("z").unwrap().clone();
            let mut f = |t: &Tensor| {
                let mut s = store.clone();
                *s.value_mut("z").unwrap() = t.clone();
                let (g2, o2) = build(&s);
                g2.value(o2).item()
            };
            let fd = finite_diff_gradient(&mut f, &point, FD_EPS);
            for (a, b) in grads.grad("z").unwrap().data().iter().zip(fd.data()) {
                assert!((a - b).abs() <= TOL, "case {case} loss {label}: {a} vs {b}");
            }
        }
    }
}

/// [DERIVED] Triplet losses differentiated through the embedding vectors
/// (distance nodes) match finite differences.
#[test]
fn triplet_builders_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for margin in [0.1, 0.3] {
        for case in 0..10 {
            let mut store = ParamStore::new();
            for name in ["a", "p", "n"] {
                let data: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                store
                    .insert(name, Tensor::from_vec(vec![4], data).unwrap())
                    .unwrap();
            }
            for reciprocal in [false, true] {
                let build = |s: &ParamStore| {
                    let mut g = Graph::new();
                    let a = g.param(s, "a").unwrap();
                    let p = g.param(s, "p").unwrap();
                    let n = g.param(s, "n").unwrap();
                    let d_ap = g.euclidean_distance(a, p).unwrap();
                    let d_an = g.euclidean_distance(a, n).unwrap();
                    let out = if reciprocal {
                        graph_reciprocal_triplet(&mut g, d_ap, d_an).unwrap()
                    } else {
                        graph_triplet(&mut g, d_ap, d_an, margin).unwrap()
                    };
                    (g, out)
                };
                let (g, out) = build(&store);
                let mut grads = store.clone();
                grads.zero_grads();
                g.accumulate_grads(out, &mut grads).unwrap();
                for name in ["a", "p", "n"] {
                    let point = store.value(name).unwrap().clone();
                    let mut f = |t: &Tensor| {
                        let mut s = store.clone();
                        *s.value_mut(name).unwrap() = t.clone();
                        let (g2, o2) = build(&s);
                        g2.value(o2).item()
                    };
                    let fd = finite_diff_gradient(&mut f, &point, FD_EPS);
                    for (a, b) in grads.grad(name).unwrap().data().iter().zip(fd.data()) {
                        assert!(
                            (a - b).abs() <= TOL,
                            "case {case} reciprocal={reciprocal}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// t-SNE KL gradient
// ---------------------------------------------------------------------------

/// [DERIVED] The closed-form KL gradient matches finite differences of the
/// KL divergence at a random layout.
#[test]
fn tsne_kl_gradient_matches_finite_differences() {
    use tristream::tsne::{calibrate_affinities, kl_divergence, kl_gradient};
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 8;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let p = calibrate_affinities(&points, 3.0).unwrap();
    let layout: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let analytic = kl_gradient(&p, &layout);
    let flat: Vec<f64> = layout.iter().flatten().copied().collect();
    let point = Tensor::from_vec(vec![n * 2], flat).unwrap();
    let p2 = p.clone();
    let mut f = |t: &Tensor| {
        let l: Vec<Vec<f64>> = t.data().chunks(2).map(|c| c.to_vec()).collect();
        kl_divergence(&p2, &l)
    };
    let fd = finite_diff_gradient(&mut f, &point, FD_EPS);
    for i in 0..n {
        for d in 0..2 {
            let a = analytic[i][d];
            let b = fd.data()[i * 2 + d];
            assert!((a - b).abs() <= TOL, "point {i} dim {d}: {a} vs {b}");
        }
    }
}
