use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{normalize, synthetic};
use crate::missingness::{corrupt_mcar, preprocess_batch, surrogate_mask, MaskMatrix};

fn small_config(sampler: SamplerKind, blocks: usize, prototypes: usize) -> ModelConfig {
    ModelConfig {
        numeric: 3,
        cardinalities: vec![3],
        num_classes: 2,
        hidden: 8,
        embedding_width: 4,
        blocks,
        prototypes,
        sampler,
        k: 2,
        graph_head: GraphHeadKind::Gcn,
        projector_gain: 0.3,
    }
}

fn small_batch(n: usize, seed: u64) -> MiniBatch {
    let raw = synthetic::two_cluster_mixed(n, 3, 1, seed);
    let (ds, _) = normalize(&raw, None);
    let init = corrupt_mcar(&ds, 0.2, seed).unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let sur = surrogate_mask(&init, 0.3, &mut rng).unwrap();
    preprocess_batch(&ds, &rows, &init, &sur).unwrap()
}

fn run(model: &Model, batch: &MiniBatch, opts: ForwardOptions<'_>, seed: u64) -> (Tape, ForwardOutput) {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = forward(&mut tape, model, &vars, batch, opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (tape, out)
}

#[test]
fn p_zero_k_one_shapes() {
    let model = Model::new(small_config(SamplerKind::Egg, 1, 0), 0).unwrap();
    let batch = small_batch(8, 0);
    let (tape, out) = run(&model, &batch, ForwardOptions::train(0.5), 0);
    assert_eq!(tape.shape(out.h_out), (8, 8));
    assert_eq!(tape.shape(out.numeric.unwrap()), (8, 3));
    assert_eq!(tape.shape(out.categorical[0]), (8, 3));
    assert_eq!(tape.shape(out.task), (8, 2));
}

#[test]
fn prototypes_join_graph_but_not_heads() {
    let model = Model::new(small_config(SamplerKind::Egg, 2, 10), 0).unwrap();
    let batch = small_batch(8, 0);
    let (tape, out) = run(&model, &batch, ForwardOptions::train(0.5), 0);
    for g in &out.graphs {
        assert_eq!(tape.shape(g.hard), (18, 18));
    }
    assert_eq!(tape.shape(out.h_out), (8, 16));
    assert_eq!(tape.shape(out.task), (8, 2));
}

#[test]
fn zero_second_layer_gives_zero_features() {
    let mut model = Model::new(small_config(SamplerKind::Identity, 1, 0), 0).unwrap();
    model.params.propagation.second.weight = Tensor::zeros(8, 8);
    model.params.propagation.second.bias = Tensor::zeros(1, 8);
    let batch = small_batch(6, 1);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = input_matrix(&mut tape, &vars, &batch).unwrap();
    let (h0, _) = mlp(&mut tape, &vars.propagation, x, NormStats::Batch { rows: 6 }).unwrap();
    assert_eq!(tape.shape(h0), (6, 8));
    assert!(tape.value(h0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn propagation_gradient_matches_finite_differences() {
    let model = Model::new(small_config(SamplerKind::Identity, 1, 0), 3).unwrap();
    let batch = small_batch(6, 2);
    let loss_of = |w: &Tensor| {
        let mut tape = Tape::new();
        let mut p = model.params.clone();
        p.propagation.first.weight = w.clone();
        let vars = p.map(|_, t| tape.leaf(t.clone()));
        let x = input_matrix(&mut tape, &vars, &batch).unwrap();
        let (h0, _) = mlp(&mut tape, &vars.propagation, x, NormStats::Batch { rows: 6 }).unwrap();
        let sq = tape.square(h0);
        let l = tape.sum(sq);
        (tape, vars.propagation.first.weight, l)
    };
    let w0 = model.params.propagation.first.weight.clone();
    let (tape, wv, l) = loss_of(&w0);
    let g = tape.backward(l).unwrap().get(wv);
    let h = 1e-5;
    for e in 0..w0.len() {
        let mut wp = w0.clone();
        wp.data_mut()[e] += h;
        let mut wm = w0.clone();
        wm.data_mut()[e] -= h;
        let (tp, _, lp) = loss_of(&wp);
        let (tm, _, lm) = loss_of(&wm);
        let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
        let a = g.data()[e];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        assert!(rel < 1e-4, "entry {e}: analytic {a} vs numeric {fd}");
    }
}

#[test]
fn blocks_have_independent_projectors() {
    let model = Model::new(small_config(SamplerKind::Egg, 2, 0), 0).unwrap();
    let batch = small_batch(8, 0);
    let (t1, o1) = run(&model, &batch, ForwardOptions::eval(0.5), 5);
    let mut altered = model.clone();
    altered.params.blocks[1].projector.second.weight = Tensor::filled(8, 8, 0.7);
    let (t2, o2) = run(&altered, &batch, ForwardOptions::eval(0.5), 5);
    let first = |t: &Tape, o: &ForwardOutput| t.value(o.projected[0]).clone();
    assert_eq!(first(&t1, &o1), first(&t2, &o2));
    assert_ne!(t1.value(o1.projected[1]), t2.value(o2.projected[1]));
}

#[test]
fn projector_is_row_local_in_eval_mode() {
    let model = Model::new(small_config(SamplerKind::Egg, 1, 0), 0).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let base = Tensor::from_fn(3, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
    let dup = Tensor::from_rows(&[base.row(0).to_vec(), base.row(1).to_vec(), base.row(0).to_vec()]).unwrap();
    let x = tape.constant(dup);
    let r = &model.running.blocks[0];
    let (y, _) = mlp(
        &mut tape,
        &vars.blocks[0].projector,
        x,
        NormStats::Running {
            mean: &r.mean,
            var: &r.var,
        },
    )
    .unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), (3, 8));
    assert_eq!(y.row(0), y.row(2));
}

#[test]
fn edge_probability_examples() {
    let h = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let p = edge_probabilities(&h);
    assert_eq!(p.get(0, 2), 1.0);
    assert!((p.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
    assert!((p.get(0, 1) - 0.36788).abs() < 1e-5);
    for i in 0..3 {
        assert_eq!(p.get(i, i), 1.0);
    }
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn probabilities_symmetric_bounded_monotone(
            vals in proptest::collection::vec(-2.0f64..2.0, 12)
        ) {
            let h = Tensor::from_vec(4, 3, vals).unwrap();
            let p = edge_probabilities(&h);
            let d = crate::ndmath::pairwise_sq_dist(&h);
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert_eq!(p.get(i, j), p.get(j, i));
                    prop_assert!(p.get(i, j) > 0.0 && p.get(i, j) <= 1.0);
                    for k in 0..4 {
                        for l in 0..4 {
                            if d.get(i, j) < d.get(k, l) {
                                prop_assert!(p.get(i, j) >= p.get(k, l));
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sample(kind: SamplerKind, p: &Tensor, tau: f64, k: usize, seed: u64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let lp = tape.constant(p.map(f64::ln));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = match kind {
        SamplerKind::Egg => sample_adjacency_egg(&mut tape, lp, tau, &mut rng)?,
        SamplerKind::Kegg => sample_adjacency_kegg(&mut tape, lp, tau, k, &mut rng)?,
        SamplerKind::Identity => identity_adjacency(&mut tape, p.rows()),
    };
    Ok(tape.value(g.hard).clone())
}

#[test]
fn single_node_graph_is_a_self_loop() {
    let a = sample(SamplerKind::Egg, &Tensor::ones(1, 1), 0.5, 0, 0).unwrap();
    assert_eq!(a, Tensor::ones(1, 1));
}

#[test]
fn egg_golden_seed_fixture() {
    let p = Tensor::ones(4, 4);
    let a = sample(SamplerKind::Egg, &p, 0.5, 0, 42).unwrap();
    assert_eq!(a, sample(SamplerKind::Egg, &p, 0.5, 0, 42).unwrap());
    check_adjacency(&a).unwrap();
    // recorded from the first run of this fixture
    let golden = Tensor::from_rows(&[
        vec![1.0, 1.0, 1.0, 1.0],
        vec![1.0, 1.0, 0.0, 1.0],
        vec![1.0, 0.0, 1.0, 1.0],
        vec![1.0, 1.0, 1.0, 1.0],
    ])
    .unwrap();
    assert_eq!(a, golden, "{:?}", a);
}

#[test]
fn non_positive_temperature_rejected() {
    let p = Tensor::ones(3, 3);
    assert!(matches!(sample(SamplerKind::Egg, &p, 0.0, 0, 0), Err(Error::Contract(_))));
    assert!(matches!(sample(SamplerKind::Kegg, &p, -1.0, 1, 0), Err(Error::Contract(_))));
}

#[test]
fn kegg_row_sums_and_saturation() {
    let h = Tensor::from_fn(7, 2, |i, j| (i as f64 * 0.3 + j as f64).cos());
    let p = edge_probabilities(&h);
    for seed in 0..20 {
        let a = sample(SamplerKind::Kegg, &p, 0.2, 2, seed).unwrap();
        check_adjacency(&a).unwrap();
        for i in 0..7 {
            let s: f64 = a.row(i).iter().sum();
            assert!((3.0..=7.0).contains(&s));
        }
    }
    assert_eq!(sample(SamplerKind::Kegg, &p, 0.2, 6, 0).unwrap(), Tensor::ones(7, 7));
    assert!(matches!(sample(SamplerKind::Kegg, &p, 0.2, 7, 0), Err(Error::Contract(_))));
}

#[test]
fn kegg_outlier_picks_nearest() {
    // nodes on a line; node 10 is far to the right
    let mut pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.5]).collect();
    pts.push(vec![12.0]);
    let h = Tensor::from_rows(&pts).unwrap();
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let lp = edge_log_probabilities(&mut tape, hv);
    let k = 3;
    let mut hits = 0;
    for seed in 0..100 {
        let mut t = Tape::new();
        let lpv = t.constant(tape.value(lp).clone());
        let g = sample_adjacency_kegg(&mut t, lpv, 0.01, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = t.value(g.hard);
        if (7..10).all(|j| a.get(10, j) == 1.0) {
            hits += 1;
        }
    }
    assert!(hits > 90, "{hits}/100");
}

#[test]
fn gcn_identity_graph_and_weight() {
    let h = Tensor::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.1 - 0.2);
    let out = gcn_update(&h, &Tensor::identity(3), &Tensor::identity(4)).unwrap();
    let mut tape = Tape::new();
    let two_h = tape.constant(h.scale(2.0));
    let ln = tape.layer_norm_row(two_h);
    let expect = tape.value(ln);
    for (a, b) in out.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gcn_rejects_asymmetric_adjacency() {
    let mut a = Tensor::identity(3);
    a.set(0, 1, 1.0);
    let r = gcn_update(&Tensor::ones(3, 2), &a, &Tensor::identity(2));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn gcn_message_passing_is_local() {
    let h = Tensor::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
    let mut a = Tensor::identity(4);
    a.set(0, 1, 1.0);
    a.set(1, 0, 1.0);
    let w = Tensor::from_fn(3, 3, |i, j| ((i + j) as f64 * 0.7).cos());
    let base = gcn_update(&h, &a, &w).unwrap();
    let mut h2 = h.clone();
    h2.set(1, 0, 5.0);
    let moved = gcn_update(&h2, &a, &w).unwrap();
    assert_ne!(base.row(0), moved.row(0)); // 0 ~ 1
    assert_eq!(base.row(2), moved.row(2)); // isolated
    assert_eq!(base.row(3), moved.row(3));
}

#[test]
fn gcn_weight_gradient_matches_finite_differences() {
    let h = Tensor::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.9).sin());
    let mut a = Tensor::identity(5);
    for (i, j) in [(0, 1), (1, 2), (3, 4), (0, 4)] {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    let w0 = Tensor::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.4).cos());
    let target = Tensor::from_fn(5, 3, |i, j| (i as f64 - j as f64) * 0.2);
    let loss = |w: &Tensor| {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let av = tape.constant(a.clone());
        let wv = tape.leaf(w.clone());
        let out = Gcn.propagate(&mut tape, hv, av, wv).unwrap();
        let tv = tape.constant(target.clone());
        let diff = tape.sub(out, tv).unwrap();
        let sq = tape.square(diff);
        let l = tape.sum(sq);
        (tape, wv, l)
    };
    let (tape, wv, l) = loss(&w0);
    let g = tape.backward(l).unwrap().get(wv);
    for e in 0..9 {
        let mut wp = w0.clone();
        wp.data_mut()[e] += 1e-5;
        let mut wm = w0.clone();
        wm.data_mut()[e] -= 1e-5;
        let (tp, _, lp) = loss(&wp);
        let (tm, _, lm) = loss(&wm);
        let fd = (tp.value(lp).item() - tm.value(lm).item()) / 2e-5;
        let rel = (g.data()[e] - fd).abs() / g.data()[e].abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-4, "{e}: {} vs {fd}", g.data()[e]);
    }
}

#[test]
fn zero_gcn_weights_make_outputs_graph_independent() {
    let mut model = Model::new(small_config(SamplerKind::Egg, 1, 2), 0).unwrap();
    model.params.blocks[0].gcn = Tensor::zeros(8, 8);
    let batch = small_batch(8, 3);
    let (t1, o1) = run(&model, &batch, ForwardOptions::eval(0.5), 1);
    let (t2, o2) = run(&model, &batch, ForwardOptions::eval(0.5), 2);
    assert_ne!(t1.value(o1.graphs[0].hard), t2.value(o2.graphs[0].hard));
    assert_eq!(t1.value(o1.task), t2.value(o2.task));
}

#[test]
fn identity_sampler_forces_self_loops() {
    let model = Model::new(small_config(SamplerKind::Identity, 1, 2), 0).unwrap();
    let batch = small_batch(8, 3);
    let (tape, out) = run(&model, &batch, ForwardOptions::train(0.5), 0);
    assert_eq!(tape.value(out.graphs[0].hard), &Tensor::identity(10));
}

#[test]
fn prototypes_cut_off_receive_no_gradient() {
    let model = Model::new(small_config(SamplerKind::Egg, 1, 2), 0).unwrap();
    let batch = small_batch(8, 4);
    // fully connected among data rows and among prototypes, nothing across
    let a = Tensor::from_fn(10, 10, |i, j| if (i < 8) == (j < 8) { 1.0 } else { 0.0 });
    let frozen = [a];
    let opts = ForwardOptions {
        mode: Mode::Train,
        tau: 0.5,
        frozen: Some(&frozen),
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = forward(&mut tape, &model, &vars, &batch, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t = tape.sum(out.task);
    let n = tape.sum(out.numeric.unwrap());
    let l = tape.add(t, n).unwrap();
    let g = tape.backward(l).unwrap();
    let gp = g.get(vars.prototypes.unwrap());
    assert!(gp.data().iter().all(|&v| v == 0.0));
    // sanity: the data path does get gradient
    assert!(g.get(vars.blocks[0].gcn).max_abs() > 0.0);
}

#[test]
fn permuting_rows_permutes_outputs() {
    let model = Model::new(small_config(SamplerKind::Egg, 1, 0), 0).unwrap();
    let raw = synthetic::two_cluster_mixed(6, 3, 1, 9);
    let (ds, _) = normalize(&raw, None);
    let init = MaskMatrix::all_observed(6, 4);
    let rows: Vec<usize> = (0..6).collect();
    let perm = vec![3, 0, 5, 1, 4, 2];
    let b1 = preprocess_batch(&ds, &rows, &init, &MaskMatrix::all_observed(6, 4)).unwrap();
    let b2 = preprocess_batch(&ds, &perm, &init, &MaskMatrix::all_observed(6, 4)).unwrap();
    let a1 = Tensor::from_fn(6, 6, |i, j| if i == j || (i + j) % 3 == 0 { 1.0 } else { 0.0 });
    let a2 = Tensor::from_fn(6, 6, |i, j| a1.get(perm[i], perm[j]));
    let (f1, f2) = ([a1], [a2]);
    for mode in [Mode::Train, Mode::Eval] {
        let o = |b: &MiniBatch, f: &[Tensor]| {
            let opts = ForwardOptions {
                mode,
                tau: 0.5,
                frozen: Some(f),
            };
            let (t, out) = run(&model, b, opts, 0);
            t.value(out.task).clone()
        };
        let y1 = o(&b1, &f1);
        let y2 = o(&b2, &f2);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((y2.get(i, c) - y1.get(p, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::new(small_config(SamplerKind::Kegg, 2, 3), 7).unwrap();
    let json = serde_json::to_string(&model).unwrap();
    let back: Model = serde_json::from_str(&json).unwrap();
    assert_eq!(back, model);
}

#[test]
fn same_seed_same_init() {
    let a = Model::new(small_config(SamplerKind::Egg, 1, 2), 11).unwrap();
    let b = Model::new(small_config(SamplerKind::Egg, 1, 2), 11).unwrap();
    let c = Model::new(small_config(SamplerKind::Egg, 1, 2), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
