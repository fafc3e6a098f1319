use irnn_core::cells::Activation;
use irnn_core::harness::{rank_results, GridResult};
use irnn_core::init::{init_recurrent, InitScheme};
use irnn_core::ndcore::{identity, l2_norm, Rng};
use irnn_core::network::{forward, CellKind, HeadKind, ModelSpec, Params, SequenceBatch, Targets};
use irnn_core::optim::{clip_gradients, sgd_step};
use irnn_core::tasks::{
    adding_from_bytes, adding_to_bytes, gen_adding, make_permutation, to_sequence_batch, MnistSeqDataset,
};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    let head = prop_oneof![Just(HeadKind::Regression), (2usize..5).prop_map(HeadKind::Softmax)];
    let act = prop_oneof![Just(Activation::Relu), Just(Activation::Tanh), Just(Activation::Linear)];
    (1usize..6, 1usize..4, head, prop::option::of(act), -2.0f64..20.0).prop_map(|(h, d, head, act, fb)| match act {
        Some(a) => ModelSpec {
            cell: CellKind::Rnn(a),
            ..ModelSpec::irnn(h, d, head)
        },
        None => ModelSpec::lstm(h, d, head, fb),
    })
}

fn random_grads(spec: &ModelSpec, rng: &mut Rng, scale: f64) -> Params {
    let mut g = Params::init(spec, rng).unwrap();
    for b in g.blocks_mut() {
        b.iter_mut().for_each(|x| *x = rng.normal(0.0, scale));
    }
    g
}

fn norm(p: &Params) -> f64 {
    l2_norm(p.blocks())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_targets_resum_exactly(t in 2usize..60, n in 1usize..40, seed in any::<u64>()) {
        let ds = gen_adding(t, n, &mut Rng::new(seed)).unwrap();
        for ex in &ds.examples {
            let (i, j) = ex.marked().unwrap();
            prop_assert_ne!(i, j);
            prop_assert_eq!(ex.mask.iter().filter(|&&m| m == 1.0).count(), 2);
            prop_assert_eq!((ex.signal[i] + ex.signal[j]).to_bits(), ex.target.to_bits());
        }
    }

    #[test]
    fn adding_files_are_reproducible_and_round_trip(t in 2usize..40, n in 0usize..30, seed in any::<u64>()) {
        let a = adding_to_bytes(&gen_adding(t, n, &mut Rng::new(seed)).unwrap());
        let b = adding_to_bytes(&gen_adding(t, n, &mut Rng::new(seed)).unwrap());
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(adding_to_bytes(&adding_from_bytes(&a).unwrap()), a);
    }

    #[test]
    fn mnist_labels_stay_aligned(
        n in 1usize..12,
        side in prop::sample::select(vec![None, Some(14usize), Some(7), Some(4)]),
        perm_seed in prop::option::of(any::<u64>()),
        pick_seed in any::<u64>(),
    ) {
        // Constant images whose value encodes the label survive pooling and
        // permutation unchanged.
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        let images = labels.iter().flat_map(|&l| std::iter::repeat_n(l * 25, 784)).collect();
        let ds = MnistSeqDataset { rows: 28, cols: 28, images, labels: labels.clone() };
        let steps = side.map_or(784, |s| s * s);
        let perm = perm_seed.map(|s| make_permutation(steps, s));
        let mut idx: Vec<usize> = (0..n).collect();
        Rng::new(pick_seed).shuffle(&mut idx);
        let batch = to_sequence_batch(&ds, &idx, perm.as_deref(), side).unwrap();
        let Targets::Classes(classes) = &batch.targets else { panic!("expected class targets") };
        for (lane, &i) in idx.iter().enumerate() {
            prop_assert_eq!(classes[lane], labels[i] as usize);
            let want = f64::from(labels[i] * 25) / 255.0;
            for t in 0..steps {
                prop_assert_eq!(batch.input(t, lane)[0], want);
            }
        }
    }

    #[test]
    fn scaled_identity_is_scaled_identity(h in 1usize..12, s in 1e-6f64..10.0) {
        let w = init_recurrent(InitScheme::ScaledIdentity(s), h, &mut Rng::new(0)).unwrap();
        prop_assert_eq!(w, identity(h).unwrap().scale(s));
    }

    #[test]
    fn clipping_keeps_direction_and_is_idempotent(spec in spec_strategy(), seed in any::<u64>(), scale in 1e-3f64..1e3, gc in 1e-2f64..1e2) {
        let g = random_grads(&spec, &mut Rng::new(seed), scale);
        let (c, n) = clip_gradients(g.clone(), gc).unwrap();
        prop_assert_eq!(n, norm(&g));
        let dot: f64 = g.blocks().iter().zip(c.blocks()).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y)).sum();
        let cos = dot / (norm(&g) * norm(&c));
        prop_assert!((cos - 1.0).abs() < 1e-12, "cosine {cos}");
        let (cc, _) = clip_gradients(c.clone(), gc).unwrap();
        prop_assert_eq!(cc, c);
    }

    #[test]
    fn zero_gradient_sgd_is_identity(spec in spec_strategy(), seed in any::<u64>(), lr in 1e-9f64..1.0) {
        let mut p = Params::init(&spec, &mut Rng::new(seed)).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &before.zeros_like(), lr).unwrap();
        prop_assert_eq!(p, before);
    }

    #[test]
    fn losses_are_nonnegative_and_deterministic(spec in spec_strategy(), seed in any::<u64>(), t in 1usize..12, lanes in 1usize..4) {
        let mut rng = Rng::new(seed);
        let mut params = Params::init(&spec, &mut rng).unwrap();
        for b in params.blocks_mut() {
            b.iter_mut().for_each(|x| *x = rng.normal(0.0, 0.5));
        }
        let inputs = (0..t * lanes * spec.input_dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let targets = match spec.head {
            HeadKind::Regression => Targets::Regression((0..lanes).map(|_| rng.normal(0.0, 1.0)).collect()),
            HeadKind::Softmax(k) => Targets::Classes((0..lanes).map(|_| rng.below(k)).collect()),
        };
        let batch = SequenceBatch::new(t, lanes, spec.input_dim, inputs, targets).unwrap();
        let a = forward(&spec, &params, &batch).unwrap().loss;
        let b = forward(&spec, &params, &batch).unwrap().loss;
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn ranking_is_a_permutation_and_diverged_runs_rank_last(
        cells in prop::collection::btree_map((0u8..4, 0u8..4), (prop::option::of(0.0f64..1.0), any::<bool>()), 0..16),
    ) {
        // Grid cells are unique by (lr, gc).
        let mut results: Vec<GridResult> = cells
            .iter()
            .map(|(&(lr, gc), &(loss, diverged))| GridResult {
                lr: 10f64.powi(-i32::from(lr)),
                gc: 10f64.powi(i32::from(gc)),
                fb: None,
                final_test_loss: loss,
                task_metric: None,
                diverged,
                metrics_path: None,
                seed: 0,
            })
            .collect();
        let mut ranked = results.clone();
        rank_results(&mut ranked);
        let key = |r: &GridResult| (r.lr.to_bits(), r.gc.to_bits(), r.final_test_loss.map(f64::to_bits), r.diverged);
        let mut a: Vec<_> = results.iter().map(key).collect();
        let mut b: Vec<_> = ranked.iter().map(key).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        if let Some(first_div) = ranked.iter().position(|r| r.diverged) {
            prop_assert!(ranked[first_div..].iter().all(|r| r.diverged));
        }
        results.reverse();
        rank_results(&mut results);
        prop_assert_eq!(results.iter().map(key).collect::<Vec<_>>(), ranked.iter().map(key).collect::<Vec<_>>());
    }
}
