use std::collections::BTreeMap;

use aamulet::network::{
    forward, init_params, layout, xavier_bound, Checkpoint, LevelNodes, Mode, NetBuilder, NetworkConfig, ParamKind,
    ParameterStore, Variant,
};
use aamulet::rng::Rng;
use aamulet::tensor::{grad_check, ConvSpec, Dims, GradCheckReport, Graph, NodeId, Tensor};
use aamulet::{Error, Result};

fn random_input(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(Dims::new(n, 3, h, w), |_, _, _, _| rng.uniform() as f32)
}

/// Graph nodes for every parameter: trainable for names in `train`, constant otherwise.
fn param_nodes<T: aamulet::tensor::Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    train: &[(&str, NodeId)],
) -> BTreeMap<String, NodeId> {
    store
        .iter()
        .map(|(name, p)| {
            let id = match train.iter().find(|(n, _)| *n == name) {
                Some(&(_, id)) => id,
                None => g.constant(p.value.clone()),
            };
            (name.to_string(), id)
        })
        .collect()
}

/// Finite-difference check of `head(levels)` with respect to the named parameters.
fn check_network(
    cfg: &NetworkConfig,
    store: &ParameterStore<f64>,
    names: &[&str],
    x: &Tensor<f64>,
    mode: Mode,
    head: impl Fn(&mut Graph<f64>, &LevelNodes) -> Result<NodeId>,
) -> GradCheckReport {
    let values: Vec<Tensor<f64>> = names.iter().map(|n| store.value(n).unwrap().clone()).collect();
    grad_check(
        |g, ids| {
            let train: Vec<(&str, NodeId)> = names.iter().copied().zip(ids.iter().copied()).collect();
            let map = param_nodes(g, store, &train);
            let xi = g.constant(x.clone());
            let levels = NetBuilder::new(g, &map, store, cfg, mode).run(xi)?;
            head(g, &levels)
        },
        &values,
        1e-4,
    )
    .unwrap()
}

/// Random 1x1 conv to two channels followed by a balanced cross-entropy,
/// as a scalar summary of an arbitrary feature map.
fn probe(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let d = g.dims(x);
    let mut rng = Rng::new(seed);
    let spec = ConvSpec::same(d.c, 2, 1);
    let w = g.constant(Tensor::from_fn(spec.weight_dims(), |_, _, _, _| rng.range(-1.0, 1.0)));
    let y = g.conv2d(x, w, None, &spec)?;
    let target: Vec<u8> = (0..d.n * d.hw()).map(|_| rng.below(2) as u8).collect();
    let betas: Vec<f64> = (0..d.n).map(|_| rng.range(0.2, 0.8)).collect();
    g.balanced_ce(y, &target, &betas)
}

fn sum_probes(g: &mut Graph<f64>, ids: &[NodeId]) -> Result<NodeId> {
    let terms = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| probe(g, id, 100 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms, &vec![1.0; terms.len()])
}

#[test]
fn init_is_deterministic() {
    let c = NetworkConfig::default();
    assert_eq!(init_params(&c, 9).unwrap(), init_params(&c, 9).unwrap());
    assert_ne!(init_params(&c, 9).unwrap(), init_params(&c, 10).unwrap());
}

#[test]
fn xavier_bound_for_3x3_16_to_16() {
    // fan_in = fan_out = 16 * 9
    let bound = (6.0f64 / 288.0).sqrt();
    assert!((bound - 0.144_337_567_297_406_4).abs() < 1e-15);
    assert_eq!(xavier_bound(144, 144), bound);

    let store = init_params(&NetworkConfig::default(), 3).unwrap();
    let w = store.value("bb.1.2.w").unwrap();
    assert_eq!(w.dims(), Dims::new(16, 16, 3, 3));
    assert!(w.data().iter().all(|&v| (v as f64).abs() <= bound));
    // the draws actually use the range
    assert!(w.data().iter().any(|&v| (v as f64).abs() > 0.9 * bound));

    for (_, p) in store.iter() {
        if let ParamKind::Weight { fan_in, fan_out } = p.kind {
            let b = xavier_bound(fan_in, fan_out) as f32;
            assert!(p.value.data().iter().all(|v| v.abs() <= b));
        }
    }
}

#[test]
fn biases_start_at_zero() {
    let c = NetworkConfig::default();
    let store = init_params(&c, 4).unwrap();
    for l in 1..=c.levels {
        for name in [format!("b_a.{l}"), format!("b_s.{l}")] {
            assert!(store.value(&name).unwrap().data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn backbone_taps_follow_strides_and_channels() {
    let c = NetworkConfig::default();
    let store = init_params(&c, 1).unwrap();
    let trace = forward(&random_input(2, 64, 64, 1), &store, &c, Mode::Train).unwrap();
    let sizes: Vec<usize> = (1..=5).map(|l| trace.feature(l).dims().h).collect();
    assert_eq!(sizes, [64, 32, 16, 8, 4]);
    for l in 1..=5 {
        let d = trace.feature(l).dims();
        assert_eq!(d.c, c.backbone_channels[l - 1]);
        assert_eq!(d.w, d.h);
    }
}

#[test]
fn wrong_input_resolution_is_a_shape_error() {
    let c = NetworkConfig::default();
    let store = init_params(&c, 1).unwrap();
    let err = forward(&random_input(1, 32, 32, 1), &store, &c, Mode::Infer).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn every_level_output_has_full_resolution() {
    let base = NetworkConfig::default();
    for v in Variant::ALL {
        let c = v.configure(&base);
        let store = init_params(&c, 2).unwrap();
        let trace = forward(&random_input(2, 64, 64, 2), &store, &c, Mode::Train).unwrap();
        for l in 1..=c.levels {
            assert_eq!(
                trace.aggregated(l).dims(),
                Dims::new(2, c.agg_width, 64, 64),
                "{v} g^{l}"
            );
            assert_eq!(trace.logits(l).dims(), Dims::new(2, 2, 64, 64), "{v} s^{l}");
            if c.attention_enabled {
                assert_eq!(trace.attention(l).unwrap().dims(), Dims::new(2, 1, 64, 64), "{v} a^{l}");
            } else {
                assert!(trace.attention(l).is_none());
            }
        }
        assert_eq!(trace.saliency.dims(), Dims::new(2, 1, 64, 64));
    }
}

#[test]
fn aggregation_channel_arithmetic() {
    let c = NetworkConfig::default();
    let slots = layout(&c);
    let dims = |n: &str| slots.iter().find(|s| s.name == n).unwrap().dims;
    // [upsampled reduction, g^{l+1}, a^{l+1}] = 16 + 16 + 1 channels
    assert_eq!(dims("w_f.1"), Dims::new(16, 33, 3, 3));
    assert!(slots.iter().all(|s| s.name != "w_f.5"));
    assert_eq!(dims("w_a.5"), Dims::new(1, 16, 3, 3));
    assert_eq!(dims("w_a.1"), Dims::new(1, 20, 3, 3));
    assert_eq!(dims("w_s.5"), Dims::new(2, 1, 1, 1));
    assert_eq!(dims("w_s.1"), Dims::new(2, 2, 1, 1));
    assert_eq!(dims("w_u.3"), Dims::new(16, 16, 8, 8));
    assert!(slots.iter().all(|s| s.name != "w_u.1"));
}

#[test]
fn attention_stack_sizes_by_mode() {
    let base = NetworkConfig::default();
    for (v, want) in [
        (Variant::E, [4, 3, 2, 1, 0]),
        (Variant::D, [1, 1, 1, 1, 0]),
        (Variant::C, [0, 1, 1, 1, 1]),
    ] {
        let slots = layout(&v.configure(&base));
        for l in 1..=5 {
            let d = slots.iter().find(|s| s.name == format!("w_a.{l}")).unwrap().dims;
            assert_eq!(d.c, 16 + want[l - 1], "{v} level {l}");
        }
    }
}

#[test]
fn disabled_attention_has_no_attention_parameters() {
    let base = NetworkConfig::default();
    for v in [Variant::A, Variant::B] {
        let store = init_params(&v.configure(&base), 1).unwrap();
        assert!(
            store.names().all(|n| !n.starts_with("w_a.") && !n.starts_with("b_a.")),
            "{v}"
        );
    }
    let a = init_params(&Variant::A.configure(&base), 1).unwrap();
    assert!(a.names().all(|n| !n.starts_with("w_f.")));
}

#[test]
fn aggregation_arity_is_enforced() {
    let c = NetworkConfig::tiny();
    let store = init_params(&c, 1).unwrap();
    let mut g = Graph::new();
    let map = param_nodes(&mut g, &store, &[]);
    let f = g.constant(Tensor::zeros(Dims::new(1, 3, 8, 8)));
    let mut b = NetBuilder::new(&mut g, &map, &store, &c, Mode::Train);
    assert!(matches!(b.aggregate_level(1, f, None, None), Err(Error::Arity(_))));
    let err = b.attention_level(1, f, &[]).unwrap_err();
    assert!(matches!(err, Error::Arity(_)));
    assert!(matches!(b.predict_level(1, f, None, None), Err(Error::Arity(_))));
}

#[test]
fn top_level_aggregation_uses_only_its_feature() {
    let c = NetworkConfig::default();
    let store = init_params(&c, 1).unwrap();
    let mut g = Graph::new();
    let map = param_nodes(&mut g, &store, &[]);
    let f5 = g.constant(random_input(2, 4, 4, 3).map(|v| v * 0.5));
    let f5 = {
        // lift 3 channels to the 64 the top level expects
        let spec = ConvSpec::same(3, 64, 1);
        let w = g.constant(Tensor::full(spec.weight_dims(), 0.1));
        g.conv2d(f5, w, None, &spec).unwrap()
    };
    let mut b = NetBuilder::new(&mut g, &map, &store, &c, Mode::Train);
    let g5 = b.aggregate_level(5, f5, None, None).unwrap();
    assert_eq!(g.dims(g5), Dims::new(2, 16, 64, 64));
    assert!(g.value(g5).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn zero_attention_weights_give_one_half() {
    let c = NetworkConfig::default();
    let mut store = init_params(&c, 1).unwrap();
    for l in 1..=5 {
        for n in [format!("w_a.{l}"), format!("b_a.{l}")] {
            store.get_mut(&n).unwrap().value.data_mut().fill(0.0);
        }
    }
    let trace = forward(&random_input(1, 64, 64, 5), &store, &c, Mode::Train).unwrap();
    for l in 1..=5 {
        assert!(trace.attention(l).unwrap().data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn zero_prediction_weights_give_zero_top_logits() {
    let c = NetworkConfig::default();
    let mut store = init_params(&c, 1).unwrap();
    for n in ["w_s.5", "b_s.5"] {
        store.get_mut(n).unwrap().value.data_mut().fill(0.0);
    }
    let trace = forward(&random_input(1, 64, 64, 6), &store, &c, Mode::Train).unwrap();
    assert!(trace.logits(5).data().iter().all(|&v| v == 0.0));
}

#[test]
fn recursive_prediction_sums_before_the_conv() {
    let c = NetworkConfig::default();
    let mut store = init_params(&c, 1).unwrap();
    // identity 1x1 prediction conv exposes the pre-conv sum
    let eye = Tensor::new(Dims::new(2, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    store.get_mut("w_s.2").unwrap().value = eye;
    let mut g = Graph::new();
    let map = param_nodes(&mut g, &store, &[]);
    let half = g.constant(Tensor::full(Dims::new(1, 1, 64, 64), 0.5));
    let zero = g.constant(Tensor::zeros(Dims::new(1, 2, 64, 64)));
    let mut b = NetBuilder::new(&mut g, &map, &store, &c, Mode::Train);
    let s = b.predict_level(2, half, Some(half), Some(zero)).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 1.0));
}

#[test]
fn saliency_is_softmax_foreground_of_finest_logits() {
    let c = NetworkConfig::default();
    let store = init_params(&c, 7).unwrap();
    let trace = forward(&random_input(2, 64, 64, 7), &store, &c, Mode::Infer).unwrap();
    let s1 = trace.logits(1);
    for n in 0..2 {
        for y in 0..64 {
            for x in 0..64 {
                let want = 1.0 / (1.0 + ((s1.at(n, 0, y, x) - s1.at(n, 1, y, x)) as f64).exp());
                assert!((trace.saliency.at(n, 0, y, x) as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn random_network_output_is_finite_and_in_range() {
    let c = NetworkConfig::default();
    for seed in 0..8 {
        let store = init_params(&c, seed).unwrap();
        let trace = forward(&random_input(2, 64, 64, seed), &store, &c, Mode::Infer).unwrap();
        assert!(trace.saliency.is_finite());
        assert!(trace.saliency.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for l in 1..=5 {
            assert!(trace.attention(l).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn inference_is_bit_deterministic() {
    let c = NetworkConfig::default();
    let store = init_params(&c, 12).unwrap();
    let x = random_input(1, 64, 64, 12);
    let a = forward(&x, &store, &c, Mode::Infer).unwrap().saliency;
    let b = forward(&x, &store, &c, Mode::Infer).unwrap().saliency;
    assert_eq!(a.data(), b.data());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = NetworkConfig::default();
    let mut store = init_params(&c, 13).unwrap();
    let mut rng = Rng::new(13);
    for (_, p) in store.iter_mut() {
        p.momentum
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.range(-1.0, 1.0) as f32);
    }
    store.buffer_mut("agg.1.var").unwrap().data_mut()[3] = 1.0e-30;
    let mut ckpt = Checkpoint::new(c, store);
    ckpt.extra.insert("note".into(), Tensor::scalar(f32::MIN_POSITIVE));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    for (name, p) in ckpt.params.iter() {
        let q = back.params.get(name).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value));
        assert_eq!(bits(&p.momentum), bits(&q.momentum));
    }
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_rejects_mismatched_parameters() {
    let c = NetworkConfig::tiny();
    let mut ckpt = Checkpoint::new(c.clone(), init_params(&c, 1).unwrap());
    ckpt.config.agg_width = 5;
    let bytes = ckpt.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let c = NetworkConfig::tiny();
    let store = init_params(&c, 20).unwrap().cast::<f64>();
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("bb."))
        .map(String::from)
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let x = random_input(2, 8, 8, 20).cast::<f64>();
    let report = check_network(&c, &store, &names, &x, Mode::Train, |g, lv| sum_probes(g, &lv.features));
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn recursion_carries_gradient_to_top_prediction_weights() {
    let c = NetworkConfig::tiny();
    let store = init_params(&c, 22).unwrap().cast::<f64>();
    let x = random_input(2, 8, 8, 22).cast::<f64>();
    let report = check_network(&c, &store, &["w_s.2"], &x, Mode::Train, |g, lv| {
        probe(g, lv.logits[0], 5)
    });
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    // the analytic gradient itself is nonzero
    let mut g = Graph::new();
    let ws = g.param(store.value("w_s.2").unwrap().clone());
    let map = param_nodes(&mut g, &store, &[("w_s.2", ws)]);
    let xi = g.constant(x);
    let lv = NetBuilder::new(&mut g, &map, &store, &c, Mode::Train).run(xi).unwrap();
    let out = probe(&mut g, lv.logits[0], 5).unwrap();
    g.backward(out).unwrap();
    assert!(g.grad(ws).unwrap().iter().any(|v| v.abs() > 1e-8));
}

#[test]
fn all_variants_pass_gradient_check_on_tiny_config() {
    for v in [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E] {
        let c = v.configure(&NetworkConfig::tiny());
        let store = init_params(&c, 23).unwrap().cast::<f64>();
        let names: Vec<String> = store.names().map(String::from).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let x = random_input(2, 8, 8, 23).cast::<f64>();
        let report = check_network(&c, &store, &names, &x, Mode::Train, |g, lv| sum_probes(g, &lv.logits));
        assert!(report.max_rel_error < 1e-4, "{v}: {report:?}");
    }
}
