use oqc_core::complement::{ComplementConfig, GateArity, InnerProductScope, VariantKind};
use oqc_core::hosts::HostKind;
use oqc_core::tensor::{Graph, Tensor};
use oqc_core::train::data::SyntheticDatasetSpec;
use oqc_core::train::runner::batch_grads;
use oqc_core::verify::{self, COMPOSED_TOL, PRIMITIVE_TOL};
use oqc_core::vit::{BackboneConfig, FfnVariant, VitModel};
use proptest::prelude::*;

fn tiny(host: HostKind, kind: Option<VariantKind>, pr: bool) -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        width: 8,
        heads: 2,
        patch: 2,
        image_size: 4,
        in_channels: 3,
        n_classes: 3,
        ffn: FfnVariant {
            host,
            complement: kind.map(|kind| ComplementConfig {
                kind,
                rank: 3,
                scope: InnerProductScope::PerToken,
                gate_arity: GateArity::PerToken,
            }),
        },
        use_pr_readout: pr,
    }
}

fn data() -> oqc_core::train::data::Split {
    SyntheticDatasetSpec {
        n_classes: 3,
        samples_per_class: 2,
        test_per_class: 1,
        cell: 2,
        dictionary: 4,
        correlation: 0.8,
        noise: 0.1,
        seed: 3,
    }
    .generate(4)
    .unwrap()
    .train
}

/// Whole-model check: every parameter tensor of a tiny ViT, through attention,
/// both hosts and the complement, against central differences of the batch loss.
fn model_gradcheck(cfg: BackboneConfig) {
    let split = data();
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut model = VitModel::<f64>::init(cfg, 11).unwrap();
    verify::randomize(&mut model, 5);
    let (grads, _) = batch_grads(&model, &split, &idx, 4).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).value.numel();
        let name = model.params.get(id).name.clone();
        // A few coordinates per tensor keeps the test quick.
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in (0..n).step_by((n / 3).max(1)) {
            let x0 = model.params.get(id).value.data()[j];
            model.params.get_mut(id).value.data_mut()[j] = x0 + h;
            let fp = batch_grads(&model, &split, &idx, 4).unwrap().1;
            model.params.get_mut(id).value.data_mut()[j] = x0 - h;
            let fm = batch_grads(&model, &split, &idx, 4).unwrap().1;
            model.params.get_mut(id).value.data_mut()[j] = x0;
            analytic.push(grads.get(id)[j]);
            numeric.push((fp - fm) / (2.0 * h));
        }
        let err = oqc_core::gradcheck::relative_error(&analytic, &numeric);
        let scale = analytic.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-5 || scale < 1e-9, "{}: {name} rel err {err:e}", cfg.ffn.label());
    }
}

#[test]
fn full_model_gradients_mlp_host() {
    model_gradcheck(tiny(HostKind::Mlp, None, false));
}

#[test]
fn full_model_gradients_bilinear_host_with_pr() {
    model_gradcheck(tiny(HostKind::Bilinear { groups: 2 }, None, true));
}

#[test]
fn full_model_gradients_every_complement() {
    for kind in VariantKind::ALL {
        model_gradcheck(tiny(HostKind::Mlp, Some(kind), false));
    }
}

#[test]
fn gradient_suites_pass_with_few_cases() {
    for r in verify::gradient_suites(5) {
        assert!(r.passed, "{}", r.line());
        let tol = if r.name.starts_with("grad/composed") { COMPOSED_TOL } else { PRIMITIVE_TOL };
        assert!(r.worst < tol, "{}", r.line());
    }
}

#[test]
fn backward_is_deterministic() {
    let split = data();
    let idx: Vec<usize> = (0..split.len()).collect();
    let model = VitModel::<f64>::init(tiny(HostKind::Mlp, Some(VariantKind::DynamicGate), false), 2).unwrap();
    let (a, la) = batch_grads(&model, &split, &idx, 2).unwrap();
    let (b, lb) = batch_grads(&model, &split, &idx, 2).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    for id in model.params.ids() {
        assert_eq!(a.get(id), b.get(id));
    }
}

#[test]
fn thread_count_does_not_change_gradients() {
    let split = data();
    let idx: Vec<usize> = (0..split.len()).collect();
    let model = VitModel::<f32>::init(tiny(HostKind::Mlp, Some(VariantKind::LowRank), false), 4).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| batch_grads(&model, &split, &idx, 2).unwrap())
    };
    let (a, la) = run(1);
    let (b, lb) = run(3);
    assert_eq!(la.to_bits(), lb.to_bits());
    for id in model.params.ids() {
        assert_eq!(a.get(id), b.get(id));
    }
}

#[test]
fn shard_size_changes_only_rounding() {
    let split = data();
    let idx: Vec<usize> = (0..split.len()).collect();
    let model = VitModel::<f64>::init(tiny(HostKind::Mlp, Some(VariantKind::Full), false), 4).unwrap();
    let (a, la) = batch_grads(&model, &split, &idx, 1).unwrap();
    let (b, lb) = batch_grads(&model, &split, &idx, 6).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for id in model.params.ids() {
        for (x, y) in a.get(id).iter().zip(b.get(id)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn rms(g: &mut Graph<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let d = x.shape()[1];
    let xv = g.input(x.clone());
    let gain = g.input(Tensor::full([d], 1.0));
    let y = g.rmsnorm(xv, gain, 1e-12).unwrap();
    g.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmsnorm_is_scale_invariant(
        data in prop::collection::vec(-3.0f64..3.0, 12),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(data.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let x = Tensor::new([3, 4], data.clone()).unwrap();
        let xs = Tensor::new([3, 4], data.iter().map(|v| v * scale).collect()).unwrap();
        let mut g = Graph::new();
        let a = rms(&mut g, &x);
        let b = rms(&mut g, &xs);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn rmsnorm_rows_have_unit_rms(data in prop::collection::vec(-5.0f64..5.0, 16)) {
        let x = Tensor::new([4, 4], data).unwrap();
        let mut g = Graph::new();
        let y = rms(&mut g, &x);
        for (row, src) in y.data().chunks(4).zip(x.data().chunks(4)) {
            let ms_src = src.iter().map(|v| v * v).sum::<f64>() / 4.0;
            if ms_src > 1e-6 {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
                prop_assert!((ms - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orthogonalized_feature_is_orthogonal(
        q in prop::collection::vec(-2.0f64..2.0, 15),
        m in prop::collection::vec(-2.0f64..2.0, 15),
    ) {
        prop_assume!(m.chunks(5).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2));
        let mut g = Graph::<f64>::new();
        let qv = g.input(Tensor::new([3, 5], q).unwrap());
        let mv = g.input(Tensor::new([3, 5], m.clone()).unwrap());
        let gain = g.input(Tensor::full([5], 1.0));
        let o = oqc_core::complement::orthogonalize(&mut g, qv, mv, 0.0, gain, InnerProductScope::PerToken, 3).unwrap();
        let res = g.value(o.residual).clone();
        for (r, mm) in res.data().chunks(5).zip(m.chunks(5)) {
            let dot: f64 = r.iter().zip(mm).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-12, "{dot:e}");
        }
    }
}
