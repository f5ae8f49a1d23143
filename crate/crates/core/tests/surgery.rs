use std::collections::{BTreeMap, BTreeSet};

use proctrain::model::{group_of, init_random, init_tensor, Checkpoint, ComponentGroup, ModelConfig};
use proctrain::surgery::*;
use proctrain::tensor::Tensor;
use proctrain::Error;
use proptest::prelude::*;

use ComponentGroup::{Attention, Embedding, Mlp};

fn donors(pairs: &[(&str, &Checkpoint)]) -> BTreeMap<String, Checkpoint> {
    pairs.iter().map(|(n, c)| (n.to_string(), (*c).clone())).collect()
}

fn cfg() -> ModelConfig {
    ModelConfig::small(16, 12)
}

#[test]
fn group_mapping() {
    assert_eq!(group_of("layer.0.attn.wq").unwrap(), Attention);
    assert_eq!(group_of("layer.1.mlp.w1").unwrap(), Mlp);
    assert_eq!(group_of("embed.pos").unwrap(), Embedding);
    assert_eq!(group_of("layer.0.ln1.g").unwrap(), Attention);
    assert_eq!(group_of("layer.0.ln2.g").unwrap(), Mlp);
    assert_eq!(group_of("final_ln.b").unwrap(), Embedding);
    assert!(group_of("layer.0.conv").is_err());
}

#[test]
fn full_transfer_is_identity() {
    let d = init_random(&cfg(), 11).unwrap();
    let out = build_init(&TransferPlan::full("d", EmbeddingPolicy::Copy, 3), &donors(&[("d", &d)]), &cfg()).unwrap();
    assert!(out.bit_eq(&d));
    assert!(out.provenance.contains("plan_digest="));
}

#[test]
fn attention_only_copies_exactly_the_attention_group() {
    let d = init_random(&cfg(), 11).unwrap();
    let plan = TransferPlan::attention_only("d", 5);
    let out = build_init(&plan, &donors(&[("d", &d)]), &cfg()).unwrap();
    let fresh = init_random(&cfg(), 5).unwrap();
    let mut copied = BTreeSet::new();
    for (name, t) in out.tensors() {
        // Constant-initialised tensors (norm gains, biases) agree across sources.
        let (dt, ft) = (d.tensor(name).unwrap(), fresh.tensor(name).unwrap());
        if dt.bit_eq(ft) {
            assert!(t.bit_eq(dt));
        } else if t.bit_eq(dt) {
            copied.insert(name.clone());
        } else {
            assert!(t.bit_eq(fresh.tensor(name).unwrap()), "{name} from neither source");
        }
    }
    let expected: BTreeSet<String> = out
        .names()
        .filter(|n| !d.tensor(n).unwrap().bit_eq(fresh.tensor(n).unwrap()))
        .filter(|n| {
            (0..2).any(|l| n.starts_with(&format!("layer.{l}.ln1.")) || n.starts_with(&format!("layer.{l}.attn.")))
        })
        .map(str::to_string)
        .collect();
    assert_eq!(copied, expected);
}

#[test]
fn composition_provenance_audit() {
    let a = init_random(&cfg(), 21).unwrap();
    let f = init_random(&cfg(), 22).unwrap();
    let plan = TransferPlan::compose("set", "eca", 9);
    let out = build_init(&plan, &donors(&[("set", &a), ("eca", &f)]), &cfg()).unwrap();
    let fresh = init_random(&cfg(), 9).unwrap();
    for (name, t) in out.tensors() {
        let source = match group_of(name).unwrap() {
            Attention => &a,
            Mlp => &f,
            Embedding => &fresh,
        };
        assert!(t.bit_eq(source.tensor(name).unwrap()), "{name}");
        for other in [&a, &f, &fresh] {
            if !std::ptr::eq(other, source) {
                assert!(!t.bit_eq(other.tensor(name).unwrap()) || t.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }
    assert!(out.provenance.contains(&plan.digest()));
    assert!(out.provenance.contains("\"set\""));
}

#[test]
fn missing_donor_and_shape_errors() {
    let plan = TransferPlan::attention_only("nope", 0);
    assert!(matches!(build_init(&plan, &BTreeMap::new(), &cfg()), Err(Error::MissingDonor(_))));
    let wide = init_random(&ModelConfig::token(2, 4, 32, 16, 12), 0).unwrap();
    let err = build_init(&TransferPlan::attention_only("w", 0), &donors(&[("w", &wide)]), &cfg()).unwrap_err();
    assert!(matches!(err, Error::TransferShape { .. }), "{err}");
}

#[test]
fn average_reset_examples() {
    let target = ModelConfig::token(1, 1, 2, 4, 3);
    let mut d = init_random(&ModelConfig::token(1, 1, 2, 4, 2), 0).unwrap();
    d.set_tensor("embed.tok", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
    let out: BTreeMap<_, _> = average_embedding_reset(&d, &target, None).unwrap().into_iter().collect();
    let tok = &out["embed.tok"];
    assert_eq!(tok.shape(), &[3, 2]);
    assert!(tok.data().iter().all(|&v| v == 0.5));
    let w = &out["unembed.w"];
    for r in 0..2 {
        let row = w.row(r);
        assert!(row.iter().all(|&v| v == row[0]));
    }

    let mut same = d.clone();
    same.set_tensor("embed.tok", Tensor::from_rows(&[vec![0.3, -0.7], vec![0.3, -0.7]])).unwrap();
    let out = average_embedding_reset(&same, &target, None).unwrap();
    assert!(out[0].1.data().chunks(2).all(|r| r == [0.3, -0.7]));
}

#[test]
fn average_reset_plan_leaves_positions_to_positional_rule() {
    let donor_cfg = ModelConfig::small(32, 30);
    let d = init_random(&donor_cfg, 4).unwrap();
    let plan = TransferPlan::full("d", EmbeddingPolicy::AverageReset, 8);
    let out = build_init(&plan, &donors(&[("d", &d)]), &cfg()).unwrap();
    let pos = out.tensor("embed.pos").unwrap();
    assert_eq!(pos.data(), &d.tensor("embed.pos").unwrap().data()[..16 * 16]);
    let tok = out.tensor("embed.tok").unwrap();
    for c in 0..16 {
        let col: Vec<f32> = (0..12).map(|r| tok.row(r)[c]).collect();
        assert!(col.iter().all(|&v| v == col[0]), "non-zero variance in dim {c}");
    }
}

#[test]
fn binary_donor_average_reset() {
    let eca = ModelConfig::binary(2, 4, 16, 60, 100);
    let d = init_random(&eca, 2).unwrap();
    let plan = TransferPlan::full("eca", EmbeddingPolicy::AverageReset, 1);
    let out = build_init(&plan, &donors(&[("eca", &d)]), &cfg()).unwrap();
    assert!(out.tensor("layer.0.mlp.w1").unwrap().bit_eq(d.tensor("layer.0.mlp.w1").unwrap()));
    let tok = out.tensor("embed.tok").unwrap();
    assert!(tok.data().chunks(16).all(|r| r == tok.row(0)));
    // Donor context 60 covers the target's 16 positions.
    assert_eq!(out.tensor("embed.pos").unwrap().row(3), d.tensor("embed.pos").unwrap().row(3));
    let copy = TransferPlan::full("eca", EmbeddingPolicy::Copy, 1);
    assert!(matches!(build_init(&copy, &donors(&[("eca", &d)]), &cfg()), Err(Error::InvalidPlan(_))));
}

#[test]
fn positional_rule() {
    let long = init_tensor("embed.pos", &[128, 16], 3);
    let t = transfer_positional(&long, 64, 16, 0).unwrap();
    assert_eq!(t.data(), &long.data()[..64 * 16]);
    let short = init_tensor("embed.pos", &[20, 16], 3);
    let t = transfer_positional(&short, 64, 16, 5).unwrap();
    assert!(t.bit_eq(&init_tensor("embed.pos", &[64, 16], 5)));
    let t = transfer_positional(&long, 128, 16, 0).unwrap();
    assert!(t.bit_eq(&long));
    assert!(transfer_positional(&long, 64, 8, 0).is_err());
}

#[test]
fn noise_statistics_and_scope() {
    let c = init_random(&ModelConfig::token(2, 4, 64, 16, 12), 0).unwrap();
    assert!(perturb_noise(&c, 0.0, 1, &BTreeSet::from([Attention])).unwrap().bit_eq(&c));
    let n = perturb_noise(&c, 0.05, 1, &BTreeSet::from([Attention])).unwrap();
    for (name, t) in n.tensors() {
        let orig = c.tensor(name).unwrap();
        if group_of(name).unwrap() == Attention {
            assert!(!t.bit_eq(orig), "{name} unchanged");
        } else {
            assert!(t.bit_eq(orig), "{name} out of scope but changed");
        }
    }
    // layer.0.mlp.w1 under an MLP scope: 64×256 = 16384 elements.
    let m = perturb_noise(&c, 0.1, 2, &BTreeSet::from([Mlp])).unwrap();
    let diff: Vec<f64> = m
        .tensor("layer.0.mlp.w1")
        .unwrap()
        .data()
        .iter()
        .zip(c.tensor("layer.0.mlp.w1").unwrap().data())
        .map(|(a, b)| f64::from(a - b))
        .collect();
    let mean = diff.iter().sum::<f64>() / diff.len() as f64;
    let std = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64).sqrt();
    assert!((std - 0.1).abs() < 0.005, "noise std {std}");
    assert!(perturb_noise(&c, -1.0, 0, &BTreeSet::new()).is_err());
}

#[test]
fn shuffle_examples() {
    let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let mut c = init_random(&ModelConfig::token(1, 1, 2, 2, 2), 0).unwrap();
    c.set_tensor("layer.0.attn.wq", t).unwrap();
    let s = perturb_shuffle(&c, 7, &BTreeSet::from([Attention]));
    let mut v = s.tensor("layer.0.attn.wq").unwrap().data().to_vec();
    v.sort_by(f32::total_cmp);
    assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relative_improvement_anchors() {
    assert_eq!(relative_improvement(0.9, 0.1, 0.9).unwrap(), 1.0);
    assert_eq!(relative_improvement(0.1, 0.1, 0.9).unwrap(), 0.0);
    let r = relative_improvement(17.2, 11.3, 98.9).unwrap();
    assert!((r - 5.9 / 87.6).abs() < 1e-12);
    assert!(matches!(relative_improvement(0.5, 0.3, 0.3), Err(Error::UndefinedScore(_))));
}

#[test]
fn plan_serialisation() {
    let p = TransferPlan::attention_only("identity", 4).with_perturbation(PerturbationSpec {
        kind: PerturbationKind::GaussianNoise { sigma: 0.05 },
        seed: 1,
        scope: None,
    });
    let back: TransferPlan = serde_json::from_str(&p.to_json()).unwrap();
    assert_eq!(back, p);
    assert_eq!(p.label(), "E:fresh A:identity F:fresh noise:0.05");
    assert_ne!(p.digest(), TransferPlan::attention_only("identity", 4).digest());
}

proptest! {
    #[test]
    fn shuffle_preserves_multisets_and_shapes(seed in any::<u64>(), init in 0u64..1000) {
        let c = init_random(&cfg(), init).unwrap();
        let all = BTreeSet::from(ComponentGroup::ALL);
        let s = perturb_shuffle(&c, seed, &all);
        for (name, t) in s.tensors() {
            let orig = c.tensor(name).unwrap();
            prop_assert_eq!(t.shape(), orig.shape());
            let mut a = t.data().to_vec();
            let mut b = orig.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }
        prop_assert!(s.names().eq(c.names()));
    }

    #[test]
    fn noise_is_deterministic(seed in any::<u64>(), sigma in 0.0f32..0.2) {
        let c = init_random(&cfg(), 1).unwrap();
        let scope = BTreeSet::from([Mlp]);
        let a = perturb_noise(&c, sigma, seed, &scope).unwrap();
        let b = perturb_noise(&c, sigma, seed, &scope).unwrap();
        prop_assert!(a.bit_eq(&b));
    }
}
