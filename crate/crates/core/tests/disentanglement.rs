mod support;

use support::witness::{bundle, perturb, setup, stacks_bit_equal};
use synqt::blocks::{kem_forward, qsm_forward, QuerySource, SynqtConfig};
use synqt::head::DropMask;
use synqt::model::Variant;
use synqt::optim::{adamw_step, AdamState};
use synqt::params::Params;
use synqt::{Rng, Tape, Tensor};

#[test]
fn feature_stack_is_identical_with_and_without_synqt() {
    let s = setup(Variant::default());
    let plain = s.backbone.forward_collect(&Tape::new(), &s.image).unwrap();
    let before = s.backbone.to_checkpoint().to_bytes().1;

    let tape = Tape::new();
    let watched = s.model.watched(&tape);
    let attached = s.backbone.forward_collect(&tape, &s.image).unwrap();
    let mask = DropMask::keep_all(4);
    let loss = watched
        .loss(&tape, &s.backbone, &attached, 3, &mask)
        .unwrap();
    let grads = tape.backward(&loss).unwrap();

    assert!(stacks_bit_equal(&plain, &attached));
    assert!(attached.inputs.iter().all(|t| !t.requires_grad()));

    let mut model = s.model.clone();
    let mut state = AdamState::new(&model);
    adamw_step(
        &mut model,
        &watched.collect_grads(&grads),
        &mut state,
        1e-2,
        1e-4,
    )
    .unwrap();
    assert_eq!(s.backbone.to_checkpoint().to_bytes().1, before);
    let again = s.backbone.forward_collect(&Tape::new(), &s.image).unwrap();
    assert!(stacks_bit_equal(&plain, &again));
}

#[test]
fn gradients_never_reach_the_backbone() {
    for name in ["synqt", "no_last_output", "kem", "independent_projection"] {
        let s = setup(Variant::arm(name).unwrap());
        let tape = Tape::new();
        let watched = s.model.watched(&tape);
        let features = s.backbone.forward_collect(&tape, &s.image).unwrap();
        let loss = watched
            .loss(&tape, &s.backbone, &features, 1, &DropMask::keep_all(4))
            .unwrap();
        let grads = tape.backward(&loss).unwrap();

        let backbone_entries = s
            .backbone
            .weights()
            .named()
            .into_iter()
            .filter(|(_, t)| t.requires_grad() || grads.get(t).is_some())
            .count();
        assert_eq!(backbone_entries, 0, "{name}");

        let owned = watched
            .named()
            .iter()
            .filter(|(_, t)| grads.get(t).is_some())
            .count();
        assert_eq!(
            owned,
            grads.len(),
            "{name}: every gradient belongs to a trainable tensor"
        );
        assert_eq!(
            owned,
            watched.named().len(),
            "{name}: every trainable tensor is reached"
        );
    }
}

#[test]
fn unchained_queries_ignore_every_backbone_feature() {
    let s = setup(Variant::arm("no_last_output").unwrap());
    let stack = s.backbone.forward_collect(&Tape::new(), &s.image).unwrap();
    let base = bundle(&s, &stack);
    for j in 0..4 {
        let moved = bundle(&s, &perturb(&s.backbone, &stack, j));
        for (a, b) in base.queries.iter().zip(&moved.queries) {
            assert!(a.bit_eq(b), "X_{j} reached a synthesized query");
        }
    }
}

#[test]
fn chained_queries_see_features_only_through_previous_outputs() {
    let s = setup(Variant::default());
    let QuerySource::Synthesized { qsm, .. } = &s.model.queries else {
        panic!("default variant synthesizes queries")
    };
    let stack = s.backbone.forward_collect(&Tape::new(), &s.image).unwrap();
    let base = bundle(&s, &stack);
    for j in 0..4 {
        let moved = bundle(&s, &perturb(&s.backbone, &stack, j));
        for i in 0..4 {
            // Ĥ_i is a function of H̄_{i-1} alone.
            let prev = if i == 0 {
                Tensor::zeros(&[4, 32])
            } else {
                moved.blocks[i - 1].h.clone()
            };
            let direct = qsm_forward(&Tape::new(), &qsm[i], &prev, &s.model.config).unwrap();
            assert!(direct.bit_eq(&moved.queries[i]));
            if i <= j {
                assert!(
                    base.queries[i].bit_eq(&moved.queries[i]),
                    "Ĥ_{i} moved with X_{j}"
                );
            }
            let same = [
                &base.blocks[i].h,
                &base.blocks[i].f_att,
                &base.blocks[i].f_ffn,
            ]
            .iter()
            .zip([
                &moved.blocks[i].h,
                &moved.blocks[i].f_att,
                &moved.blocks[i].f_ffn,
            ])
            .all(|(a, b)| a.bit_eq(b));
            assert_eq!(same, i < j, "bundle entry {i} after perturbing X_{j}");
        }
    }
}

#[test]
fn zero_scales_reduce_synthesis_to_the_input_bottleneck() {
    let s = setup(Variant::default());
    let QuerySource::Synthesized { qsm, .. } = &s.model.queries else {
        unreachable!()
    };
    let cfg = SynqtConfig {
        s_attn: 0.0,
        s_ffn: 0.0,
        ..s.model.config
    };
    let tape = Tape::new();
    let prev = Tensor::randn(&[4, 32], 1.0, &mut Rng::new(1));
    let out = qsm_forward(&tape, &qsm[2], &prev, &cfg).unwrap();
    let u = tape.add(&prev, qsm[2].prompt.as_ref().unwrap()).unwrap();
    let expect = qsm[2].input.forward(&tape, &u, false).unwrap();
    assert!(out.bit_eq(&expect));
}

#[test]
fn extraction_is_invariant_to_key_token_order() {
    let s = setup(Variant::default());
    let stack = s.backbone.forward_collect(&Tape::new(), &s.image).unwrap();
    let x = &stack.inputs[1];
    let (m, d) = x.dims2();
    let mut order: Vec<usize> = (0..m).collect();
    Rng::new(3).shuffle(&mut order);
    let rows: Vec<&[f64]> = order.iter().map(|&r| x.row(r)).collect();
    let shuffled = Tensor::from_rows(&rows).unwrap();
    assert_eq!(shuffled.shape(), &[m, d]);
    let q = Tensor::randn(&[4, d], 1.0, &mut Rng::new(4));
    let view = s.backbone.kem_view(1).unwrap();
    let a = kem_forward(&Tape::new(), view, &q, x).unwrap();
    let b = kem_forward(&Tape::new(), view, &q, &shuffled).unwrap();
    assert!(a.h.max_abs_diff(&b.h) < 1e-12);
    assert!(a.f_att.max_abs_diff(&b.f_att) < 1e-12);
    assert!(a.f_ffn.max_abs_diff(&b.f_ffn) < 1e-12);
}

#[test]
fn cached_keys_match_recomputed_extraction() {
    let s = setup(Variant::default());
    let stack = s.backbone.forward_collect(&Tape::new(), &s.image).unwrap();
    let base = bundle(&s, &stack);
    for i in 0..4 {
        let fresh = kem_forward(
            &Tape::new(),
            s.backbone.kem_view(i).unwrap(),
            &base.queries[i],
            &stack.inputs[i],
        )
        .unwrap();
        assert!(fresh.h.max_abs_diff(&base.blocks[i].h) < 1e-13);
    }
}

#[test]
fn last_output_switch_changes_the_features() {
    let chained = setup(Variant::default());
    let mut unchained = setup(Variant::arm("no_last_output").unwrap());
    unchained.model.queries = chained.model.queries.clone();
    if let QuerySource::Synthesized { chain, .. } = &mut unchained.model.queries {
        *chain = false;
    }
    let stack = chained
        .backbone
        .forward_collect(&Tape::new(), &chained.image)
        .unwrap();
    let a = bundle(&chained, &stack);
    let b = bundle(&unchained, &stack);
    assert!(a.queries[0].bit_eq(&b.queries[0]));
    assert!(a.blocks[3].h.max_abs_diff(&b.blocks[3].h) > 0.0);
}
