use proptest::prelude::*;

use super::*;
use crate::data::{generate_scene, make_example, ConditionSet, DataConfig, Example, ModalityKind, SceneKnobs};
use crate::error::Error;
use crate::numerics::{grad_check, Graph, ParamStore, RngState, Tensor};

fn small_knobs() -> SceneKnobs {
    SceneKnobs { height: 4, width: 4, palette: 4, min_objects: 1, max_objects: 3, min_side: 1, max_side: 3 }
}

fn small_config(knobs: &SceneKnobs) -> ModelConfig {
    ModelConfig { d_model: 8, heads: 2, n_enc: 1, n_dec: 2, ff_mult: 2, init_std: 0.3, ..ModelConfig::desk(knobs) }
}

fn example(knobs: &SceneKnobs, seed: u64) -> Example {
    let cfg = DataConfig { knobs: knobs.clone(), ..Default::default() };
    let mut rng = RngState::new(seed);
    let scene = generate_scene(&mut rng, knobs).unwrap();
    make_example(&scene, &ModalityKind::ALL, &mut rng, &cfg).unwrap()
}

fn model64(cfg: &ModelConfig, seed: u64) -> (Mmot, ParamStore<f64>) {
    Mmot::init(cfg, &mut RngState::new(seed)).unwrap()
}

fn logits(model: &Mmot, store: &ParamStore<f64>, tokens: &[usize], conds: &ConditionSet) -> Tensor<f64> {
    let g = Graph::new(store);
    let out = model.forward_logits(&g, tokens, conds, false).unwrap();
    g.value(out.logits)
}

#[test]
fn empty_encoder_stack_is_embedding_plus_position() {
    let knobs = small_knobs();
    let cfg = ModelConfig { n_enc: 0, ..small_config(&knobs) };
    let (model, store) = model64(&cfg, 1);
    let ex = example(&knobs, 2);
    let seq = ex.conditions.get(ModalityKind::Segmentation).unwrap();
    let g = Graph::new(&store);
    let out = g.value(model.encode_modality(&g, seq).unwrap());
    let tok = store.value(store.id("enc.seg.tok").unwrap());
    let pos = store.value(store.id("enc.seg.pos").unwrap());
    for (i, &t) in seq.tokens.iter().enumerate() {
        let expect: Vec<f64> = tok.row(t).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        assert_eq!(out.row(i), expect.as_slice());
    }
}

#[test]
fn text_encodes_to_one_row() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 3);
    let ex = example(&knobs, 4);
    let g = Graph::new(&store);
    let out = model.encode_modality(&g, ex.conditions.get(ModalityKind::Text).unwrap()).unwrap();
    assert_eq!(g.shape(out), vec![1, 8]);
}

#[test]
fn positions_break_permutation_symmetry() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 5);
    let ex = example(&knobs, 6);
    let mut seq = ex.conditions.get(ModalityKind::Segmentation).unwrap().clone();
    seq.tokens[0] = 1;
    seq.tokens[1] = 2;
    let g = Graph::new(&store);
    let a = g.value(model.encode_modality(&g, &seq).unwrap());
    seq.tokens.swap(0, 1);
    let b = g.value(model.encode_modality(&g, &seq).unwrap());
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn out_of_vocabulary_condition_token_is_an_index_error() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 5);
    let mut seq = example(&knobs, 6).conditions.get(ModalityKind::Sketch).unwrap().clone();
    seq.tokens[3] = 99;
    let g = Graph::new(&store);
    assert!(matches!(model.encode_modality(&g, &seq), Err(Error::Index { index: 99, .. })));
}

#[test]
fn all_masked_equals_unconditional_exactly() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 7);
    let ex = example(&knobs, 8);
    let g = Graph::new(&store);
    let (enc, _) = model.encode_conditions(&g, &ex.conditions).unwrap();
    let masked = model.decoder_forward(&g, &ex.image.tokens, &enc, &ModalityMask::none(4), false).unwrap();
    let uncon = logits(&model, &store, &ex.image.tokens, &ConditionSet::empty());
    assert_eq!(g.value(masked.logits), uncon);
    for w in &masked.weights {
        for r in 0..w.weights.rows() {
            assert_eq!(w.weights.row(r), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }
}

#[test]
fn masking_equals_removal_for_every_subset() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 9);
    let ex = example(&knobs, 10);
    assert_eq!(ex.conditions.len(), 4);
    let g = Graph::new(&store);
    let (enc, _) = model.encode_conditions(&g, &ex.conditions).unwrap();
    for bits in 0..16u32 {
        let mask = ModalityMask::from_bits(4, bits);
        let via_mask = g.value(model.decoder_forward(&g, &ex.image.tokens, &enc, &mask, false).unwrap().logits);
        let keep: Vec<ModalityKind> =
            ModalityKind::ALL.iter().zip(&mask.present).filter(|(_, &p)| p).map(|(&k, _)| k).collect();
        let restricted = logits(&model, &store, &ex.image.tokens, &ex.conditions.restrict(&keep));
        assert!(via_mask.max_abs_diff(&restricted) < 1e-5, "subset {bits:04b}");
    }
}

#[test]
fn missing_encoding_for_present_modality_is_contract_error() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 11);
    let g = Graph::new(&store);
    let enc = vec![None; 4];
    let r = model.decoder_forward(&g, &[0, 1], &enc, &ModalityMask::all(4), false);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn single_token_prefix_gives_one_row() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 12);
    let ex = example(&knobs, 13);
    let l = logits(&model, &store, &[3], &ex.conditions);
    assert_eq!(l.shape(), &[1, 4]);
}

#[test]
fn causality_is_bit_exact() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 14);
    let ex = example(&knobs, 15);
    let base = logits(&model, &store, &ex.image.tokens, &ex.conditions);
    let mut rng = RngState::new(16);
    for _ in 0..10 {
        let j = rng.below(16);
        let mut toks = ex.image.tokens.clone();
        toks[j] = (toks[j] + 1 + rng.below(3)) % 4;
        let pert = logits(&model, &store, &toks, &ex.conditions);
        for i in 0..=j {
            assert_eq!(base.row(i), pert.row(i), "row {i} moved when token {j} changed");
        }
    }
}

#[test]
fn combination_weight_rows_are_distributions() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 17);
    let ex = example(&knobs, 18);
    let conds = ex.conditions.restrict(&[ModalityKind::Text, ModalityKind::BBox]);
    let g = Graph::new(&store);
    let out = model.forward_logits(&g, &ex.image.tokens, &conds, false).unwrap();
    assert_eq!(out.weights.len(), 2);
    for w in &out.weights {
        assert_eq!(w.active, vec![true, true, false, false, true]);
        for r in 0..w.weights.rows() {
            let row = w.weights.row(r);
            assert_eq!(row[2], 0.0);
            assert_eq!(row[3], 0.0);
            assert!(row[0] > 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_is_deterministic_and_finite() {
    let knobs = SceneKnobs::default();
    let cfg = ModelConfig::desk(&knobs);
    let (model, store) = Mmot::init::<f32>(&cfg, &mut RngState::new(19)).unwrap();
    let ex = example(&knobs, 20);
    let run = || {
        let g = Graph::new(&store);
        g.value(model.forward_logits(&g, &ex.image.tokens, &ex.conditions, false).unwrap().logits)
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.is_finite());
    assert_eq!(a.shape(), &[64, 6]);
}

#[test]
fn init_loss_is_near_uniform() {
    let knobs = SceneKnobs::default();
    let (model, store) = Mmot::init::<f32>(&ModelConfig::desk(&knobs), &mut RngState::new(21)).unwrap();
    let ex = example(&knobs, 22);
    let g = Graph::new(&store);
    let l = g.scalar(model.nll(&g, &ex.image.tokens, &ex.conditions).unwrap()).unwrap() as f64;
    assert!((l - 6f64.ln()).abs() < 0.3, "{l}");
}

#[test]
fn attention_maps_are_row_stochastic() {
    let knobs = small_knobs();
    let (model, store) = model64(&small_config(&knobs), 23);
    let ex = example(&knobs, 24);
    let g = Graph::new(&store);
    let out = model.forward_logits(&g, &ex.image.tokens, &ex.conditions, true).unwrap();
    let maps = extract_attention_maps(&model, out.trace.as_ref()).unwrap();
    assert_eq!(maps.per_layer.len(), 2);
    for layer in &maps.per_layer {
        for t in layer.iter().flatten() {
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
    let text = maps.averaged[0].as_ref().unwrap();
    assert_eq!(text.shape(), &[16, 1]);
    assert!(text.data().iter().all(|&v| v == 1.0));
    let seg = maps.averaged[1].as_ref().unwrap();
    let l0 = maps.per_layer[0][1].as_ref().unwrap();
    let l1 = maps.per_layer[1][1].as_ref().unwrap();
    for ((&a, &x), &y) in seg.data().iter().zip(l0.data()).zip(l1.data()) {
        assert!((a - (x + y) / 2.0).abs() < 1e-15);
    }
    let plain = model.forward_logits(&g, &ex.image.tokens, &ex.conditions, false).unwrap();
    assert!(matches!(extract_attention_maps(&model, plain.trace.as_ref()), Err(Error::Contract(_))));
}

#[test]
fn full_model_gradient_check() {
    let knobs = small_knobs();
    let cfg = ModelConfig { init_std: 0.1, ..small_config(&knobs) };
    let (model, mut store) = model64(&cfg, 25);
    let ex = example(&knobs, 26);
    let toks = ex.image.tokens[..12].to_vec();
    let report = grad_check(&mut store, 1e-4, |g| model.nll(g, &toks, &ex.conditions)).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn parameter_count_matches_closed_form() {
    let knobs = SceneKnobs::default();
    for (fusion, pulse) in [(Fusion::Mixer, PulseMode::Projected), (Fusion::Mixer, PulseMode::Free), (Fusion::Concat, PulseMode::Projected)] {
        let cfg = ModelConfig { fusion, pulse, ..ModelConfig::desk(&knobs) };
        let (_, store) = Mmot::init::<f32>(&cfg, &mut RngState::new(0)).unwrap();
        assert_eq!(store.numel(), cfg.param_count(), "{fusion:?}/{pulse:?}");
    }
}

#[test]
fn bind_recovers_the_same_layout() {
    let knobs = small_knobs();
    let cfg = small_config(&knobs);
    let (model, store) = model64(&cfg, 27);
    let bound = Mmot::bind(&cfg, &store).unwrap();
    let ex = example(&knobs, 28);
    let g = Graph::new(&store);
    let a = g.value(model.forward_logits(&g, &ex.image.tokens, &ex.conditions, false).unwrap().logits);
    let b = g.value(bound.forward_logits(&g, &ex.image.tokens, &ex.conditions, false).unwrap().logits);
    assert_eq!(a, b);
    let other = ModelConfig { n_dec: 3, ..cfg };
    assert!(Mmot::bind(&other, &store).is_err());
}

fn session_matches_graph<T: crate::numerics::Real>(cfg: &ModelConfig, knobs: &SceneKnobs, tol: f64) {
    let (model, store) = Mmot::init::<T>(cfg, &mut RngState::new(29)).unwrap();
    let ex = example(knobs, 30);
    for conds in [ConditionSet::empty(), ex.conditions.clone(), ex.conditions.only(ModalityKind::Sketch)] {
        let g = Graph::new(&store);
        let full = g.value(model.forward_logits(&g, &ex.image.tokens, &conds, false).unwrap().logits);
        let mut s = DecoderSession::new(&model, &store, &conds).unwrap();
        for (i, &t) in ex.image.tokens.iter().enumerate() {
            for (a, b) in s.logits().iter().zip(full.row(i)) {
                assert!((a.as_f64() - b.as_f64()).abs() < tol, "row {i}: {a} vs {b}");
            }
            s.commit(t).unwrap();
        }
        assert!(s.is_complete());
        assert!(s.commit(0).is_err());
    }
}

#[test]
fn cached_session_matches_uncached_logits() {
    let knobs = small_knobs();
    for (fusion, pulse) in [(Fusion::Mixer, PulseMode::Projected), (Fusion::Mixer, PulseMode::Free), (Fusion::Concat, PulseMode::Projected)] {
        let cfg = ModelConfig { fusion, pulse, ..small_config(&knobs) };
        session_matches_graph::<f64>(&cfg, &knobs, 1e-12);
    }
    let desk = SceneKnobs::default();
    session_matches_graph::<f32>(&ModelConfig::desk(&desk), &desk, 1e-5);
}

#[test]
fn concat_fusion_ignores_absent_modalities() {
    let knobs = small_knobs();
    let cfg = ModelConfig { fusion: Fusion::Concat, ..small_config(&knobs) };
    let (model, store) = model64(&cfg, 31);
    let ex = example(&knobs, 32);
    let g = Graph::new(&store);
    let (enc, _) = model.encode_conditions(&g, &ex.conditions).unwrap();
    let mask = ModalityMask::from_bits(4, 0b0101);
    let a = g.value(model.decoder_forward(&g, &ex.image.tokens, &enc, &mask, false).unwrap().logits);
    let b = logits(&model, &store, &ex.image.tokens, &ex.conditions.restrict(&[ModalityKind::Text, ModalityKind::Sketch]));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mixer_contracts_hold_for_random_configs(seed in 0u64..10_000, bits in 0u32..16, residual in any::<bool>()) {
        let knobs = small_knobs();
        let cfg = ModelConfig { mixer_residual: residual, ..small_config(&knobs) };
        let (model, store) = model64(&cfg, seed);
        let ex = example(&knobs, seed + 1);
        let g = Graph::new(&store);
        let (enc, _) = model.encode_conditions(&g, &ex.conditions).unwrap();
        let mut mask = ModalityMask::from_bits(4, bits);
        for (p, e) in mask.present.iter_mut().zip(&enc) {
            *p &= e.is_some();
        }
        let out = model.decoder_forward(&g, &ex.image.tokens, &enc, &mask, false).unwrap();
        for w in &out.weights {
            for r in 0..w.weights.rows() {
                let row = w.weights.row(r);
                prop_assert!(row[0] > 0.0);
                for (j, &p) in mask.present.iter().enumerate() {
                    if !p {
                        prop_assert_eq!(row[j + 1], 0.0);
                    }
                }
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

