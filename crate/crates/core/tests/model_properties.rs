mod common;

use codec_lm::ar::{ArModel, ArSequence};
use codec_lm::audio::Waveform;
use codec_lm::codec::{CodeMatrix, CodecConfig};
use codec_lm::lm::{ParamStore, SamplingSpec};
use codec_lm::nar::{NarInput, NarModel};
use codec_lm::pipeline::{synthesize, PromptMode, PromptSpec, Trained};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn future_tokens_never_change_earlier_logits() {
    let cfg = common::toy_model(16, 3);
    let (ar, store) = ArModel::init(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..100 {
        if let Err(e) = common::causality_trial(&ar, &store, &mut rng) {
            panic!("trial {trial}: {e}");
        }
    }
}

#[test]
fn ar_output_projection_is_the_acoustic_table() {
    let cfg = common::toy_model(16, 3);
    let (ar, store) = ArModel::init(cfg, 0).unwrap();
    let (d, k) = (cfg.embed_dim, cfg.codebook_size);
    assert_eq!(store.num_scalars(), common::tied_ar_count(&cfg));
    // an untied head would add another (K + 1) × d block
    let table = store.get(ar.acoustic_emb);
    assert_eq!((table.rows, table.cols), (k + 1, d));
    let seq = ArSequence::new(vec![3, 4], vec![1, 2, 3]);
    let logits = ar.forward(&store, &seq).unwrap();
    assert_eq!((logits.rows, logits.cols), (4, k + 1));
    // perturbing the table moves the logits directly
    let mut bumped = store.clone();
    bumped.data_mut(ar.acoustic_emb)[k * d] += 1.0;
    let after = ar.forward(&bumped, &seq).unwrap();
    assert_ne!(logits.row(0)[k], after.row(0)[k]);
}

#[test]
fn nar_heads_share_the_stage_tables() {
    let cfg = common::toy_model(16, 4);
    let (nar, store) = NarModel::init(cfg, 0).unwrap();
    let (d, k, q) = (cfg.embed_dim, cfg.codebook_size, cfg.quantizers);
    assert_eq!(store.num_scalars(), common::tied_nar_count(&cfg));
    assert_eq!(nar.untied_param_count(&store) - store.num_scalars(), (q - 1) * k * d);
    for j in 1..=q {
        assert!(store.find(&format!("nar.acoustic_embedding.{j}")).is_some());
    }
}

#[test]
fn adaln_with_unit_scale_and_zero_shift_is_layer_norm() {
    let cfg = common::toy_model(16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let nar = NarModel::new(&mut store, cfg, &mut rng).unwrap();
    common::force_unit_modulation(&nar, &mut store);
    let worst = common::adaln_plain_gap(&nar, &store, &mut rng);
    assert!(worst < 1e-6, "max diff {worst}");
}

#[test]
fn nar_logits_cover_target_rows_and_reject_bad_stages() {
    let cfg = common::toy_model(16, 4);
    let (nar, store) = NarModel::init(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prompt = CodeMatrix::new(common::random_ids(&mut rng, 4 * 4, 16), 4, 4, 16).unwrap();
    let target = CodeMatrix::new(common::random_ids(&mut rng, 6 * 4, 16), 6, 4, 16).unwrap();
    let t2 = target.clone();
    let a = nar.forward(&store, &NarInput { phonemes: vec![1], prompt: prompt.clone(), target: CodeMatrix::from_columns(&[t2.column(0)], 16).unwrap(), stage: 2 }).unwrap();
    assert_eq!((a.rows, a.cols), (6, 16));
    assert!(nar.forward(&store, &NarInput { phonemes: vec![1], prompt, target, stage: 5 }).is_err());
}

#[test]
fn q8_synthesis_makes_seven_nar_passes() {
    let codec = common::random_codec(CodecConfig { codebook_size: 16, quantizers: 8, ..Default::default() }, 2);
    let cfg = common::toy_model(16, 8);
    let (ar_model, ar_params) = ArModel::init(cfg, 3).unwrap();
    let (nar_model, nar_params) = NarModel::init(cfg, 4).unwrap();
    let ar = Trained { model: ar_model, params: ar_params };
    let nar = Trained { model: nar_model, params: nar_params };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enrolled = Waveform::new((0..800).map(|_| rng.random_range(-0.3..0.3)).collect(), 8000).unwrap();
    let spec = PromptSpec {
        mode: PromptMode::Standard,
        enrolled,
        enrolled_text: Some("ab".into()),
        target_text: "kim".into(),
        prompt_seconds: None,
    };
    let before = nar.model.forward_calls();
    let out = synthesize(&spec, &ar, &nar, &codec, &SamplingSpec { max_new_tokens: 20, ..SamplingSpec::greedy(20) }).unwrap();
    assert_eq!(nar.model.forward_calls() - before, 7);
    assert_eq!(out.codes.quantizers(), 8);
    assert_eq!(out.waveform.len(), out.codes.num_frames() * 80);
}

#[test]
fn vanishing_temperature_is_uncached_greedy() {
    let cfg = common::toy_model(16, 2);
    let (ar, store) = ArModel::init(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..20 {
        let (np, nc) = (rng.random_range(1..6), rng.random_range(0..6));
        let ph = common::random_ids(&mut rng, np, 64);
        let prefix = common::random_ids(&mut rng, nc, 16);
        let oracle = common::uncached_greedy(&ar, &store, &ph, &prefix, 24);
        for t in [0.0, 1e-9] {
            let spec = SamplingSpec { temperature: t, top_p: 0.9, seed: i, max_new_tokens: 24 };
            assert_eq!(ar.generate(&store, &ph, &prefix, &spec).unwrap(), oracle, "prompt {i} temperature {t}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cached_and_full_forward_agree(seed in any::<u64>(), t in 1usize..12) {
        // greedy generation through the cache must match greedy argmax of
        // the full forward pass over the grown sequence
        let cfg = common::toy_model(8, 2);
        let (ar, store) = ArModel::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ph = common::random_ids(&mut rng, 3, 64);
        let prefix = common::random_ids(&mut rng, t, 8);
        let got = ar.generate(&store, &ph, &prefix, &SamplingSpec::greedy(10)).unwrap();
        prop_assert_eq!(got, common::uncached_greedy(&ar, &store, &ph, &prefix, 10));
    }

    #[test]
    fn nar_target_embedding_sums_lower_stages(seed in any::<u64>(), stage in 2usize..=4) {
        let cfg = common::toy_model(8, 4);
        let (nar, store) = NarModel::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = CodeMatrix::new(common::random_ids(&mut rng, 5 * 4, 8), 5, 4, 8).unwrap();
        let e = nar.embed_target(&store, &target, stage).unwrap();
        for t in 0..5 {
            for c in 0..cfg.embed_dim {
                let want: f32 = (0..stage - 1)
                    .map(|j| store.data(nar.acoustic_emb[j])[target.get(t, j) as usize * cfg.embed_dim + c])
                    .sum();
                prop_assert!((e.row(t)[c] - want).abs() < 1e-6);
            }
        }
        let p = nar.embed_prompt(&store, &target).unwrap();
        for c in 0..cfg.embed_dim {
            let want: f32 = (0..4).map(|j| store.data(nar.acoustic_emb[j])[target.get(0, j) as usize * cfg.embed_dim + c]).sum();
            prop_assert!((p.row(0)[c] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn ar_generation_respects_token_budget(seed in any::<u64>(), budget in 1usize..20) {
        let cfg = common::toy_model(8, 2);
        let (ar, store) = ArModel::init(cfg, seed).unwrap();
        let spec = SamplingSpec { temperature: 1.0, top_p: 0.9, seed, max_new_tokens: budget };
        let out = ar.generate(&store, &[1, 2], &[3], &spec).unwrap();
        prop_assert!(out.len() <= budget);
        prop_assert!(out.iter().all(|&c| (c as usize) < 8));
        prop_assert_eq!(out, ar.generate(&store, &[1, 2], &[3], &spec).unwrap());
    }
}
