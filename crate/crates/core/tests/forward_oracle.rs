mod support;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlscope_core::model::{Model, ModelConfig, PruneConfig, WeightSet};
use vlscope_core::synth;
use vlscope_core::tokenizer::tokenize;

use support::reference;

fn toy_weights(seed: u64) -> WeightSet {
    let cfg = ModelConfig::toy(synth::vocab().len(), synth::answer_list().len());
    WeightSet::random(cfg, seed, 1.0).unwrap()
}

fn max_abs<A: Copy + Into<f64>>(a: &[A], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| ((*x).into() - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn toy_logits_match_reference_over_20_draws() {
    let vocab = synth::vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for draw in 0..20u64 {
        let ws = toy_weights(100 + draw);
        let m32 = Model::<f32>::from_weights(&ws).unwrap();
        let m64 = Model::<f64>::from_weights(&ws).unwrap();
        let n_words = rng.random_range(1..=20);
        let question = synth::random_question(n_words, &mut rng);
        let seq = tokenize(&question, &vocab);
        let vf = synth::features("x", rng.random_range(1..=36), draw);

        let expected = reference::forward(&ws, seq.ids(), &vf, &BTreeSet::new());
        let got32 = m32.forward(&seq, &vf, &PruneConfig::new()).unwrap();
        let got64 = m64.forward(&seq, &vf, &PruneConfig::new()).unwrap();
        let e32 = max_abs(&got32.logits, &expected.logits);
        let e64 = max_abs(&got64.logits, &expected.logits);
        assert!(e32 < 1e-4, "draw {draw}: f32 logits off by {e32}");
        assert!(e64 < 1e-9, "draw {draw}: f64 logits off by {e64}");

        assert_eq!(got64.maps.len(), expected.maps.len());
        for (map, (name, rows)) in got64.maps.iter().zip(&expected.maps) {
            assert_eq!(&map.head().to_string(), name);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            assert!(max_abs(map.cells().data(), &flat) < 1e-9, "{name}");
        }
    }
}

#[test]
fn pruned_toy_forward_matches_reference() {
    let vocab = synth::vocab();
    let ws = toy_weights(7);
    let model = Model::<f64>::from_weights(&ws).unwrap();
    let seq = tokenize("is the cup red or blue ?", &vocab);
    let vf = synth::features("x", 5, 1);
    let prune = PruneConfig::parse_list("lang_1_0,lv_0_1,vv_0_0").unwrap();
    let names: BTreeSet<String> = prune.iter().map(|h| h.to_string()).collect();
    let expected = reference::forward(&ws, seq.ids(), &vf, &names);
    let got = model.forward(&seq, &vf, &prune).unwrap();
    assert!(max_abs(&got.logits, &expected.logits) < 1e-9);
}
