use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlscope_core::ablate::{ablate, PruneSelector};
use vlscope_core::analytics::{AggKind, BucketThresholds};
use vlscope_core::model::{
    enumerate_heads, HeadId, HeadKind, Model, ModelConfig, PruneConfig, WeightSet,
};
use vlscope_core::synth;
use vlscope_core::tokenizer::tokenize;

fn toy(seed: u64) -> (WeightSet, Model<f32>) {
    let cfg = ModelConfig::toy(synth::vocab().len(), synth::answer_list().len());
    let ws = WeightSet::random(cfg, seed, 1.0).unwrap();
    let m = Model::from_weights(&ws).unwrap();
    (ws, m)
}

#[test]
fn pruned_heads_are_uniform_for_random_configs() {
    let vocab = synth::vocab();
    let (_, model) = toy(3);
    let heads = enumerate_heads(model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..30 {
        let n = rng.random_range(0..=heads.len());
        let prune: PruneConfig = heads.choose_multiple(&mut rng, n).copied().collect();
        let seq = tokenize(&synth::random_question(rng.random_range(1..15), &mut rng), &vocab);
        let vf = synth::features("x", rng.random_range(1..=36), trial);
        let result = model.forward(&seq, &vf, &prune).unwrap();
        for map in &result.maps {
            let u = 1.0 / map.cols() as f64;
            let dev = map
                .cells()
                .data()
                .iter()
                .map(|&v| (v as f64 - u).abs())
                .fold(0.0, f64::max);
            if prune.contains(&map.head()) {
                assert!(dev < 1e-7, "{} deviates by {dev}", map.head());
            }
            assert!(map.max_row_sum_error() <= 1e-5);
        }
    }
}

/// Zeroing a head's query projection makes all its scores equal, so its
/// attention is already uniform and pruning it is a no-op.
#[test]
fn pruning_an_already_uniform_head_keeps_logits() {
    let vocab = synth::vocab();
    let (mut ws, _) = toy(5);
    let dh = ws.config().d / ws.config().heads;
    let target = HeadId::new(HeadKind::Lv, 0, 1);
    let d = ws.config().d;
    ws.update("cross.0.lv.q.weight", |t| {
        for r in dh..2 * dh {
            t.data[r * d..(r + 1) * d].fill(0.0);
        }
    })
    .unwrap();
    ws.update("cross.0.lv.q.bias", |t| t.data[dh..2 * dh].fill(0.0)).unwrap();
    let model = Model::<f32>::from_weights(&ws).unwrap();
    let seq = tokenize("what color is the sofa ?", &vocab);
    let vf = synth::features("x", 12, 4);
    let plain = model.forward(&seq, &vf, &PruneConfig::new()).unwrap();
    let pruned = model
        .forward(&seq, &vf, &[target].into_iter().collect())
        .unwrap();
    let diff = plain
        .logits
        .iter()
        .zip(&pruned.logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "logits moved by {diff}");
}

#[test]
fn pruning_everything_changes_logits() {
    let vocab = synth::vocab();
    let (_, model) = toy(9);
    let seq = tokenize("is there a dog in the image ?", &vocab);
    let vf = synth::features("x", 8, 2);
    let a = model.forward(&seq, &vf, &PruneConfig::new()).unwrap();
    let b = model
        .forward(&seq, &vf, &PruneConfig::all(model.config()))
        .unwrap();
    assert_ne!(a.logits, b.logits);
}

#[test]
fn ablate_with_empty_list_has_zero_delta() {
    let (_, model) = toy(1);
    let corpus = synth::corpus(6, 4, 1);
    let features = synth::feature_map(&corpus, 6, 3);
    let report = ablate(
        &model,
        &synth::vocab(),
        &synth::answers(),
        &corpus,
        &features,
        &"".parse::<PruneSelector>().unwrap(),
        AggKind::Median,
        &BucketThresholds::default(),
    )
    .unwrap();
    assert_eq!(report.overall.total, 24);
    assert_eq!(report.overall.delta(), 0.0);
    for row in &report.by_operation {
        assert_eq!(row.correct_before, row.correct_after);
    }
    let per_op: usize = report.by_operation.iter().map(|r| r.total).sum();
    assert_eq!(per_op, 24);
}

/// Pruning every head equals a reference where each head's attention is
/// made uniform by zeroing all query projections.
#[test]
fn ablate_all_matches_uniform_reference_model() {
    let (ws, model) = toy(21);
    let mut uniform = ws.clone();
    let names: Vec<String> = ws
        .names()
        .filter(|n| n.contains(".q."))
        .map(str::to_owned)
        .collect();
    for name in names {
        uniform.update(&name, |t| t.data.fill(0.0)).unwrap();
    }
    let reference = Model::<f32>::from_weights(&uniform).unwrap();
    let corpus = synth::corpus(5, 4, 8);
    let features = synth::feature_map(&corpus, 7, 8);
    let args = (&synth::vocab(), &synth::answers(), &corpus);
    let pruned = ablate(&model, args.0, args.1, args.2, &features, &PruneSelector::All, AggKind::Median, &BucketThresholds::default()).unwrap();
    let base = ablate(&reference, args.0, args.1, args.2, &features, &PruneSelector::Heads(PruneConfig::new()), AggKind::Median, &BucketThresholds::default()).unwrap();
    assert_eq!(pruned.overall.correct_after, base.overall.correct_before);
    for (p, b) in pruned.by_operation.iter().zip(&base.by_operation) {
        assert_eq!(p.correct_after, b.correct_before, "{}", p.operation);
    }
}

#[test]
fn bucket_selector_prunes_matching_heads_only() {
    let (_, model) = toy(4);
    let corpus = synth::corpus(3, 2, 2);
    let features = synth::feature_map(&corpus, 9, 1);
    for b in 0..4 {
        let report = ablate(
            &model,
            &synth::vocab(),
            &synth::answers(),
            &corpus,
            &features,
            &PruneSelector::Bucket(b),
            AggKind::Max,
            &BucketThresholds::default(),
        )
        .unwrap();
        assert_eq!(report.overall.total, 6);
        assert_eq!(report.selector, format!("bucket:{b}"));
    }
}
