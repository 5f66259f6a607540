use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlscope_core::analytics::filter::resolve_selection;
use vlscope_core::analytics::{
    diff_snapshots, filter_heads, AggKind, BucketThresholds, CapturedState, Selection,
};
use vlscope_core::model::{enumerate_heads, Model, ModelConfig, PruneConfig, WeightSet};
use vlscope_core::synth;
use vlscope_core::tokenizer::tokenize;

fn toy(seed: u64) -> Model<f32> {
    let cfg = ModelConfig::toy(synth::vocab().len(), synth::answer_list().len());
    Model::from_weights(&WeightSet::random(cfg, seed, 1.0).unwrap()).unwrap()
}

fn random_state(model: &Model<f32>, rng: &mut ChaCha8Rng, n_words: usize, n_objects: usize) -> CapturedState<f32> {
    let seq = tokenize(&synth::random_question(n_words, rng), &synth::vocab());
    let vf = synth::features("x", n_objects, rng.random());
    let r = model.forward(&seq, &vf, &PruneConfig::new()).unwrap();
    CapturedState::new(r, AggKind::Median, &BucketThresholds::default())
}

#[test]
fn standard_config_rows_are_stochastic() {
    let vocab = synth::vocab();
    let cfg = ModelConfig::standard(vocab.len(), synth::answer_list().len());
    let model = Model::<f32>::from_weights(&WeightSet::random(cfg, 42, 1.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..3 {
        let seq = tokenize(&synth::random_question(rng.random_range(1..30), &mut rng), &vocab);
        let vf = synth::features("x", rng.random_range(1..=36), i);
        let r = model.forward(&seq, &vf, &PruneConfig::new()).unwrap();
        assert_eq!(r.maps.len(), 136);
        for m in &r.maps {
            assert!(m.max_row_sum_error() <= 1e-5, "{}", m.head());
        }
    }
}

#[test]
fn diff_properties_on_random_pairs() {
    let model = toy(12);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let t = BucketThresholds::default();
    for _ in 0..20 {
        // same shapes half of the time
        let (nw, no) = (rng.random_range(1..10), rng.random_range(1..12));
        let a = random_state(&model, &mut rng, nw, no);
        let b = if rng.random_bool(0.5) {
            random_state(&model, &mut rng, nw, no)
        } else {
            let (nw, no) = (rng.random_range(1..10), rng.random_range(1..12));
            random_state(&model, &mut rng, nw, no)
        };
        let zero = diff_snapshots(&a, &a, &t);
        assert!(zero.excluded.is_empty());
        for h in &zero.heads {
            assert_eq!(h.k_delta, 0.0);
            assert!(h.cells.data().iter().all(|v| *v == 0.0));
        }
        let ab = diff_snapshots(&a, &b, &t);
        let ba = diff_snapshots(&b, &a, &t);
        assert_eq!(ab.heads.len() + ab.excluded.len(), 14);
        assert_eq!(ab.excluded, ba.excluded);
        for (x, y) in ab.heads.iter().zip(&ba.heads) {
            assert_eq!(x.head, y.head);
            assert!((x.k_delta + y.k_delta).abs() <= 1e-7);
            assert!((-1.0..=1.0).contains(&x.k_delta));
            for (p, q) in x.cells.data().iter().zip(y.cells.data()) {
                assert!((p + q).abs() <= 1e-7);
                assert!((-1.0..=1.0).contains(p));
            }
        }
    }
}

#[test]
fn filter_is_anti_monotone_on_real_forwards() {
    let model = toy(8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let heads = enumerate_heads(model.config());
    for _ in 0..10 {
        let (nw, no) = (rng.random_range(1..8), rng.random_range(1..8));
        let s = random_state(&model, &mut rng, nw, no);
        let reference = heads[rng.random_range(0..heads.len())];
        let map = s.result.map(&reference).unwrap();
        let selections = [
            Selection::Cell { row: rng.random_range(0..map.rows()), col: rng.random_range(0..map.cols()) },
            Selection::Row { index: rng.random_range(0..map.rows()) },
            Selection::Col { index: rng.random_range(0..map.cols()) },
        ];
        for sel in selections {
            assert!(resolve_selection(&s.result, reference, sel).is_ok());
            for agg in [AggKind::Min, AggKind::Median, AggKind::Max] {
                let all = filter_heads(&s.result, reference, sel, 0.0, agg).unwrap();
                // the reference head always contains the selection
                assert!(all.iter().any(|m| m.head == reference));
                let mut prev = all;
                for t in [0.05, 0.1, 0.2, 0.4, 0.7, 1.0] {
                    let cur = filter_heads(&s.result, reference, sel, t, agg).unwrap();
                    assert!(cur.iter().all(|m| prev.iter().any(|p| p.head == m.head)));
                    assert!(cur.windows(2).all(|w| w[0].value >= w[1].value));
                    prev = cur;
                }
            }
        }
    }
}
