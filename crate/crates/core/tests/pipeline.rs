use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use holiseg_core::filter::argmax;
use holiseg_core::micronet::{forward, load_checkpoint, make_shapes_dataset, save_checkpoint, train, Weights};
use holiseg_core::{
    contaminate, gt_confidence, hard_filter_argmax, run_grid, soft_filter, ConfusionMatrix,
    ContaminationSpec, LabelMap, LabelSet, MicroNetConfig, ScoreMapSet, Tensor, Variant,
    DEFAULT_IGNORE_LABEL,
};

fn random_set(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, present: usize) -> ScoreMapSet {
    let scores = Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-2.0..2.0));
    let mut data: Vec<u32> = (0..h * w)
        .map(|_| {
            if rng.gen_bool(0.05) {
                DEFAULT_IGNORE_LABEL
            } else {
                rng.gen_range(0..present as u32)
            }
        })
        .collect();
    data[0] = 0;
    ScoreMapSet::new(scores, LabelMap::new(h, w, data).unwrap()).unwrap()
}

fn pixel_accuracy(pred: &LabelMap, truth: &LabelMap, c: usize) -> f64 {
    let mut cm = ConfusionMatrix::new(c).unwrap();
    cm.accumulate(pred, truth, Some(DEFAULT_IGNORE_LABEL)).unwrap();
    cm.compute().unwrap().pixel_accuracy
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_with_truth_never_hurts(seed in any::<u64>(), present in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_set(&mut rng, 6, 7, 6, present);
        let truth_set = d.truth.label_set(Some(DEFAULT_IGNORE_LABEL));
        let filtered = hard_filter_argmax(&d.scores, &truth_set).unwrap();
        let plain = argmax(&d.scores).unwrap();
        prop_assert!(pixel_accuracy(&filtered, &d.truth, 6) >= pixel_accuracy(&plain, &d.truth, 6));
    }

    #[test]
    fn gt_soft_filter_agrees_with_hard_filter(seed in any::<u64>(), present in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_set(&mut rng, 5, 5, 6, present);
        let truth_set = d.truth.label_set(Some(DEFAULT_IGNORE_LABEL));
        let conf = gt_confidence(&truth_set, 6).unwrap();
        let soft = soft_filter(&d.scores, &conf, 1e-12).unwrap();
        prop_assert_eq!(argmax(&soft).unwrap(), hard_filter_argmax(&d.scores, &truth_set).unwrap());
    }

    #[test]
    fn contamination_nests(seed in any::<u64>(), a in 0.0f64..4.0, b in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<LabelSet> = (0..8)
            .map(|_| (0..8).filter(|_| rng.gen_bool(0.4)).chain([0]).collect())
            .collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let kept = |r: f64| contaminate(&truth, &ContaminationSpec::new(0.0, r, seed).unwrap(), 20).unwrap();
        let added = |p: f64| contaminate(&truth, &ContaminationSpec::new(p, 0.0, seed).unwrap(), 20).unwrap();
        for (i, t) in truth.iter().enumerate() {
            prop_assert!(kept(lo)[i].is_superset(&kept(hi)[i]));
            prop_assert!(t.is_superset(&kept(hi)[i]));
            prop_assert!(added(hi)[i].is_superset(&added(lo)[i]));
            prop_assert!(added(lo)[i].is_superset(t));
        }
    }

    #[test]
    fn merged_confusion_equals_joint(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<ScoreMapSet> = (0..3).map(|_| random_set(&mut rng, 4, 4, 5, 5)).collect();
        let mut joint = ConfusionMatrix::new(5).unwrap();
        let mut merged = ConfusionMatrix::new(5).unwrap();
        for d in &maps {
            let pred = argmax(&d.scores).unwrap();
            joint.accumulate(&pred, &d.truth, Some(DEFAULT_IGNORE_LABEL)).unwrap();
            let mut part = ConfusionMatrix::new(5).unwrap();
            part.accumulate(&pred, &d.truth, Some(DEFAULT_IGNORE_LABEL)).unwrap();
            merged.merge(&part).unwrap();
        }
        prop_assert_eq!(joint.compute().unwrap(), merged.compute().unwrap());
    }
}

#[test]
fn grid_corner_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<ScoreMapSet> = (0..6).map(|_| random_set(&mut rng, 8, 8, 10, 4)).collect();
    let out = run_grid(&data, &[0.0, 2.0], &[0.0, 1.5], 11, Some(DEFAULT_IGNORE_LABEL)).unwrap();
    assert_eq!(out.records.len(), 4);
    let clean = &out.records[0];
    assert_eq!((clean.precision, clean.recall), (1.0, 1.0));
    assert!(clean.report.pixel_accuracy >= out.baseline.pixel_accuracy);
    assert!(out.records.iter().filter(|r| r.added == 0.0).all(|r| r.precision == 1.0));
    assert!(out.records.iter().filter(|r| r.removed == 0.0).all(|r| r.recall == 1.0));
    let again = run_grid(&data, &[0.0, 2.0], &[0.0, 1.5], 11, Some(DEFAULT_IGNORE_LABEL)).unwrap();
    assert_eq!(out, again);
}

#[test]
fn trained_checkpoint_reproduces_forward() {
    let config = MicroNetConfig {
        num_classes: 5,
        epochs: 1,
        learning_rate: 0.1,
        momentum: 0.5,
        ..MicroNetConfig::default()
    };
    let data = make_shapes_dataset(4, 16, 16, config.num_classes, 9).unwrap();
    let (train_set, val_set) = data.split_at(3);
    let out = train(train_set, val_set, &config, 4, Variant::Holistic).unwrap();
    assert_eq!(out, train(train_set, val_set, &config, 4, Variant::Holistic).unwrap());

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &out.params.weights, &config).unwrap();
    let (loaded_config, loaded) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded_config, config);

    let image = &val_set[0].image;
    let a = forward(&out.params.weights, &config, image).unwrap().filtered_full_map;
    let b = forward(&loaded, &loaded_config, image).unwrap().filtered_full_map;
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "checkpoint drift {worst}");
    assert!(Weights::init(&config, 4).unwrap().all_finite());
}
