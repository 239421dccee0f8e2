//! Training sanity runs that are too slow for unit tests.

use egat::data::{gen_synthetic, split, Domain, LabeledImage};
use egat::metrics::accuracy;
use egat::train::{train, Objective, TrainConfig};

#[test]
fn erm_fits_a_separable_two_class_set() {
    // Disks vs squares on flat backgrounds, 500 steps: the classifier should
    // place essentially all training glyphs correctly.
    let samples = gen_synthetic(200, 2, &[Domain::Flat], 11).unwrap();
    let s = split(&samples, 11).unwrap();
    let train_set: Vec<LabeledImage> = s.train.iter().map(|x| x.to_labeled()).collect();
    let val_set: Vec<LabeledImage> = s.val.iter().map(|x| x.to_labeled()).collect();

    let cfg = TrainConfig {
        objective: Objective::Erm,
        max_steps: 500,
        batch_size: 16,
        learning_rate: 1e-3,
        val_every: 100,
        seed: 11,
        ..Default::default()
    };
    let out = train(&cfg, &train_set, &val_set).unwrap();
    let train_acc = accuracy(&out.final_model, &train_set, None).unwrap();
    assert!(train_acc >= 0.99, "train accuracy {train_acc}");
}

#[test]
fn igr_objective_trains_and_penalty_shrinks_gradients() {
    let samples = gen_synthetic(80, 2, &[Domain::Flat], 13).unwrap();
    let s = split(&samples, 13).unwrap();
    let train_set: Vec<LabeledImage> = s.train.iter().map(|x| x.to_labeled()).collect();
    let val_set: Vec<LabeledImage> = s.val.iter().map(|x| x.to_labeled()).collect();

    let cfg = TrainConfig {
        objective: Objective::Igr,
        igr_weight: 0.5,
        max_steps: 40,
        batch_size: 8,
        learning_rate: 1e-3,
        channels: (4, 8),
        val_every: 20,
        seed: 13,
        ..Default::default()
    };
    let out = train(&cfg, &train_set, &val_set).unwrap();
    assert_eq!(out.log.len(), 40);
    // The penalized input-gradient magnitude should trend down.
    let early: f64 = out.log[..10].iter().map(|r| r.igr_penalty).sum::<f64>() / 10.0;
    let late: f64 = out.log[30..].iter().map(|r| r.igr_penalty).sum::<f64>() / 10.0;
    assert!(
        late < early,
        "penalty should decrease: early {early:.4e}, late {late:.4e}"
    );
}
