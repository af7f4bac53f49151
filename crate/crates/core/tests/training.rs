use agpis::model::{Muisc, MuiscConfig};
use agpis::train::{evaluate, train, EvalSample, TrainConfig};
use agpis::world::{balanced_subsets, generate_dataset, Mixture, RuleClass, WorldConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn first_batch_loss_matches_uniform_logits() {
    let cfg = MuiscConfig::desk();
    // Uniform logits give ln V per feedback token and ln K for the class.
    let expected = cfg.lambda_nlg * (agpis::vocab::SIZE as f64).ln() + cfg.lambda_mcc * (cfg.num_classes as f64).ln();
    let data: Vec<_> = generate_dataset(32, &Mixture::default(), 21, &WorldConfig::default())
        .unwrap()
        .iter()
        .map(|r| r.sample())
        .collect();
    let mut m = Muisc::new(cfg).unwrap();
    let r = train(
        &mut m,
        &data,
        &[],
        &TrainConfig {
            max_steps: Some(1),
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let first = r.batch_losses[0];
    assert!((first - expected).abs() <= 0.2 * expected, "{first} vs {expected}");
}

#[test]
fn one_qualified_sample_can_be_memorised() {
    let rec = generate_dataset(1, &Mixture::default(), 5, &WorldConfig::default())
        .unwrap()
        .remove(0);
    assert_eq!(rec.label, RuleClass::Qualified);
    let sample = rec.sample();
    let mut m = Muisc::new(MuiscConfig::desk()).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 1,
        ..TrainConfig::default()
    };
    train(&mut m, std::slice::from_ref(&sample), &[], &cfg).unwrap();
    let p_t = m.predict(&sample.images, &sample.title).unwrap().p_t;
    assert!(p_t > 0.99, "p_t {p_t}");
}

#[test]
fn untrained_model_is_at_chance_and_order_free() {
    let recs = generate_dataset(500, &Mixture::default(), 8, &WorldConfig::default()).unwrap();
    let subsets = balanced_subsets(recs.iter().map(|r| (r.id, r.split, r.label)), 8);
    let mut test: Vec<EvalSample> = recs.iter().map(EvalSample::from).collect();
    let m = Muisc::new(MuiscConfig::desk()).unwrap();
    let a = evaluate(&m, &test, &subsets).unwrap();
    assert_eq!(a.samples, 500);
    assert!((a.auc - 0.5).abs() <= 0.05, "auc {}", a.auc);

    test.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let b = evaluate(&m, &test, &subsets).unwrap();
    assert_eq!(a, b);
}
