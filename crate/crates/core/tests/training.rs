use approx::assert_relative_eq;

use fdm::cooccurrence::{corpus_cooc, CoocMatrix};
use fdm::evaluation::matching_error;
use fdm::model::full_loss;
use fdm::synthetic::{gen_corpus, interval_topics, mixture_cooc, DocPrior, GroundTruth};
use fdm::topics::TopicSet;
use fdm::trainer::{fit_alpha, train_restarts, TrainConfig, Trainer};

fn small_mixture() -> (TopicSet, CoocMatrix) {
    let topics = TopicSet::from_rows(vec![
        vec![0.4, 0.3, 0.2, 0.1, 0.0, 0.0],
        vec![0.0, 0.0, 0.1, 0.2, 0.3, 0.4],
    ])
    .unwrap();
    let theta = [0.35, 0.1, 0.1, 0.45];
    let cooc = CoocMatrix::from_dense(6, &mixture_cooc(&topics, &theta)).unwrap();
    (topics, cooc)
}

#[test]
fn single_topic_fit_is_the_marginal() {
    let gt = GroundTruth {
        topics: interval_topics(30, &[(1, 12), (10, 30)]).unwrap(),
        prior: DocPrior::Symmetric(1.0),
        tokens_per_doc: 20,
        docs: 3000,
        seed: 1,
    };
    let cooc = corpus_cooc(&gen_corpus(&gt).unwrap()).unwrap();
    let cfg = TrainConfig {
        topics: 1,
        lr: 0.05,
        max_steps: 3000,
        conv_tol: 0.0,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(30, cfg.clone()).unwrap();
    trainer.run(&cooc).unwrap();
    for (lr, max_steps) in [(0.005, 6000), (0.001, 12_000)] {
        trainer
            .set_config(TrainConfig {
                lr,
                max_steps,
                ..cfg.clone()
            })
            .unwrap();
        trainer.run(&cooc).unwrap();
    }
    let dist = trainer.dist().unwrap();
    let l1: f64 = dist
        .topic(0)
        .iter()
        .zip(cooc.marginal())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(l1 < 0.01, "l1 {l1}");
    assert_relative_eq!(dist.alpha()[0], 1.0);
}

#[test]
fn full_loss_settles_after_warm_up() {
    let (_, cooc) = small_mixture();
    let cfg = TrainConfig {
        topics: 2,
        lr: 0.01,
        max_steps: 10_000,
        conv_tol: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(6, cfg).unwrap();
    trainer.run_until(&cooc, 2000).unwrap();
    let mut previous = full_loss(&trainer.dist().unwrap(), &cooc).unwrap();
    for target in (2500..=10_000).step_by(500) {
        trainer.run_until(&cooc, target).unwrap();
        let loss = full_loss(&trainer.dist().unwrap(), &cooc).unwrap();
        assert!(loss <= previous + 1e-3, "step {target}: {loss} after {previous}");
        previous = loss;
    }
}

#[test]
fn fit_reproduces_the_generating_matrix() {
    let (topics, cooc) = small_mixture();
    let (trainer, _, losses) = train_restarts(
        &cooc,
        &TrainConfig {
            topics: 2,
            lr: 0.02,
            max_steps: 8000,
            init_scale: 1.0,
            ..TrainConfig::default()
        },
        2,
    )
    .unwrap();
    let dist = trainer.dist().unwrap();
    let tv: f64 = 0.5
        * dist
            .dense()
            .iter()
            .zip(cooc.to_dense())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    assert!(tv < 0.03, "total variation {tv}");
    assert_eq!(losses.len(), 2);
    let err = matching_error(&topics, &dist.topic_set()).unwrap().err;
    assert!(err.is_finite());
}

#[test]
fn restarts_keep_the_lowest_loss_run() {
    let (_, cooc) = small_mixture();
    let cfg = TrainConfig {
        topics: 2,
        lr: 0.01,
        max_steps: 600,
        init_scale: 1.0,
        seed: 40,
        ..TrainConfig::default()
    };
    let (best, _, losses) = train_restarts(&cooc, &cfg, 3).unwrap();
    let winner = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(r, _)| r as u64)
        .unwrap();
    assert_eq!(best.config().seed, 40 + winner);
    let mut single = Trainer::new(
        6,
        TrainConfig {
            seed: 40 + winner,
            ..cfg.clone()
        },
    )
    .unwrap();
    single.run(&cooc).unwrap();
    assert_eq!(single.dist().unwrap().mu(), best.dist().unwrap().mu());
    assert!(train_restarts(&cooc, &cfg, 0).is_err());
}

#[test]
fn alpha_fit_on_true_topics_recovers_mixing_matrix() {
    let (topics, cooc) = small_mixture();
    let cfg = TrainConfig {
        lr: 0.02,
        max_steps: 6000,
        conv_tol: 0.0,
        ..TrainConfig::default()
    };
    let (dist, _) = fit_alpha(&cooc, &topics, &cfg).unwrap();
    for (a, b) in dist.alpha().iter().zip([0.35, 0.1, 0.1, 0.45]) {
        assert!((a - b).abs() < 0.02, "alpha {:?}", dist.alpha());
    }
    assert_eq!(dist.mu(), topics.as_slice());
}
