mod common;

use rand::Rng;
use rmgl_core::checkpoint;
use rmgl_core::experiment::ExperimentConfig;
use rmgl_core::model::{build_model, train, FeaturePath, HeadKey, RmglConfig};
use rmgl_core::tensor::{Mode, Shape, Tensor};

fn short_run() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.schedule.epochs = 3;
    cfg.schedule.batches_per_epoch = Some(2);
    cfg.schedule.warmup_epochs = 1;
    cfg.schedule.decay_epochs = vec![2];
    cfg
}

#[test]
fn rows_inside_the_restricted_region_do_reach_the_stripe() {
    let model = build_model(&RmglConfig::default(), &mut common::rng(1)).unwrap();
    let input = model.arch().input();
    let mut rng = common::rng(2);
    let base = Tensor::uniform(Shape::new(1, 3, input.h, input.w), 0.0, 1.0, &mut rng);
    let before = model.forward_features(&base, Mode::Eval).unwrap();
    for (b, plan) in model.plans().iter().enumerate() {
        for k in 0..plan.stripes {
            let (lo, hi) = plan.stripe_region_clipped(k);
            let key = HeadKey { branch: b, path: FeaturePath::Rp, stripe: k + 1 };
            let mut changed = 0;
            for row in lo..=hi {
                let mut x = base.clone();
                for c in 0..3 {
                    for col in 0..input.w {
                        let i = x.index(0, c, row, col);
                        x.data_mut()[i] += rng.random_range(1.0..3.0);
                    }
                }
                let after = model.forward_features(&x, Mode::Eval).unwrap();
                changed += usize::from(after.get(key) != before.get(key));
            }
            // Not every row need matter, but most of the region does.
            assert!(changed * 2 > hi - lo + 1, "{key}: {changed} of {} rows", hi - lo + 1);
        }
    }
}

#[test]
fn original_path_reaches_past_the_restricted_region() {
    let cfg = RmglConfig { abp_eval: false, ..RmglConfig::default() };
    let model = build_model(&cfg, &mut common::rng(3)).unwrap();
    let input = model.arch().input();
    let base = Tensor::uniform(Shape::new(1, 3, input.h, input.w), 0.0, 1.0, &mut common::rng(4));
    let before = model.forward_features(&base, Mode::Eval).unwrap();
    let b = 1;
    let (_, hi) = model.plans()[b].stripe_region_clipped(0);
    let rp = HeadKey { branch: b, path: FeaturePath::Rp, stripe: 1 };
    let original = HeadKey { branch: b, path: FeaturePath::Original, stripe: 1 };
    let mut original_moved = false;
    for row in hi + 1..(hi + 8).min(input.h) {
        let mut x = base.clone();
        for c in 0..3 {
            for col in 0..input.w {
                let at = x.index(0, c, row, col);
                x.data_mut()[at] += 10.0;
            }
        }
        let after = model.forward_features(&x, Mode::Eval).unwrap();
        assert_eq!(after.get(rp), before.get(rp), "row {row}");
        original_moved |= after.get(original) != before.get(original);
    }
    assert!(original_moved);
}

#[test]
fn identical_seeds_give_identical_training() {
    let cfg = short_run();
    let data = cfg.dataset().unwrap();
    let (m1, log1) = train(&cfg.model, &cfg.schedule, &cfg.augment, &data, 5, |_| {}).unwrap();
    let (m2, log2) = train(&cfg.model, &cfg.schedule, &cfg.augment, &data, 5, |_| {}).unwrap();
    assert_eq!(log1.to_csv(), log2.to_csv());
    assert_eq!(m1, m2);
    let (_, log3) = train(&cfg.model, &cfg.schedule, &cfg.augment, &data, 6, |_| {}).unwrap();
    assert_ne!(log1.to_csv(), log3.to_csv());
}

#[test]
fn training_log_has_one_row_per_epoch() {
    let cfg = short_run();
    let data = cfg.dataset().unwrap();
    let mut seen = Vec::new();
    let (_, log) = train(&cfg.model, &cfg.schedule, &cfg.augment, &data, 0, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(log.rows.len(), 3);
    assert!(log.rows.iter().all(|r| r.total_loss.is_finite()));
    let last = log.rows.last().unwrap();
    assert!(last.rank1.is_some() && last.map.is_some());
    let header = log.to_csv().lines().next().unwrap().to_string();
    assert!(header.starts_with("epoch,lr,total_loss,"), "{header}");
    assert!(header.ends_with(",toy_rank1,toy_map"), "{header}");
}

#[test]
fn checkpoint_preserves_embeddings() {
    let cfg = short_run();
    let data = cfg.dataset().unwrap();
    let (model, _) = train(&cfg.model, &cfg.schedule, &cfg.augment, &data, 1, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    let loaded = checkpoint::load(dir.path()).unwrap();
    let input = model.arch().input();
    let x = Tensor::uniform(Shape::new(3, 3, input.h, input.w), 0.0, 1.0, &mut common::rng(7));
    assert_eq!(model.embed(&x).unwrap(), loaded.embed(&x).unwrap());
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let model = build_model(&RmglConfig::default(), &mut common::rng(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    let bin = dir.path().join(checkpoint::PARAMS);
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(dir.path()).is_err());
}

#[test]
fn loss_trend_decreases_over_twenty_epochs() {
    let mut cfg = ExperimentConfig::toy();
    cfg.schedule.epochs = 20;
    let data = cfg.dataset().unwrap();
    let (_, log) = train(&cfg.model, &cfg.schedule, &cfg.augment, &data, 0, |_| {}).unwrap();
    let losses = log.losses();
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, w) in avg.windows(2).enumerate() {
        assert!(w[1] <= w[0], "moving average rose at epoch {}: {avg:?}", i + 5);
    }
}
