use tabular_mtr::model::{DuoFtt, FtTransformer, FttConfig, Mlp, MlpConfig, Model};
use tabular_mtr::numerics::{Rng, Tensor};
use tabular_mtr::training::{
    evaluate_loss, finetune, predict_proba, pretrain, pretrain_unmatched, PretrainObjective, TrainConfig,
};
use tabular_mtr::Error;

fn config(n_features: usize) -> FttConfig {
    FttConfig {
        n_features,
        token_dim: 8,
        n_layers: 1,
        n_heads: 2,
        attention_dropout: 0.0,
        ffn_dropout: 0.0,
        projection_dims: vec![8, 8],
        n_classes: 2,
        ..Default::default()
    }
}

/// Two well separated clusters along the first feature.
fn clusters(n: usize, m: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = Rng::new(seed, "data");
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Tensor::from_fn(&[n, m], |k| {
        let (i, j) = (k / m, k % m);
        let shift = if j == 0 { 3.0 * (y[i] as f64 * 2.0 - 1.0) } else { 0.0 };
        shift + 0.5 * rng.normal()
    });
    (x, y)
}

fn ftt(m: usize, seed: u64) -> Model<f64> {
    Model::Ftt(FtTransformer::new(config(m), &mut Rng::new(seed, "init")).unwrap())
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        pretrain_epochs: epochs,
        finetune_max_epochs: epochs,
        patience: 5,
        ..Default::default()
    }
}

#[test]
fn pretraining_lowers_the_contrastive_loss() {
    let (x, _) = clusters(64, 4, 0);
    let mut m = ftt(4, 0);
    let report = pretrain(&mut m, &[x], PretrainObjective::Mtr, &train_cfg(15), 0).unwrap();
    assert_eq!(report.train_loss.len(), 15);
    assert!(report.train_loss.iter().all(|l| l.is_finite()));
    let (first, last) = (report.train_loss[0], *report.train_loss.last().unwrap());
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn pretraining_is_deterministic() {
    let (x, _) = clusters(40, 3, 1);
    let run = || {
        let mut m = ftt(3, 2);
        let r = pretrain(&mut m, std::slice::from_ref(&x), PretrainObjective::Mtr, &train_cfg(3), 7).unwrap();
        (r.train_loss, m.snapshot())
    };
    let (l1, s1) = run();
    let (l2, s2) = run();
    assert_eq!(l1, l2);
    assert_eq!(s1, s2);
}

#[test]
fn pretraining_needs_two_samples_and_a_contrastive_model() {
    let (x, _) = clusters(1, 3, 2);
    let mut m = ftt(3, 0);
    assert!(matches!(
        pretrain(&mut m, &[x.clone()], PretrainObjective::Mtr, &train_cfg(1), 0),
        Err(Error::Batch(_))
    ));
    let mut mlp = Model::Mlp(Mlp::new(MlpConfig::default(), 3, 2, &mut Rng::new(0, "init")).unwrap());
    assert!(pretrain(&mut mlp, &[x], PretrainObjective::Mtr, &train_cfg(1), 0).is_err());
}

#[test]
fn finetuning_learns_and_keeps_the_best_epoch() {
    let (x, y) = clusters(60, 4, 3);
    let (xv, yv) = clusters(30, 4, 4);
    let mut m = ftt(4, 5);
    let cfg = train_cfg(30);
    let report = finetune(&mut m, &[x], &y, std::slice::from_ref(&xv), &yv, &cfg, 0).unwrap();
    let best = report.best_epoch.unwrap();
    let best_val = report.val_loss[best - 1];
    assert!(report.val_loss.iter().all(|&l| l >= best_val));
    let restored = evaluate_loss(&m, std::slice::from_ref(&xv), &yv, 8).unwrap();
    assert!((restored - best_val).abs() < 1e-9, "{restored} vs {best_val}");

    let probs = predict_proba(&m, &[xv], &[None], 7).unwrap();
    assert_eq!(probs.shape(), &[30, 2]);
    for row in probs.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
    let correct = (0..30).filter(|&i| (probs.at(i, 1) > 0.5) == (yv[i] == 1)).count();
    assert!(correct >= 27, "{correct}/30");
}

#[test]
fn early_stopping_caps_epochs() {
    let (x, y) = clusters(40, 3, 5);
    let (xv, yv) = clusters(20, 3, 6);
    let mut m = ftt(3, 0);
    let cfg = TrainConfig {
        patience: 2,
        finetune_max_epochs: 200,
        ..train_cfg(200)
    };
    let report = finetune(&mut m, &[x], &y, &[xv], &yv, &cfg, 1).unwrap();
    let best = report.best_epoch.unwrap();
    assert!(report.epochs_run == 200 || report.epochs_run == best + 2);
}

#[test]
fn finetune_rejects_bad_labels() {
    let (x, mut y) = clusters(10, 3, 7);
    y[0] = 5;
    let mut m = ftt(3, 0);
    let err = finetune(&mut m, &[x.clone()], &y, &[x], &y, &train_cfg(1), 0).unwrap_err();
    assert!(matches!(err.root(), Error::Index(_)));
}

#[test]
fn unmatched_pretraining_equals_separate_runs() {
    let (xa, _) = clusters(30, 3, 8);
    let (xb, _) = clusters(24, 5, 9);
    let rng = Rng::new(0, "init");
    let a = FtTransformer::<f64>::new(config(3), &mut rng.fork("arm_a")).unwrap();
    let b = FtTransformer::<f64>::new(config(5), &mut rng.fork("arm_b")).unwrap();
    let mut duo = DuoFtt::new(a.clone(), b.clone()).unwrap();
    let cfg = train_cfg(2);
    let (ra, rb) = pretrain_unmatched(&mut duo, &xa, &xb, &cfg, 3).unwrap();

    let mut alone_a = Model::Ftt(a);
    let sa = pretrain(&mut alone_a, &[xa], PretrainObjective::Mtr, &cfg, 3).unwrap();
    let mut alone_b = Model::Ftt(b);
    let sb = pretrain(&mut alone_b, &[xb], PretrainObjective::Mtr, &cfg, 3).unwrap();
    assert_eq!(ra.train_loss, sa.train_loss);
    assert_eq!(rb.train_loss, sb.train_loss);
    assert_eq!(Model::Ftt(duo.arm_a).snapshot(), alone_a.snapshot());
    assert_eq!(Model::Ftt(duo.arm_b).snapshot(), alone_b.snapshot());
}

#[test]
fn joint_and_clip_pretraining_run_on_a_duo() {
    let (xa, _) = clusters(32, 3, 10);
    let (xb, _) = clusters(32, 4, 11);
    for objective in [PretrainObjective::Mtr, PretrainObjective::Clip] {
        let rng = Rng::new(1, "init");
        let a = FtTransformer::<f64>::new(config(3), &mut rng.fork("arm_a")).unwrap();
        let b = FtTransformer::<f64>::new(config(4), &mut rng.fork("arm_b")).unwrap();
        let mut m = Model::Duo(DuoFtt::new(a, b).unwrap());
        let r = pretrain(&mut m, &[xa.clone(), xb.clone()], objective, &train_cfg(4), 0).unwrap();
        assert!(r.train_loss.iter().all(|l| l.is_finite()));
        assert!(r.train_loss[3] < r.train_loss[0], "{objective:?}: {:?}", r.train_loss);
    }
    let mut m = ftt(3, 0);
    assert!(pretrain(&mut m, &[xa], PretrainObjective::Clip, &train_cfg(1), 0).is_err());
}
