use std::collections::BTreeMap;

use tabular_mtr::experiment::{
    emit_report, make_synthetic, read_results, run_on_data, run_on_data_threads, ExperimentConfig, ExperimentKind,
    HpoModel, SynthConfig, SynthKind, RESULTS_FILE,
};
use tabular_mtr::metrics::{aggregate_seeds, METRIC_NAMES};
use tabular_mtr::numerics::Precision;

fn blobs(n: usize, features: usize, classes: usize, noise: f64) -> SynthConfig {
    SynthConfig {
        kind: SynthKind::Blobs,
        n_samples: n,
        n_features: features,
        n_classes: classes,
        noise,
        separation: 3.0,
        ..Default::default()
    }
}

fn small(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind);
    cfg.seeds = vec![0, 1];
    cfg.label_fraction = 0.3;
    cfg.precision = Precision::F64;
    cfg.model.token_dim = 8;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.projection_dims = vec![8, 8];
    cfg.model.attention_dropout = 0.0;
    cfg.model.ffn_dropout = 0.0;
    cfg.train.batch_size = 32;
    cfg.train.learning_rate = 3e-3;
    cfg.train.pretrain_epochs = 2;
    cfg.train.finetune_max_epochs = 4;
    cfg.train.patience = 2;
    cfg
}

#[test]
fn noiseless_blobs_are_learned_perfectly() {
    let ds = make_synthetic(&blobs(200, 5, 4, 0.0)).unwrap();
    let mut distinct: Vec<Vec<u64>> = (0..200).map(|i| ds[0].x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 4, "each class collapses to its mean");

    let mut cfg = small(ExperimentKind::Unimodal);
    cfg.seeds = vec![0];
    cfg.train.pretrain_epochs = 1;
    cfg.train.finetune_max_epochs = 60;
    cfg.train.patience = 60;
    let out = run_on_data(&cfg, &ds, None).unwrap();
    for model in ["ftt", "ftt+mtr"] {
        assert_eq!(out.mean_accuracy(model), Some(1.0), "{model}");
    }
}

#[test]
fn sweep_has_one_row_per_rate_and_seed() {
    let ds = make_synthetic(&blobs(150, 6, 3, 1.0)).unwrap();
    let mut cfg = small(ExperimentKind::MaskRateSweep);
    cfg.mask_rates = vec![0.0, 0.3, 0.9];
    let out = run_on_data(&cfg, &ds, None).unwrap();
    assert_eq!(out.rows.len(), 6);
    assert_eq!(out.models().len(), 3);
    for r in &out.rows {
        assert!(r.model.contains("@pm="), "{}", r.model);
        assert!((0.0..=1.0).contains(&r.metrics.accuracy));
    }
}

#[test]
fn threaded_seeds_match_sequential() {
    let ds = make_synthetic(&blobs(150, 6, 3, 1.0)).unwrap();
    let mut cfg = small(ExperimentKind::Unimodal);
    cfg.seeds = vec![3, 1, 2];
    let seq = run_on_data(&cfg, &ds, None).unwrap();
    let par = run_on_data_threads(&cfg, &ds, None, 2).unwrap();
    assert_eq!(seq.rows, par.rows);
}

#[test]
fn report_matches_seed_aggregation() {
    let ds = make_synthetic(&blobs(150, 6, 3, 1.5)).unwrap();
    let mut cfg = small(ExperimentKind::Unimodal);
    cfg.seeds = vec![0, 1, 2];
    cfg.include_mlp = true;
    let out = run_on_data(&cfg, &ds, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();

    let back = read_results(&dir.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(back.len(), out.rows.len());
    let summary = emit_report(dir.path()).unwrap();

    let mut by_model: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for r in &out.rows {
        by_model.entry(r.model.as_str()).or_default().push(r.metrics.clone());
    }
    assert_eq!(summary.len(), by_model.len() * METRIC_NAMES.len());
    for (model, reports) in by_model {
        let agg = aggregate_seeds(&reports).unwrap();
        for name in METRIC_NAMES {
            let row = summary.iter().find(|s| s.model == model && s.metric == name).unwrap();
            let want = agg.get(name).unwrap();
            assert_eq!((row.mean, row.sd), (want.mean, want.sd), "{model} {name}");
        }
    }
}

#[test]
fn hpo_keeps_the_best_trial() {
    let ds = make_synthetic(&blobs(150, 6, 3, 1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for model in [HpoModel::Ftt, HpoModel::Mlp] {
        let mut cfg = small(ExperimentKind::Hpo);
        cfg.seeds = vec![5];
        cfg.out_dir = dir.path().to_path_buf();
        cfg.hpo.n_trials = 4;
        cfg.hpo.model = model;
        cfg.train.finetune_max_epochs = 3;
        let out = run_on_data(&cfg, &ds, None).unwrap();
        assert_eq!(out.trials.len(), 4);
        assert_eq!(out.rows.len(), 1);
        let mut losses: Vec<f64> = out.trials.iter().map(|t| t.val_loss).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        losses.sort_by(f64::total_cmp);
        let median = (losses[1] + losses[2]) / 2.0;
        assert!(losses[0] <= median);
        assert!(dir.path().join("hpo_best_seed5.ckpt").is_file());
    }
}

#[test]
fn missingness_reports_every_strategy() {
    let ds = make_synthetic(&blobs(150, 6, 3, 1.0)).unwrap();
    let mut cfg = small(ExperimentKind::Missingness);
    cfg.seeds = vec![0];
    cfg.missing_probs = vec![0.0, 0.5];
    cfg.train_mask_rates = vec![0.0, 0.5];
    let out = run_on_data(&cfg, &ds, None).unwrap();
    let models = out.models();
    for want in ["ftt/mean@pM=0.5", "ftt/min@pM=0", "ftt+mtr/mask@pM=0.5", "ftt+pre+mtr/mask@pM=0", "ftt/mask@train_pm=0.5"] {
        assert!(models.iter().any(|m| m == want), "{want} missing from {models:?}");
    }
    assert_eq!(out.rows.len(), 2 * 4 + 2);

    cfg.pca_components = 3;
    assert!(run_on_data(&cfg, &ds, None).is_err());
}

#[test]
fn two_view_kinds_need_two_tables() {
    let ds = make_synthetic(&blobs(100, 4, 2, 1.0)).unwrap();
    let cfg = small(ExperimentKind::DuoJoint);
    assert!(run_on_data(&cfg, &ds, None).is_err());
}
