use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{
    impute, join_modalities, load_table, make_split, make_unmatched_split, synthesize_missing, ImputeStrategy,
    MissingnessConfig, PcaModel, SplitConfig, SplitPlan, Standardizer, TabularDataset, TrainStats,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{save_checkpoint, DuoFtt, FtTransformer, FttConfig, Mlp, MlpConfig, Model};
use crate::numerics::{Precision, Real, Rng, Tensor};
use crate::training::{finetune, predict_proba, pretrain, pretrain_unmatched, PretrainObjective, TrainConfig};

use super::config::{ExperimentConfig, ExperimentKind};
use super::hpo::TrialParams;
use super::report::{emit_report, write_results, write_trials, ResultRow, TrialRecord, RESULTS_FILE, TRIALS_FILE};

const EVAL_BATCH: usize = 512;

/// Everything one experiment produced.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
}

impl ExperimentOutput {
    /// Mean accuracy over seeds of one model label.
    pub fn mean_accuracy(&self, model: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.model == model).map(|r| r.metrics.accuracy).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model.clone());
            }
        }
        out
    }

    /// Writes `results.csv` (and `hpo_trials.csv`) and the derived report files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_results(&dir.join(RESULTS_FILE), &self.rows)?;
        if !self.trials.is_empty() {
            write_trials(&dir.join(TRIALS_FILE), &self.trials)?;
        }
        emit_report(dir)?;
        Ok(())
    }
}

/// Standardised (and optionally PCA-reduced) views for one seed's split.
/// Statistics are fitted on the training rows only.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub plan: SplitPlan,
    pub views: Vec<Tensor<f64>>,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub scalers: Vec<Standardizer>,
    pub pcas: Vec<Option<PcaModel>>,
}

impl SeedData {
    pub fn prepare(datasets: &[TabularDataset], seed: u64, label_fraction: f64, pca_components: usize) -> Result<Self> {
        let first = &datasets[0];
        let n_classes = first.n_classes();
        let split_cfg = SplitConfig {
            label_fraction,
            ..SplitConfig::default()
        };
        let plan = make_split(&first.y, n_classes, seed, &split_cfg)?;
        let mut views = Vec::new();
        let mut scalers = Vec::new();
        let mut pcas = Vec::new();
        for ds in datasets {
            let train = ds.x.select_rows(&plan.train_idx);
            let scaler = Standardizer::fit(&train)?;
            let mut x = scaler.apply(&ds.x)?;
            let pca = if pca_components > 0 {
                let p = PcaModel::fit(&scaler.apply(&train)?, pca_components)?;
                x = p.transform(&x)?;
                Some(p)
            } else {
                None
            };
            views.push(x);
            scalers.push(scaler);
            pcas.push(pca);
        }
        Ok(SeedData {
            plan,
            views,
            y: first.y.clone(),
            n_classes,
            scalers,
            pcas,
        })
    }

    pub fn rows<T: Real>(&self, view: usize, idx: &[usize]) -> Tensor<T> {
        self.views[view].select_rows(idx).cast()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    pub fn n_features(&self, view: usize) -> usize {
        self.views[view].cols()
    }
}

fn ftt_config(base: &FttConfig, n_features: usize, n_classes: usize) -> FttConfig {
    FttConfig {
        n_features,
        n_classes,
        ..base.clone()
    }
}

fn new_ftt<T: Real>(base: &FttConfig, data: &SeedData, view: usize, rng: &mut Rng) -> Result<FtTransformer<T>> {
    FtTransformer::new(ftt_config(base, data.n_features(view), data.n_classes), rng)
}

fn new_duo<T: Real>(base: &FttConfig, data: &SeedData, seed: u64) -> Result<DuoFtt<T>> {
    let init = Rng::new(seed, "init");
    let a = new_ftt(base, data, 0, &mut init.fork("arm_a"))?;
    let b = new_ftt(base, data, 1, &mut init.fork("arm_b"))?;
    DuoFtt::new(a, b)
}

/// Finetunes on the labelled rows of the given views with early stopping on
/// the validation rows.
fn finetune_on<T: Real>(
    model: &mut Model<T>,
    data: &SeedData,
    views: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let p = &data.plan;
    let tr: Vec<Tensor<T>> = views.iter().map(|&v| data.rows(v, &p.labelled_idx)).collect();
    let va: Vec<Tensor<T>> = views.iter().map(|&v| data.rows(v, &p.val_idx)).collect();
    let report = finetune(
        model,
        &tr,
        &data.labels(&p.labelled_idx),
        &va,
        &data.labels(&p.val_idx),
        cfg,
        seed,
    )?;
    let best = report.best_epoch.unwrap_or(report.epochs_run).max(1);
    Ok(report.val_loss.get(best - 1).copied().unwrap_or(f64::INFINITY))
}

fn pretrain_on<T: Real>(
    model: &mut Model<T>,
    data: &SeedData,
    views: &[usize],
    rows: &[usize],
    objective: PretrainObjective,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<()> {
    let x: Vec<Tensor<T>> = views.iter().map(|&v| data.rows(v, rows)).collect();
    pretrain(model, &x, objective, cfg, seed)?;
    Ok(())
}

fn evaluate<T: Real>(
    model: &Model<T>,
    test_views: &[Tensor<f64>],
    forced: &[Option<&[bool]>],
    y: &[usize],
    seed: u64,
) -> Result<MetricsReport> {
    let v: Vec<Tensor<T>> = test_views.iter().map(|t| t.cast()).collect();
    let probs = predict_proba(model, &v, forced, EVAL_BATCH)?;
    MetricsReport::from_probs(y, &probs, seed)
}

fn evaluate_clean<T: Real>(model: &Model<T>, data: &SeedData, views: &[usize], seed: u64) -> Result<MetricsReport> {
    let idx = &data.plan.test_idx;
    let test: Vec<Tensor<f64>> = views.iter().map(|&v| data.views[v].select_rows(idx)).collect();
    let forced = vec![None; views.len()];
    evaluate(model, &test, &forced, &data.labels(idx), seed)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    experiment: String,
    out: ExperimentOutput,
}

impl Ctx<'_> {
    fn push(&mut self, model: impl Into<String>, seed: u64, metrics: MetricsReport) {
        let model = model.into();
        log::info!(
            "{} seed={seed} model={model} accuracy={:.4}",
            self.experiment,
            metrics.accuracy
        );
        self.out.rows.push(ResultRow {
            experiment: self.experiment.clone(),
            model,
            seed,
            metrics,
        });
    }
}

fn stage<T>(r: Result<T>, seed: u64, stage: &str) -> Result<T> {
    r.map_err(|e| e.context(format!("seed {seed}, {stage}")))
}

/// Plain and MTR-pretrained FTT on one dataset.
fn unimodal_seed<T: Real>(ctx: &mut Ctx<'_>, data: &SeedData, seed: u64, suffix: &str, with_plain: bool) -> Result<()> {
    let cfg = ctx.cfg;
    let init = new_ftt::<T>(&cfg.model, data, 0, &mut Rng::new(seed, "init"))?;
    if with_plain {
        let mut plain = Model::Ftt(init.clone());
        stage(finetune_on(&mut plain, data, &[0], &cfg.train, seed), seed, "finetune ftt")?;
        let m = stage(evaluate_clean(&plain, data, &[0], seed), seed, "evaluate ftt")?;
        ctx.push(format!("ftt{suffix}"), seed, m);
    }
    let mut pre = Model::Ftt(init);
    stage(
        pretrain_on(&mut pre, data, &[0], &data.plan.train_idx, PretrainObjective::Mtr, &cfg.train, seed),
        seed,
        "pretrain ftt+mtr",
    )?;
    stage(finetune_on(&mut pre, data, &[0], &cfg.train, seed), seed, "finetune ftt+mtr")?;
    let m = stage(evaluate_clean(&pre, data, &[0], seed), seed, "evaluate ftt+mtr")?;
    ctx.push(format!("ftt+mtr{suffix}"), seed, m);
    Ok(())
}

fn mlp_train_config(mlp: &MlpConfig, base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: mlp.learning_rate,
        finetune_learning_rate: None,
        batch_size: mlp.batch_size,
        finetune_max_epochs: mlp.epochs,
        finetune_mask_rate: 0.0,
        ..base.clone()
    }
}

fn mlp_seed<T: Real>(ctx: &mut Ctx<'_>, data: &SeedData, seed: u64) -> Result<()> {
    let cfg = ctx.cfg;
    let mut model = Model::Mlp(Mlp::<T>::new(
        cfg.mlp.clone(),
        data.n_features(0),
        data.n_classes,
        &mut Rng::new(seed, "init"),
    )?);
    stage(
        finetune_on(&mut model, data, &[0], &mlp_train_config(&cfg.mlp, &cfg.train), seed),
        seed,
        "finetune mlp",
    )?;
    let m = stage(evaluate_clean(&model, data, &[0], seed), seed, "evaluate mlp")?;
    ctx.push("mlp", seed, m);
    Ok(())
}

fn run_unimodal<T: Real>(ctx: &mut Ctx<'_>, ds: &[TabularDataset]) -> Result<()> {
    let cfg = ctx.cfg;
    for &seed in &cfg.seeds {
        let data = stage(SeedData::prepare(ds, seed, cfg.label_fraction, cfg.pca_components), seed, "prepare")?;
        unimodal_seed::<T>(ctx, &data, seed, "", true)?;
        if cfg.include_mlp {
            mlp_seed::<T>(ctx, &data, seed)?;
        }
    }
    Ok(())
}

fn run_mask_sweep<T: Real>(ctx: &mut Ctx<'_>, ds: &[TabularDataset]) -> Result<()> {
    let cfg = ctx.cfg;
    for &seed in &cfg.seeds {
        let data = stage(SeedData::prepare(ds, seed, cfg.label_fraction, cfg.pca_components), seed, "prepare")?;
        for &rate in &cfg.mask_rates {
            let mut model_cfg = cfg.model.clone();
            model_cfg.mask_rate = rate;
            let mut pre = Model::Ftt(new_ftt::<T>(&model_cfg, &data, 0, &mut Rng::new(seed, "init"))?);
            stage(
                pretrain_on(&mut pre, &data, &[0], &data.plan.train_idx, PretrainObjective::Mtr, &cfg.train, seed),
                seed,
                "pretrain",
            )?;
            stage(finetune_on(&mut pre, &data, &[0], &cfg.train, seed), seed, "finetune")?;
            let m = stage(evaluate_clean(&pre, &data, &[0], seed), seed, "evaluate")?;
            ctx.push(format!("ftt+mtr@pm={rate}"), seed, m);
        }
    }
    Ok(())
}

fn run_label_sweep<T: Real>(ctx: &mut Ctx<'_>, ds: &[TabularDataset]) -> Result<()> {
    let cfg = ctx.cfg;
    for &seed in &cfg.seeds {
        for &lf in &cfg.label_fractions {
            let data = stage(SeedData::prepare(ds, seed, lf, cfg.pca_components), seed, "prepare")?;
            unimodal_seed::<T>(ctx, &data, seed, &format!("@lf={lf}"), true)?;
        }
    }
    Ok(())
}

/// Test rows of `ds` with synthetic missingness, imputed by `strategy` and
/// standardised with the training statistics.
fn missing_test_view(
    ds: &TabularDataset,
    data: &SeedData,
    stats: &TrainStats,
    miss: &MissingnessConfig,
    strategy: ImputeStrategy,
    seed: u64,
) -> Result<(Tensor<f64>, Vec<bool>)> {
    let raw = ds.x.select_rows(&data.plan.test_idx);
    let s = synthesize_missing(&raw, miss, seed)?;
    let filled = impute(&s.x, &s.mask, strategy, stats)?;
    Ok((data.scalers[0].apply(&filled)?, s.mask))
}

fn run_missingness<T: Real>(ctx: &mut Ctx<'_>, ds: &[TabularDataset]) -> Result<()> {
    let cfg = ctx.cfg;
    let table = &ds[0];
    for &seed in &cfg.seeds {
        let data = stage(SeedData::prepare(ds, seed, cfg.label_fraction, 0), seed, "prepare")?;
        let stats = TrainStats::fit(&table.x.select_rows(&data.plan.train_idx));
        let y_test = data.labels(&data.plan.test_idx);
        let init = new_ftt::<T>(&cfg.model, &data, 0, &mut Rng::new(seed, "init"))?;

        let mut plain = Model::Ftt(init.clone());
        stage(finetune_on(&mut plain, &data, &[0], &cfg.train, seed), seed, "finetune plain")?;

        let aug_cfg = TrainConfig {
            finetune_mask_rate: cfg.augment_mask_rate,
            ..cfg.train.clone()
        };
        let mut aug = Model::Ftt(init.clone());
        stage(finetune_on(&mut aug, &data, &[0], &aug_cfg, seed), seed, "finetune mtr-augmented")?;

        let mut pre = Model::Ftt(init.clone());
        stage(
            pretrain_on(&mut pre, &data, &[0], &data.plan.train_idx, PretrainObjective::Mtr, &cfg.train, seed),
            seed,
            "pretrain",
        )?;
        stage(finetune_on(&mut pre, &data, &[0], &aug_cfg, seed), seed, "finetune pretrained")?;

        for &p_m in &cfg.missing_probs {
            let miss = MissingnessConfig {
                p_incomplete: cfg.missingness.p_incomplete,
                p_missing: p_m,
            };
            let (mean_x, _) = missing_test_view(table, &data, &stats, &miss, ImputeStrategy::Mean, seed)?;
            let m = evaluate(&plain, &[mean_x], &[None], &y_test, seed)?;
            ctx.push(format!("ftt/mean@pM={p_m}"), seed, m);
            let (min_x, _) = missing_test_view(table, &data, &stats, &miss, ImputeStrategy::Minimum, seed)?;
            let m = evaluate(&plain, &[min_x], &[None], &y_test, seed)?;
            ctx.push(format!("ftt/min@pM={p_m}"), seed, m);
            let (tok_x, mask) =
                missing_test_view(table, &data, &stats, &miss, ImputeStrategy::MaskTokenPassthrough, seed)?;
            let m = evaluate(&aug, std::slice::from_ref(&tok_x), &[Some(&mask)], &y_test, seed)?;
            ctx.push(format!("ftt+mtr/mask@pM={p_m}"), seed, m);
            let m = evaluate(&pre, &[tok_x], &[Some(&mask)], &y_test, seed)?;
            ctx.push(format!("ftt+pre+mtr/mask@pM={p_m}"), seed, m);
        }

        let (tok_x, mask) = missing_test_view(
            table,
            &data,
            &stats,
            &cfg.missingness,
            ImputeStrategy::MaskTokenPassthrough,
            seed,
        )?;
        for &rate in &cfg.train_mask_rates {
            let c = TrainConfig {
                finetune_mask_rate: rate,
                ..cfg.train.clone()
            };
            let mut m = Model::Ftt(init.clone());
            stage(finetune_on(&mut m, &data, &[0], &c, seed), seed, "finetune train-rate grid")?;
            let r = evaluate(&m, std::slice::from_ref(&tok_x), &[Some(&mask)], &y_test, seed)?;
            ctx.push(format!("ftt/mask@train_pm={rate}"), seed, r);
        }
    }
    Ok(())
}

/// Models compared by the two-view experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuoVariant {
    /// Fused model, no pretraining: `duo`.
    Plain,
    /// Fused model, MTR pretraining on all training rows: `duo+mtr`.
    Joint,
    /// Fused model, CLIP pretraining: `duo+clip`.
    Clip,
    /// MTR pretraining on the unlabelled matched rows: `duo+matched`.
    Matched,
    /// Each arm pretrained on its own half of the unlabelled rows: `duo+unmatched`.
    Unmatched,
    /// Arms of an MTR-pretrained fused model, finetuned alone: `arm_a+duo_mtr`, `arm_b+duo_mtr`.
    ExtractedArms,
    /// Single-view FTTs with MTR pretraining: `ftt_a+mtr`, `ftt_b+mtr`.
    SingleArms,
    /// One FTT over the concatenated views, MTR-pretrained: `wide+mtr`.
    Wide,
    /// The same without pretraining: `wide`.
    WidePlain,
}

impl DuoVariant {
    pub fn for_kind(kind: ExperimentKind) -> Vec<DuoVariant> {
        use DuoVariant::*;
        match kind {
            ExperimentKind::DuoJoint => vec![Plain, Joint],
            ExperimentKind::DuoClip => vec![Plain, Joint, Clip],
            ExperimentKind::DuoUnmatched => vec![Plain, Matched, Unmatched],
            ExperimentKind::CrossOmics => vec![ExtractedArms, SingleArms],
            ExperimentKind::DuoVsWide => vec![Plain, Joint, WidePlain, Wide],
            _ => Vec::new(),
        }
    }
}

fn wide_data(data: &SeedData) -> Result<SeedData> {
    let mut wide = data.clone();
    wide.views = vec![data.views[0].hconcat(&data.views[1])?];
    Ok(wide)
}

fn duo_seed<T: Real>(ctx: &mut Ctx<'_>, data: &SeedData, seed: u64, variants: &[DuoVariant]) -> Result<()> {
    let cfg = ctx.cfg;
    let tc = &cfg.train;
    let both = [0usize, 1];
    let init = new_duo::<T>(&cfg.model, data, seed)?;
    let fused = |ctx: &mut Ctx<'_>, name: &str, mut model: Model<T>| -> Result<()> {
        stage(finetune_on(&mut model, data, &both, tc, seed), seed, &format!("finetune {name}"))?;
        let m = stage(evaluate_clean(&model, data, &both, seed), seed, &format!("evaluate {name}"))?;
        ctx.push(name, seed, m);
        Ok(())
    };
    let mut joint: Option<Model<T>> = None;
    let get_joint = |joint: &mut Option<Model<T>>| -> Result<Model<T>> {
        if joint.is_none() {
            let mut m = Model::Duo(init.clone());
            stage(
                pretrain_on(&mut m, data, &both, &data.plan.train_idx, PretrainObjective::Mtr, tc, seed),
                seed,
                "pretrain duo+mtr",
            )?;
            *joint = Some(m);
        }
        Ok(joint.clone().unwrap())
    };
    for &v in variants {
        match v {
            DuoVariant::Plain => fused(ctx, "duo", Model::Duo(init.clone()))?,
            DuoVariant::Joint => {
                let m = get_joint(&mut joint)?;
                fused(ctx, "duo+mtr", m)?
            }
            DuoVariant::Clip => {
                let mut m = Model::Duo(init.clone());
                stage(
                    pretrain_on(&mut m, data, &both, &data.plan.train_idx, PretrainObjective::Clip, tc, seed),
                    seed,
                    "pretrain duo+clip",
                )?;
                fused(ctx, "duo+clip", m)?
            }
            DuoVariant::Matched => {
                let mut pool = [data.plan.set1_idx.clone(), data.plan.set2_idx.clone()].concat();
                pool.sort_unstable();
                let mut m = Model::Duo(init.clone());
                stage(
                    pretrain_on(&mut m, data, &both, &pool, PretrainObjective::Mtr, tc, seed),
                    seed,
                    "pretrain duo+matched",
                )?;
                fused(ctx, "duo+matched", m)?
            }
            DuoVariant::Unmatched => {
                let mut duo = init.clone();
                let a: Tensor<T> = data.rows(0, &data.plan.set1_idx);
                let b: Tensor<T> = data.rows(1, &data.plan.set2_idx);
                stage(pretrain_unmatched(&mut duo, &a, &b, tc, seed), seed, "pretrain duo+unmatched")?;
                fused(ctx, "duo+unmatched", Model::Duo(duo))?
            }
            DuoVariant::ExtractedArms => {
                let Model::Duo(pre) = get_joint(&mut joint)? else { unreachable!() };
                for (view, arm, name) in [(0, crate::model::Arm::A, "arm_a"), (1, crate::model::Arm::B, "arm_b")] {
                    let mut m = Model::Ftt(pre.extract_arm(arm, &mut Rng::new(seed, "head")));
                    stage(finetune_on(&mut m, data, &[view], tc, seed), seed, "finetune extracted arm")?;
                    let r = stage(evaluate_clean(&m, data, &[view], seed), seed, "evaluate extracted arm")?;
                    ctx.push(format!("{name}+duo_mtr"), seed, r);
                }
            }
            DuoVariant::SingleArms => {
                for (view, arm, name) in [(0, &init.arm_a, "ftt_a"), (1, &init.arm_b, "ftt_b")] {
                    let mut m = Model::Ftt(arm.clone());
                    stage(
                        pretrain_on(&mut m, data, &[view], &data.plan.train_idx, PretrainObjective::Mtr, tc, seed),
                        seed,
                        "pretrain single arm",
                    )?;
                    stage(finetune_on(&mut m, data, &[view], tc, seed), seed, "finetune single arm")?;
                    let r = stage(evaluate_clean(&m, data, &[view], seed), seed, "evaluate single arm")?;
                    ctx.push(format!("{name}+mtr"), seed, r);
                }
            }
            DuoVariant::Wide | DuoVariant::WidePlain => {
                let wide = wide_data(data)?;
                let mut m = Model::Ftt(new_ftt::<T>(&cfg.model, &wide, 0, &mut Rng::new(seed, "init").fork("wide"))?);
                let name = if v == DuoVariant::Wide {
                    stage(
                        pretrain_on(&mut m, &wide, &[0], &wide.plan.train_idx, PretrainObjective::Mtr, tc, seed),
                        seed,
                        "pretrain wide",
                    )?;
                    "wide+mtr"
                } else {
                    "wide"
                };
                stage(finetune_on(&mut m, &wide, &[0], tc, seed), seed, "finetune wide")?;
                let r = stage(evaluate_clean(&m, &wide, &[0], seed), seed, "evaluate wide")?;
                ctx.push(name, seed, r);
            }
        }
    }
    Ok(())
}

/// Joins two tables on sample id and checks there is enough left to split.
pub fn join_checked(a: &TabularDataset, b: &TabularDataset) -> Result<(TabularDataset, TabularDataset)> {
    let (a, b) = join_modalities(a, b)?;
    let c = a.n_classes();
    let present = a.class_counts().iter().filter(|&&n| n > 0).count();
    if present < 2 || a.n_samples() < 10 * c {
        return Err(Error::DatasetTooSmall(format!(
            "joined data has {} samples over {present} classes; need >= 2 classes and >= {} samples",
            a.n_samples(),
            10 * c
        )));
    }
    Ok((a, b))
}

fn run_duo<T: Real>(ctx: &mut Ctx<'_>, ds: &[TabularDataset], variants: &[DuoVariant]) -> Result<()> {
    let cfg = ctx.cfg;
    let (a, b) = join_checked(&ds[0], &ds[1])?;
    let pair = [a, b];
    for &seed in &cfg.seeds {
        let mut data = stage(
            SeedData::prepare(&pair, seed, cfg.label_fraction, cfg.pca_components),
            seed,
            "prepare",
        )?;
        if variants.iter().any(|v| matches!(v, DuoVariant::Matched | DuoVariant::Unmatched)) {
            data.plan = make_unmatched_split(&data.plan, &data.y, data.n_classes)?;
        }
        duo_seed::<T>(ctx, &data, seed, variants)?;
    }
    Ok(())
}

fn run_hpo<T: Real>(ctx: &mut Ctx<'_>, ds: &[TabularDataset]) -> Result<()> {
    let cfg = ctx.cfg;
    let spec = &cfg.hpo;
    for &seed in &cfg.seeds {
        let data = stage(SeedData::prepare(ds, seed, cfg.label_fraction, cfg.pca_components), seed, "prepare")?;
        let mut rng = Rng::new(seed, "hpo");
        let mut best: Option<(f64, Model<T>)> = None;
        for trial in 0..spec.n_trials {
            let params = spec.sample(&cfg.model, &mut rng);
            let init = Rng::new(seed, "init").fork(&format!("trial_{trial}"));
            let (mut model, tc) = match &params {
                TrialParams::Ftt {
                    config,
                    learning_rate,
                    weight_decay,
                } => (
                    Model::Ftt(new_ftt::<T>(config, &data, 0, &mut init.clone())?),
                    TrainConfig {
                        learning_rate: *learning_rate,
                        finetune_learning_rate: None,
                        weight_decay: *weight_decay,
                        ..cfg.train.clone()
                    },
                ),
                TrialParams::Mlp { config } => (
                    Model::Mlp(Mlp::new(config.clone(), data.n_features(0), data.n_classes, &mut init.clone())?),
                    mlp_train_config(config, &cfg.train),
                ),
            };
            let report = {
                let p = &data.plan;
                let tr = vec![data.rows::<T>(0, &p.labelled_idx)];
                let va = vec![data.rows::<T>(0, &p.val_idx)];
                stage(
                    finetune(
                        &mut model,
                        &tr,
                        &data.labels(&p.labelled_idx),
                        &va,
                        &data.labels(&p.val_idx),
                        &tc,
                        seed,
                    ),
                    seed,
                    &format!("hpo trial {trial}"),
                )?
            };
            let best_epoch = report.best_epoch.unwrap_or(1);
            let val_loss = report.val_loss.get(best_epoch - 1).copied().unwrap_or(f64::INFINITY);
            ctx.out.trials.push(TrialRecord {
                seed,
                trial,
                val_loss,
                best_epoch,
                params: serde_json::to_string(&params).map_err(|e| Error::Config(e.to_string()))?,
            });
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, model));
            }
        }
        let (_, model) = best.expect("at least one trial");
        std::fs::create_dir_all(&cfg.out_dir)?;
        save_checkpoint(&cfg.out_dir.join(format!("hpo_best_seed{seed}.ckpt")), &model, seed)?;
        let m = evaluate_clean(&model, &data, &[0], seed)?;
        let label = match spec.model {
            super::hpo::HpoModel::Ftt => "ftt(hpo)",
            super::hpo::HpoModel::Mlp => "mlp(hpo)",
        };
        ctx.push(label, seed, m);
    }
    Ok(())
}

fn dispatch<T: Real>(cfg: &ExperimentConfig, ds: &[TabularDataset], variants: Option<&[DuoVariant]>) -> Result<ExperimentOutput> {
    let mut ctx = Ctx {
        cfg,
        experiment: cfg.experiment_name(),
        out: ExperimentOutput::default(),
    };
    match cfg.kind {
        ExperimentKind::Unimodal => run_unimodal::<T>(&mut ctx, ds)?,
        ExperimentKind::MaskRateSweep => run_mask_sweep::<T>(&mut ctx, ds)?,
        ExperimentKind::LabelFractionSweep => run_label_sweep::<T>(&mut ctx, ds)?,
        ExperimentKind::Missingness => run_missingness::<T>(&mut ctx, ds)?,
        ExperimentKind::Hpo => run_hpo::<T>(&mut ctx, ds)?,
        kind => {
            let default = DuoVariant::for_kind(kind);
            run_duo::<T>(&mut ctx, ds, variants.unwrap_or(&default))?
        }
    }
    Ok(ctx.out)
}

/// Runs an experiment on in-memory tables (one, or two for the two-view kinds).
/// `variants` overrides the model list of the two-view kinds.
pub fn run_on_data(
    cfg: &ExperimentConfig,
    datasets: &[TabularDataset],
    variants: Option<&[DuoVariant]>,
) -> Result<ExperimentOutput> {
    let need = if cfg.kind.is_duo() { 2 } else { 1 };
    if datasets.len() != need {
        return Err(Error::Config(format!(
            "{} needs {need} table(s), got {}",
            cfg.kind.name(),
            datasets.len()
        )));
    }
    let mut checked = cfg.clone();
    checked.data = vec![Default::default(); need];
    checked.validate()?;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(cfg, datasets, variants),
        Precision::F64 => dispatch::<f64>(cfg, datasets, variants),
    }
}

/// Like [`run_on_data`], with seeds spread over up to `threads` workers.
/// Output rows keep seed order, so results do not depend on `threads`.
pub fn run_on_data_threads(
    cfg: &ExperimentConfig,
    datasets: &[TabularDataset],
    variants: Option<&[DuoVariant]>,
    threads: usize,
) -> Result<ExperimentOutput> {
    let workers = threads.min(cfg.seeds.len());
    if workers <= 1 {
        return run_on_data(cfg, datasets, variants);
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ExperimentOutput>>>> = cfg.seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cfg.seeds.len() {
                    break;
                }
                let one = ExperimentConfig {
                    seeds: vec![cfg.seeds[i]],
                    ..cfg.clone()
                };
                *slots[i].lock().unwrap() = Some(run_on_data(&one, datasets, variants));
            });
        }
    });
    let mut out = ExperimentOutput::default();
    for slot in slots {
        let part = slot.into_inner().unwrap().expect("every seed is claimed by a worker")?;
        out.rows.extend(part.rows);
        out.trials.extend(part.trials);
    }
    Ok(out)
}

/// Loads the configured tables, runs the experiment and writes its CSVs to
/// `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_threads(cfg, 1)
}

pub fn run_experiment_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    cfg.check_paths()?;
    let datasets = cfg
        .data
        .iter()
        .map(|p| load_table(p, &cfg.label_column, None).map_err(|e| e.context(p.display().to_string())))
        .collect::<Result<Vec<_>>>()?;
    let out = run_on_data_threads(cfg, &datasets, None, threads)?;
    out.write(&cfg.out_dir)?;
    Ok(out)
}
