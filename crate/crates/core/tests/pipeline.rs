use nkm::analysis::{export_latents, feature_importance, ImportanceConfig};
use nkm::dataset::{generate_synthetic, LongitudinalDataset, SynthConfig};
use nkm::model::{AblationFlags, NkmModel};
use nkm::training::pipeline::{prepare_folds, run_baselines, run_setup};
use nkm::training::trainer::train;
use nkm::training::{AblationTable, FitConfig};

fn small_cohort(seed: u64) -> LongitudinalDataset {
    let cfg = SynthConfig {
        n_subjects: 40,
        visits_per_subject: 6,
        ..Default::default()
    };
    generate_synthetic(&cfg, seed).unwrap().0
}

fn quick() -> FitConfig {
    let mut cfg = FitConfig::desk();
    cfg.train.epochs = 3;
    cfg
}

#[test]
fn cv_and_baselines_share_folds() {
    let ds = small_cohort(1);
    let cfg = quick();
    let (_, folds) = prepare_folds(&ds, &cfg, 4, 1).unwrap();
    let (nkm, outcomes) = run_setup(&folds, &cfg, "full", AblationFlags::default(), 1).unwrap();
    let (edmd, linear, models) = run_baselines(&folds, &cfg_edmd(), 1).unwrap();
    assert_eq!(nkm.folds.len(), 4);
    assert_eq!(models.len(), 4);
    for (a, b) in nkm.folds.iter().zip(&edmd.folds) {
        assert_eq!(a.metrics.n_windows, b.metrics.n_windows);
    }
    assert!(linear.folds.iter().all(|f| f.spectral_norm.is_none()));
    assert!(outcomes
        .iter()
        .all(|o| o.report.projected && o.report.spectral_norm <= 0.95 + 1e-8));
    assert!(nkm.mean.pearson.is_finite() && edmd.mean.pearson.is_finite());
}

fn cfg_edmd() -> nkm::edmd::EdmdConfig {
    nkm::edmd::EdmdConfig {
        n_centers: 20,
        ..Default::default()
    }
}

#[test]
fn cv_is_reproducible() {
    let ds = small_cohort(2);
    let cfg = quick();
    let run = || {
        let (_, folds) = prepare_folds(&ds, &cfg, 3, 9).unwrap();
        run_setup(&folds, &cfg, "full", AblationFlags::default(), 9)
            .unwrap()
            .0
    };
    assert_eq!(run(), run());
}

#[test]
fn ablation_csv_has_one_row_per_setup_and_target() {
    let ds = small_cohort(3);
    let cfg = quick();
    let (_, folds) = prepare_folds(&ds, &cfg, 3, 3).unwrap();
    let rows = nkm::training::ablation_setups()
        .into_iter()
        .take(2)
        .map(|(name, flags)| run_setup(&folds, &cfg, name, flags, 3).unwrap().0)
        .collect();
    let table = AblationTable { rows };
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(csv.starts_with("setup,target,pearson,spearman,mae,rmse\n"));
    assert!(table.render().lines().nth(1).unwrap().starts_with("full"));
    assert!(table.wins("full", "no control").unwrap() <= 3);
}

#[test]
fn latents_and_importance_run_on_a_trained_model() {
    let ds = small_cohort(4);
    let cfg = quick();
    let (_, folds) = prepare_folds(&ds, &cfg, 3, 4).unwrap();
    let f = &folds[0];
    let mut m = NkmModel::new(&cfg.model, AblationFlags::default(), 4).unwrap();
    train(&mut m, &f.train, &f.val, &cfg, 4).unwrap();
    let table = export_latents(&m, &f.train, &f.val, 5).unwrap();
    assert_eq!(table.rows.len(), f.val.len() * 6);

    let icfg = ImportanceConfig {
        runs: 2,
        ..Default::default()
    };
    let report = feature_importance(
        |train_ws, seed| {
            let mut m = NkmModel::new(&cfg.model, AblationFlags::default(), seed)?;
            train(&mut m, train_ws, &[], &cfg, seed)?;
            Ok(m)
        },
        &ds,
        &icfg,
        4,
    )
    .unwrap();
    assert_eq!(report.beta.len(), cfg.model.groups().len());
    let beta_sum: f64 = report.beta.iter().map(|b| b.1).sum();
    assert!((beta_sum - 1.0).abs() < 1e-9);
    assert!(report
        .features
        .iter()
        .all(|f| (0.0..=1.0).contains(&f.top_frequency)));
}
