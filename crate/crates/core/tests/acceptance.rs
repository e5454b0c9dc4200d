//! Acceptance suite. Each criterion runs in isolation and reports one
//! `PASS`/`FAIL` line; the process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nkm::analysis::{
    asymptotic_limit, eps_tilde, geometric_bound, verify_bound, verify_descent, DescentConfig,
};
use nkm::dataset::folds::stratified_kfold;
use nkm::dataset::preprocess::Preprocessor;
use nkm::dataset::schema::N_FEATURES;
use nkm::dataset::{generate_synthetic, write_synthetic, Observation, SynthConfig, Window};
use nkm::edmd::{EdmdConfig, EdmdModel};
use nkm::model::{init_koopman, project_spectral, AblationFlags, ArchConfig, NkmModel};
use nkm::numerics::grad::check_gradients;
use nkm::numerics::linalg::{power_iteration_norm, spectral_norm, svd_small, symmetric_eigen};
use nkm::numerics::Matrix;
use nkm::seeds;
use nkm::training::loss::{koopman_fixed_point, koopman_grad_closed_form};
use nkm::training::pipeline::{complete_windows, prepare_fold, prepare_folds, run_ablation};
use nkm::training::trainer::{evaluate, train};
use nkm::training::{CompositeLoss, EvalOptions, FitConfig, LossConfig};
use nkm::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_windows(n: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Window {
            subject: i,
            subject_id: format!("S{i}"),
            visits: vec![0, 1, 2, 3],
            inputs: (0..3)
                .map(|_| {
                    (0..N_FEATURES)
                        .map(|_| rng.random_range(-1.5..1.5))
                        .collect()
                })
                .collect(),
            target: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            diagnosis: None,
        })
        .collect()
}

fn variants() -> [AblationFlags; 5] {
    let f = AblationFlags::default();
    [
        f,
        AblationFlags {
            no_control: true,
            ..f
        },
        AblationFlags {
            no_temporal_attention: true,
            ..f
        },
        AblationFlags {
            no_feature_attention: true,
            ..f
        },
        AblationFlags {
            no_spectral_reg: true,
            ..f
        },
    ]
}

fn gradient_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let config = ArchConfig {
            d_z: 8,
            n_heads: [1, 2, 4][seed as usize % 3],
            n_res_blocks: 2,
            decoder_layers: 2,
            ..ArchConfig::desk()
        };
        let flags = variants()[seed as usize % 5];
        let mut m = ok(NkmModel::new(&config, flags, seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.store.ids().collect::<Vec<_>>() {
            for v in m.store.value_mut(id).data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        // Push ‖K‖ above ρ so the spectral penalty is active.
        let k = m.net.k;
        let scaled = m.store.value(k).scale(1.3);
        *m.store.value_mut(k) = scaled;
        let ws = random_windows(1 + seed as usize % 4, 100 + seed);
        let loss = LossConfig::default().effective(flags);
        let obj = CompositeLoss::new(&m.net, ws.iter().collect(), &loss, Some(seed));
        for c in ok(check_gradients(&obj, &m.store, 1e-5, 1e-8))? {
            ensure!(
                c.rel_error < 1e-4,
                "seed {seed}, {}: rel error {:.3e}",
                c.name,
                c.rel_error
            );
            worst = worst.max(c.rel_error);
        }
    }
    Ok(format!(
        "20 configurations, worst relative error {worst:.2e}"
    ))
}

fn spectral_machinery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..50usize {
        let n = 2 + (i * 62) / 49;
        let k = Matrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let exact = ok(svd_small(&k))?.sigma_max();
        let est = ok(power_iteration_norm(&k, 50))?;
        ensure!(
            (est - exact).abs() < 1e-4,
            "{n}×{n}: power {est} vs svd {exact}"
        );
        worst = worst.max((est - exact).abs());
        let p = ok(project_spectral(&k, 0.95))?;
        let norm = ok(spectral_norm(&p))?;
        ensure!(norm <= 0.95 + 1e-8, "{n}×{n}: projected norm {norm}");
    }
    for d in [4, 16, 64] {
        let k = ok(init_koopman(d, 0.0, 0.99, 7))?;
        ensure!(
            k == Matrix::identity(d).scale(0.99),
            "init_koopman({d}, σ=0) is not 0.99·I"
        );
    }
    Ok(format!("50 matrices, worst |power − svd| {worst:.2e}"))
}

fn cohort(
    n_subjects: usize,
    visits: usize,
    seed: u64,
) -> (nkm::dataset::LongitudinalDataset, nkm::dataset::SynthTruth) {
    let cfg = SynthConfig {
        n_subjects,
        visits_per_subject: visits,
        ..Default::default()
    };
    generate_synthetic(&cfg, seed).expect("synthetic cohort")
}

fn bound_harness() -> Outcome {
    let (ds, _) = cohort(80, 8, 31);
    let (long, _) = cohort(20, 25, 31);
    let mut cfg = FitConfig::desk();
    cfg.train.epochs = 15;
    let plan = ok(stratified_kfold(&ds, 5, 1))?;
    let fold = ok(prepare_fold(&ds, &plan, 0, &cfg, 31))?;
    let sequences: Vec<Vec<Vec<f64>>> = ok(long
        .subjects
        .iter()
        .map(|s| {
            s.visits
                .iter()
                .map(|v| fold.pre.transform_row(&v.features))
                .collect()
        })
        .collect::<Result<Vec<_>, _>>())?;
    let mut lines = Vec::new();
    for flags in variants().into_iter().filter(|f| !f.no_spectral_reg) {
        let mut m = ok(NkmModel::new(&cfg.model, flags, 5))?;
        let report = ok(train(&mut m, &fold.train, &fold.val, &cfg, 5))?;
        ensure!(report.projected, "{flags:?}: model not projected");
        let b = ok(verify_bound(&m, &sequences, 20))?;
        ensure!(b.pass, "{flags:?}: bound violated: {:?}", b.per_tau);
        lines.push(format!("ε̃={:.3} ‖K‖={:.3}", b.eps_tilde, b.norm_k_svd));
        let mut big = m.clone();
        let k = big.koopman().scale(1.2 / b.norm_k_svd);
        *big.koopman_mut() = k;
        ensure!(
            matches!(verify_bound(&big, &sequences, 20), Err(Error::Domain(_))),
            "no domain error at ‖K‖ = 1.2"
        );
    }
    let edmd = |alpha: f64, include_constant: bool| -> Result<EdmdModel, String> {
        let mut e = EdmdModel::new(
            EdmdConfig {
                n_centers: 30,
                include_constant,
                alpha,
                ..Default::default()
            },
            3,
        );
        ok(e.fit(&fold.train))?;
        Ok(e)
    };
    let stable = edmd(1.0, false)?;
    let q = ok(spectral_norm(ok(stable.koopman())?))?;
    ensure!(q < 1.0, "ridge-regularized EDMD has ‖K‖ = {q}");
    let b = ok(verify_bound(&stable, &sequences, 20))?;
    ensure!(b.pass, "EDMD bound violated: {:?}", b.per_tau);
    lines.push(format!("EDMD ε̃={:.3} ‖K‖={q:.3}", b.eps_tilde));
    for (alpha, constant) in [(0.1, false), (0.1, true)] {
        let e = edmd(alpha, constant)?;
        let q = ok(spectral_norm(ok(e.koopman())?))?;
        ensure!(q >= 1.0, "expected an EDMD fit with ‖K‖ ≥ 1, got {q}");
        ensure!(
            matches!(verify_bound(&e, &sequences, 20), Err(Error::Domain(_))),
            "EDMD with ‖K‖ = {q} did not raise a domain error"
        );
    }
    Ok(lines.join("; "))
}

fn asymptotic_bound() -> Outcome {
    for q in [0.3, 0.5, 0.9] {
        let lim = ok(asymptotic_limit(0.7, q))?;
        let mut last = 0.0;
        for tau in 1..=200 {
            let b = ok(geometric_bound(0.7, q, tau))?;
            ensure!(b >= last, "q={q}: bound decreased at τ={tau}");
            last = b;
        }
        ensure!(
            (last - lim).abs() < 1e-6,
            "q={q}: |bound(200) − limit| = {:.3e}",
            (last - lim).abs()
        );
    }
    let hand = ok(asymptotic_limit(eps_tilde(0.1, 4), 0.5))?;
    ensure!((hand - 0.4).abs() < 1e-12, "hand case gives {hand}");
    Ok(format!(
        "limits reached for q ∈ {{0.3, 0.5, 0.9}}; hand case {hand}"
    ))
}

fn edmd_exactness() -> Outcome {
    let cfg = SynthConfig {
        n_subjects: 30,
        visits_per_subject: 12,
        latent_dim: 4,
        noise_sd: 0.0,
        missing_rate: 0.0,
        drift_sd: 0.0,
        observation: Observation::Identity,
        ..Default::default()
    };
    let (ds, truth) = ok(generate_synthetic(&cfg, 17))?;
    let d = cfg.latent_dim;
    let mut pairs = Vec::new();
    for s in &ds.subjects {
        for t in 1..s.visits.len() {
            pairs.push((
                s.visits[t - 1].features[..d].to_vec(),
                s.visits[t].features[..d].to_vec(),
            ));
        }
    }
    let mut m = EdmdModel::new(
        EdmdConfig {
            n_centers: 0,
            alpha: 0.0,
            ..Default::default()
        },
        1,
    );
    ok(m.fit_dynamics(&pairs))?;
    let k = ok(m.koopman())?;
    let err = ok(k.submatrix(0, 0, d, d).sub(&truth.a))?.frobenius_norm();
    ensure!(err < 1e-8, "‖K_zz − A‖_F = {err:.3e}");
    let mut worst: f64 = 0.0;
    for (s, lat) in truth.latents.iter().enumerate().take(10) {
        let roll = ok(m.rollout(&lat[0], 10))?;
        for t in 0..=10 {
            let e = (0..d)
                .map(|i| (roll[t][i] - lat[t][i]).powi(2))
                .sum::<f64>()
                .sqrt();
            ensure!(e < 1e-6, "subject {s}, step {t}: rollout error {e:.3e}");
            worst = worst.max(e);
        }
    }
    Ok(format!(
        "‖K_zz − A‖_F = {err:.2e}, worst 10-step rollout error {worst:.2e}"
    ))
}

fn preprocessed_windows(n_subjects: usize, seed: u64) -> Result<Vec<Window>, String> {
    let (ds, _) = cohort(n_subjects, 8, seed);
    let all: Vec<usize> = (0..ds.n_subjects()).collect();
    let pre = ok(Preprocessor::fit(&ds, 5, true))?;
    ok(pre.transform_windows(&complete_windows(&ds, &all, 3)))
}

fn fixed_point() -> Outcome {
    let ws = preprocessed_windows(60, 5)?;
    let m = ok(NkmModel::new(
        &ArchConfig::desk(),
        AblationFlags::default(),
        9,
    ))?;
    let loss = LossConfig::default();
    let obj = CompositeLoss::new(&m.net, ws.iter().collect(), &loss, None);
    let pairs = ok(obj.evaluate(
        &m.store,
        EvalOptions {
            grad: false,
            grad_koop_k: false,
            pairs: true,
        },
    ))?
    .pairs
    .expect("requested");
    let k_star = ok(koopman_fixed_point(&pairs))?;
    let g_star = ok(koopman_grad_closed_form(&k_star, &pairs, loss.lambda))?.frobenius_norm();
    ensure!(g_star < 1e-10, "closed-form gradient at K* = {g_star:.3e}");
    let (czz, _, _) = ok(pairs.covariances())?;
    let (eig, _) = ok(symmetric_eigen(&czz))?;
    let (lmax, lmin) = (eig[0], *eig.last().expect("eigenvalues"));
    // Step 1/L for the quadratic λ·L_koop with curvature 2λ·λ_max(Ĉ_zz).
    let step = 1.0 / (2.0 * loss.lambda * lmax);
    let mut k = m.koopman().clone();
    let mut iters = 0;
    let mut dist = ok(k.sub(&k_star))?.frobenius_norm();
    while dist >= 1e-3 && iters < 2_000_000 {
        let g = ok(koopman_grad_closed_form(&k, &pairs, loss.lambda))?;
        ok(k.add_scaled(-step, &g))?;
        iters += 1;
        if iters % 100 == 0 {
            dist = ok(k.sub(&k_star))?.frobenius_norm();
        }
    }
    dist = ok(k.sub(&k_star))?.frobenius_norm();
    ensure!(
        dist < 1e-3,
        "‖K − K*‖_F = {dist:.3e} after {iters} steps (κ(Ĉ_zz) = {:.2e})",
        lmax / lmin
    );
    Ok(format!(
        "‖K − K*‖_F = {dist:.2e} after {iters} steps, κ(Ĉ_zz) = {:.2e}, ‖∇(K*)‖ = {g_star:.1e}",
        lmax / lmin
    ))
}

fn descent() -> Outcome {
    let ws: Vec<Window> = preprocessed_windows(20, 6)?.into_iter().take(32).collect();
    ensure!(ws.len() == 32, "only {} windows", ws.len());
    let loss = LossConfig::default();
    let mut m = ok(NkmModel::new(
        &ArchConfig::desk(),
        AblationFlags::default(),
        4,
    ))?;
    let r = ok(verify_descent(
        &mut m,
        &ws,
        &loss,
        &DescentConfig::default(),
    ))?;
    ensure!(r.pass, "trace not monotone: {:?}", r.trace);
    let mut m = ok(NkmModel::new(
        &ArchConfig::desk(),
        AblationFlags::default(),
        4,
    ))?;
    let control = DescentConfig {
        step: 1e3,
        k_step: 1e3,
        backtracking: false,
        ..Default::default()
    };
    let neg = ok(verify_descent(&mut m, &ws, &loss, &control))?;
    ensure!(
        !neg.pass,
        "negative control unexpectedly passed: {:?}",
        neg.trace
    );
    Ok(format!(
        "loss {:.4} → {:.4} over 50 iterations ({} halvings); negative control fails",
        r.trace[0],
        r.trace.last().expect("trace"),
        r.halvings
    ))
}

fn pipeline_quality() -> Outcome {
    let (ds, _) = generate_synthetic(&SynthConfig::default(), 42).expect("cohort");
    let table = ok(run_ablation(&ds, &FitConfig::desk(), 5, 42))?;
    print!("{}", table.render());
    let full = table.row("full").expect("full row");
    let wins = ok(table.wins("full", "no control"))?;
    ensure!(
        full.mean.pearson >= 0.8,
        "full NKM mean r = {:.4}",
        full.mean.pearson
    );
    ensure!(wins >= 4, "full beats no control in {wins}/5 folds");
    Ok(format!(
        "full r = {:.4}, full > no control in {wins}/5 folds",
        full.mean.pearson
    ))
}

fn protocol_hygiene() -> Outcome {
    let (ds, _) = cohort(120, 6, 8);
    let cfg = FitConfig::desk();
    let (plan, folds) = ok(prepare_folds(&ds, &cfg, 5, 8))?;
    for f in &folds {
        let train_ids: std::collections::HashSet<&str> = f
            .train_subjects
            .iter()
            .chain(&f.val_subjects)
            .map(|&i| ds.subjects[i].id.as_str())
            .collect();
        for &i in &f.test_subjects {
            ensure!(
                !train_ids.contains(ds.subjects[i].id.as_str()),
                "fold {}: subject overlap",
                f.fold
            );
        }
        for w in &f.test {
            ensure!(
                !train_ids.contains(w.subject_id.as_str()),
                "fold {}: test window overlap",
                f.fold
            );
        }
        let (train_idx, _) = plan.split(&ds, f.fold);
        let refit = ok(Preprocessor::fit(
            &ds.select(&train_idx),
            cfg.train.knn_k,
            cfg.train.standardize_targets,
        ))?;
        // Missing cells are NaN, so compare the exact rendering.
        ensure!(
            format!("{refit:?}") == format!("{:?}", f.pre),
            "fold {}: preprocessing state differs from a train-only refit",
            f.fold
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let attended: Vec<AblationFlags> = variants().into_iter().filter(|f| !f.no_control).collect();
    for i in 0..1000u64 {
        let flags = attended[i as usize % attended.len()];
        let config = ArchConfig {
            d_z: 8,
            n_heads: 2,
            window: 1 + i as usize % 4,
            ..ArchConfig::desk()
        };
        let m = ok(NkmModel::new(&config, flags, i))?;
        let inputs: Vec<Vec<f64>> = (0..config.window)
            .map(|_| {
                (0..N_FEATURES)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect()
            })
            .collect();
        let out = ok(m.forward(&inputs))?;
        let sa: f64 = out.alpha.iter().sum();
        let sb: f64 = out.beta.iter().sum();
        ensure!(
            (sa - 1.0).abs() < 1e-6 && (sb - 1.0).abs() < 1e-6,
            "forward {i}: Σα = {sa}, Σβ = {sb}"
        );
        ensure!(
            out.gate.iter().all(|&g| g > 0.0 && g < 1.0),
            "forward {i}: gate outside (0, 1)"
        );
    }
    Ok(
        "5 folds disjoint, preprocessing matches train-only refit, 1000 forwards on the simplex"
            .into(),
    )
}

fn files_equal(a: &std::path::Path, b: &std::path::Path) -> Result<bool, String> {
    let mut names: Vec<_> = ok(std::fs::read_dir(a))?
        .map(|e| e.expect("entry").file_name())
        .collect();
    names.sort();
    for n in &names {
        if ok(std::fs::read(a.join(n)))? != ok(std::fs::read(b.join(n)))? {
            return Ok(false);
        }
    }
    Ok(!names.is_empty())
}

fn determinism() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        let (ds, truth) = cohort(40, 6, 77);
        ok(write_synthetic(p, &ds, &truth))?;
    }
    ensure!(
        files_equal(&a, &b)?,
        "synthetic outputs differ between runs"
    );

    let (ds, _) = cohort(60, 6, 78);
    let mut cfg = FitConfig::desk();
    cfg.train.epochs = 5;
    let plan = ok(stratified_kfold(
        &ds,
        5,
        seeds::derive(78, seeds::STREAM_FOLDS),
    ))?;
    let fold = ok(prepare_fold(&ds, &plan, 0, &cfg, 78))?;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = ok(NkmModel::new(&cfg.model, AblationFlags::default(), 11))?;
        let rep = ok(train(&mut m, &fold.train, &fold.val, &cfg, 11))?;
        let (metrics, preds) = ok(evaluate(&m, &fold.pre, &fold.test))?;
        runs.push((m, rep, metrics, preds));
    }
    ensure!(
        runs[0].2 == runs[1].2 && runs[0].3 == runs[1].3,
        "metrics differ between identical runs"
    );
    ensure!(runs[0].1 == runs[1].1, "training histories differ");

    let model = &runs[0].0;
    let ck = dir.path().join("ck");
    ok(model.save(&ck, serde_json::Value::Null))?;
    let (back, _) = ok(NkmModel::load(&ck))?;
    let same = model
        .store
        .flat_values()
        .iter()
        .zip(back.store.flat_values())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(
        same && model.store.num_scalars() == back.store.num_scalars(),
        "checkpoint round trip altered parameters"
    );
    let (_, p2) = ok(evaluate(&back, &fold.pre, &fold.test))?;
    ensure!(p2 == runs[0].3, "reloaded model predicts differently");
    Ok("CSV bytes, metrics and checkpoint bits reproduce".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("1 gradient fidelity", gradient_fidelity, 60),
        ("2 spectral machinery", spectral_machinery, 30),
        ("3 error-bound harness", bound_harness, 120),
        ("4 asymptotic bound", asymptotic_bound, 5),
        ("5 EDMD exactness", edmd_exactness, 30),
        ("6 fixed-point agreement", fixed_point, 60),
        ("7 alternating descent", descent, 120),
        ("8 pipeline quality", pipeline_quality, 600),
        ("9 protocol hygiene", protocol_hygiene, 120),
        ("10 determinism and serialization", determinism, 120),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let result = match result {
            Ok(msg) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{msg} (took {elapsed:.1?}, budget {budget} s)"))
            }
            r => r,
        };
        match result {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{elapsed:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
