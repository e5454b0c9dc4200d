use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nkm::analysis::{
    export_latents, feature_importance, verify_bound, verify_descent, BoundReport, DescentConfig,
};
use nkm::dataset::{
    generate_synthetic, split_validation, write_synthetic, LongitudinalDataset, Preprocessor,
    SynthConfig, Window,
};
use nkm::edmd::EdmdModel;
use nkm::model::NkmModel;
use nkm::numerics::linalg::spectral_norm;
use nkm::seeds;
use nkm::training::pipeline::{
    complete_windows, prepare_folds, run_baselines, run_setup, TABLE_HEADER,
};
use nkm::training::{
    evaluate, run_ablation, train, AblationTable, CvReport, EvalMetrics, TrainReport,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve, RunConfig};
use crate::{Cli, CliError, Command, DataArgs};

type Res<T = ()> = Result<T, CliError>;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> Res {
        let path = self.out.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Runtime(format!("cannot write `{}`: {e}", path.display())))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Res {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    fn report(&self, command: &str, body: Value) -> Res {
        self.write_json(
            "report.json",
            &json!({ "command": command, "seed": self.cfg.seed, "result": body }),
        )
    }

    fn model_seed(&self) -> u64 {
        seeds::derive(self.cfg.seed, seeds::STREAM_MODEL)
    }

    fn data(&self, args: &DataArgs) -> Res<LongitudinalDataset> {
        match &args.data {
            Some(p) => Ok(LongitudinalDataset::load_csv(p)
                .map_err(|e| CliError::Runtime(format!("`{}`: {e}", p.display())))?),
            None => Ok(generate_synthetic(&self.cfg.synth, self.cfg.seed)?.0),
        }
    }
}

pub fn run(cli: Cli) -> Res {
    let g = &cli.global;
    let cfg = resolve(
        g.preset.as_deref(),
        g.config.as_deref(),
        &g.overrides,
        g.seed,
    )?;
    fs::create_dir_all(&g.out)
        .map_err(|e| CliError::Runtime(format!("cannot create `{}`: {e}", g.out.display())))?;
    let ctx = Ctx {
        cfg,
        out: g.out.clone(),
    };
    ctx.write_json("effective-config.json", &ctx.cfg)?;
    match &cli.command {
        Command::Synth => synth(&ctx),
        Command::Train(d) => train_cmd(&ctx, d),
        Command::Eval { data, model } => eval_cmd(&ctx, data, model),
        Command::Cv(d) => cv(&ctx, d),
        Command::Ablate(d) => ablate(&ctx, d),
        Command::Edmd(d) => edmd(&ctx, d),
        Command::VerifyBound { data, model } => verify_bound_cmd(&ctx, data, model.as_deref()),
        Command::VerifyDescent(d) => verify_descent_cmd(&ctx, d),
        Command::Importance(d) => importance(&ctx, d),
        Command::ExportLatents { data, model } => latents(&ctx, data, model.as_deref()),
    }
}

fn metrics_csv(rows: &[(String, &EvalMetrics)]) -> String {
    let mut s = String::from("label,target,pearson,spearman,mae,rmse,n_windows\n");
    for (label, m) in rows {
        for t in &m.per_target {
            let _ = writeln!(
                s,
                "{label},{},{:.10},{:.10},{:.10},{:.10},{}",
                t.target, t.pearson, t.spearman, t.mae, t.rmse, m.n_windows
            );
        }
    }
    s
}

fn cv_csv(reports: &[&CvReport]) -> String {
    let rows: Vec<(String, &EvalMetrics)> = reports
        .iter()
        .flat_map(|r| {
            r.folds
                .iter()
                .map(move |f| (format!("{} fold {}", r.setup, f.fold), &f.metrics))
        })
        .collect();
    metrics_csv(&rows)
}

fn synth(ctx: &Ctx) -> Res {
    let (ds, truth) = generate_synthetic(&ctx.cfg.synth, ctx.cfg.seed)?;
    write_synthetic(&ctx.out, &ds, &truth)?;
    let norm_a = spectral_norm(&truth.a)?;
    println!(
        "wrote {} subjects × {} visits to {}",
        ds.n_subjects(),
        ctx.cfg.synth.visits_per_subject,
        ctx.out.join("data.csv").display()
    );
    ctx.report(
        "synth",
        json!({
            "n_subjects": ds.n_subjects(),
            "n_visits": ds.n_visits(),
            "latent_dim": ctx.cfg.synth.latent_dim,
            "spectral_norm_a": norm_a,
        }),
    )
}

/// A model fitted on the whole cohort with a seeded validation split.
struct Fitted {
    model: NkmModel,
    pre: Preprocessor,
    report: Option<TrainReport>,
    /// Preprocessed windows the model was fitted on.
    train: Vec<Window>,
    /// Raw windows of the validation subjects.
    val_raw: Vec<Window>,
}

fn fit_single(ctx: &Ctx, ds: &LongitudinalDataset) -> Res<Fitted> {
    let cfg = ctx.cfg.fit();
    let all: Vec<usize> = (0..ds.n_subjects()).collect();
    let vseed = seeds::derive(ctx.cfg.seed, seeds::STREAM_VALIDATION);
    let (fit_idx, val_idx) = split_validation(&all, cfg.train.val_frac, vseed);
    let pre = Preprocessor::fit(
        &ds.select(&fit_idx),
        cfg.train.knn_k,
        cfg.train.standardize_targets,
    )?;
    let w = cfg.model.window;
    let train_ws = pre.transform_windows(&complete_windows(ds, &fit_idx, w))?;
    let val_raw = complete_windows(ds, &val_idx, w);
    let val = pre.transform_windows(&val_raw)?;
    if train_ws.is_empty() {
        return Err(CliError::Runtime(format!(
            "no complete windows of length {w} among {} training subjects",
            fit_idx.len()
        )));
    }
    let mut model = NkmModel::new(&cfg.model, ctx.cfg.flags, ctx.model_seed())?;
    let report = train(&mut model, &train_ws, &val, &cfg, ctx.model_seed())?;
    Ok(Fitted {
        model,
        pre,
        report: Some(report),
        train: train_ws,
        val_raw,
    })
}

fn load_model(dir: &Path) -> Res<(NkmModel, Preprocessor)> {
    let (model, _) = NkmModel::load(dir)?;
    let pre = Preprocessor::load(dir.join("preprocessor.json"))?;
    Ok((model, pre))
}

/// Trained model and its preprocessed training windows, from `--model` or
/// by training on the cohort.
fn model_or_train(ctx: &Ctx, ds: &LongitudinalDataset, dir: Option<&Path>) -> Res<Fitted> {
    match dir {
        Some(d) => {
            let (model, pre) = load_model(d)?;
            let all: Vec<usize> = (0..ds.n_subjects()).collect();
            let train =
                pre.transform_windows(&complete_windows(ds, &all, model.config().window))?;
            Ok(Fitted {
                model,
                pre,
                report: None,
                train,
                val_raw: Vec::new(),
            })
        }
        None => fit_single(ctx, ds),
    }
}

fn history_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,L_pred,L_koop,R_spec,total,val_loss,lr\n");
    for r in &report.history {
        let _ = writeln!(
            s,
            "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:e}",
            r.epoch, r.l_pred, r.l_koop, r.r_spec, r.total, r.val_loss, r.lr
        );
    }
    s
}

fn train_cmd(ctx: &Ctx, data: &DataArgs) -> Res {
    let ds = ctx.data(data)?;
    let f = fit_single(ctx, &ds)?;
    let report = f.report.as_ref().expect("trained");
    let dir = ctx.out.join("model");
    f.model.save(&dir, json!(report.history))?;
    f.pre.save(dir.join("preprocessor.json"))?;
    let val_metrics = if f.val_raw.len() >= 2 {
        Some(evaluate(&f.model, &f.pre, &f.val_raw)?.0)
    } else {
        None
    };
    println!(
        "trained {} epochs (best {} val loss {:.6}), ‖K‖ = {:.4}; model in {}",
        report.epochs_run(),
        report.best_epoch,
        report.best_val_loss,
        report.spectral_norm,
        dir.display()
    );
    if let Some(m) = &val_metrics {
        println!(
            "validation r = {:.4}, MAE = {:.4}",
            m.mean.pearson, m.mean.mae
        );
    }
    ctx.write("metrics.csv", &history_csv(report))?;
    ctx.report(
        "train",
        json!({ "train": report, "validation": val_metrics, "model_dir": dir }),
    )
}

fn eval_cmd(ctx: &Ctx, data: &DataArgs, dir: &Path) -> Res {
    let ds = ctx.data(data)?;
    let (model, pre) = load_model(dir)?;
    let all: Vec<usize> = (0..ds.n_subjects()).collect();
    let raw = complete_windows(&ds, &all, model.config().window);
    let (metrics, preds) = evaluate(&model, &pre, &raw)?;
    println!(
        "{} windows: r = {:.4}, rho = {:.4}, MAE = {:.4}, RMSE = {:.4}",
        metrics.n_windows,
        metrics.mean.pearson,
        metrics.mean.spearman,
        metrics.mean.mae,
        metrics.mean.rmse
    );
    let mut p = String::from("subject_id,target_visit,MMSE,CDRSB,ADAS13\n");
    for (w, y) in raw.iter().zip(&preds) {
        let _ = writeln!(
            p,
            "{},{},{:.10},{:.10},{:.10}",
            w.subject_id,
            w.target_visit(),
            y[0],
            y[1],
            y[2]
        );
    }
    ctx.write("predictions.csv", &p)?;
    ctx.write("metrics.csv", &metrics_csv(&[("eval".into(), &metrics)]))?;
    ctx.report("eval", json!({ "model_dir": dir, "metrics": metrics }))
}

fn setup_name(cfg: &RunConfig) -> &'static str {
    let f = cfg.flags;
    if f.no_control {
        "no control"
    } else if f.no_temporal_attention {
        "no temporal attn"
    } else if f.no_feature_attention {
        "no feature attn"
    } else if f.no_spectral_reg {
        "no spectral reg"
    } else {
        "full"
    }
}

fn cv(ctx: &Ctx, data: &DataArgs) -> Res {
    let ds = ctx.data(data)?;
    let fit = ctx.cfg.fit();
    let (_, folds) = prepare_folds(&ds, &fit, ctx.cfg.cv.folds, ctx.cfg.seed)?;
    let (report, _) = run_setup(
        &folds,
        &fit,
        setup_name(&ctx.cfg),
        ctx.cfg.flags,
        ctx.cfg.seed,
    )?;
    println!("{TABLE_HEADER}\n{}", report.row());
    ctx.write("metrics.csv", &cv_csv(&[&report]))?;
    ctx.report("cv", json!(report))
}

fn ablate(ctx: &Ctx, data: &DataArgs) -> Res {
    let ds = ctx.data(data)?;
    let table: AblationTable = run_ablation(&ds, &ctx.cfg.fit(), ctx.cfg.cv.folds, ctx.cfg.seed)?;
    print!("{}", table.render());
    ctx.write("metrics.csv", &table.to_csv())?;
    ctx.report("ablate", json!(table))
}

fn edmd(ctx: &Ctx, data: &DataArgs) -> Res {
    let ds = ctx.data(data)?;
    let (_, folds) = prepare_folds(&ds, &ctx.cfg.fit(), ctx.cfg.cv.folds, ctx.cfg.seed)?;
    let (e, l, models) = run_baselines(&folds, &ctx.cfg.edmd, ctx.cfg.seed)?;
    println!("{TABLE_HEADER}\n{}\n{}", e.row(), l.row());
    let dir = ctx.out.join("edmd-fold0");
    models[0].save(&dir)?;
    ctx.write("metrics.csv", &cv_csv(&[&e, &l]))?;
    ctx.report("edmd", json!({ "edmd": e, "linear": l, "model_dir": dir }))
}

fn bound_outcome(name: &str, r: nkm::Result<BoundReport>, csv: &mut String) -> Value {
    match r {
        Ok(b) => {
            for t in &b.per_tau {
                let _ = writeln!(
                    csv,
                    "{name},{},{:.10e},{:.10e}",
                    t.tau, t.empirical, t.bound
                );
            }
            println!(
                "{name}: ‖K‖ = {:.4}, ε̃ = {:.4e}, limit = {:.4e}, bound {}",
                b.norm_k_svd,
                b.eps_tilde,
                b.limit,
                if b.pass { "holds" } else { "VIOLATED" }
            );
            json!({ "pass": b.pass, "report": b })
        }
        Err(e) => {
            println!("{name}: not applicable ({e})");
            json!({ "pass": Value::Null, "error": e.to_string() })
        }
    }
}

fn verify_bound_cmd(ctx: &Ctx, data: &DataArgs, dir: Option<&Path>) -> Res {
    let ds = ctx.data(data)?;
    let f = model_or_train(ctx, &ds, dir)?;
    let source = if data.data.is_some() {
        ds.clone()
    } else {
        let long = SynthConfig {
            visits_per_subject: ctx.cfg.verify.sequence_visits,
            ..ctx.cfg.synth.clone()
        };
        generate_synthetic(&long, ctx.cfg.seed)?.0
    };
    let sequences = source
        .subjects
        .iter()
        .map(|s| {
            s.visits
                .iter()
                .map(|v| f.pre.transform_row(&v.features))
                .collect::<nkm::Result<Vec<_>>>()
        })
        .collect::<nkm::Result<Vec<_>>>()?;
    let tau = ctx.cfg.verify.tau_max;
    let mut csv = String::from("model,tau,empirical,bound\n");
    let nkm_out = bound_outcome("NKM", verify_bound(&f.model, &sequences, tau), &mut csv);
    let edmd_seed = seeds::derive(ctx.cfg.seed, seeds::STREAM_EDMD);
    let mut e = EdmdModel::new(ctx.cfg.edmd.clone(), edmd_seed);
    e.fit(&f.train)?;
    let edmd_out = bound_outcome("EDMD", verify_bound(&e, &sequences, tau), &mut csv);
    ctx.write("metrics.csv", &csv)?;
    ctx.report(
        "verify-bound",
        json!({
            "tau_max": tau,
            "n_sequences": sequences.len(),
            "nkm": nkm_out,
            "edmd": edmd_out,
        }),
    )
}

fn verify_descent_cmd(ctx: &Ctx, data: &DataArgs) -> Res {
    let ds = ctx.data(data)?;
    let cfg = ctx.cfg.fit();
    let all: Vec<usize> = (0..ds.n_subjects()).collect();
    let pre = Preprocessor::fit(&ds, cfg.train.knn_k, cfg.train.standardize_targets)?;
    let ws: Vec<Window> = pre
        .transform_windows(&complete_windows(&ds, &all, cfg.model.window))?
        .into_iter()
        .take(ctx.cfg.verify.descent_windows)
        .collect();
    let loss = cfg.loss.effective(ctx.cfg.flags);
    let fresh = NkmModel::new(&cfg.model, ctx.cfg.flags, ctx.model_seed())?;
    let run = |dc: &DescentConfig| verify_descent(&mut fresh.clone(), &ws, &loss, dc);
    let main = run(&ctx.cfg.descent)?;
    let step = ctx.cfg.verify.control_step;
    let control = run(&DescentConfig {
        step,
        k_step: step,
        backtracking: false,
        ..ctx.cfg.descent.clone()
    })?;
    println!(
        "descent over {} windows: {:.6} → {:.6}, {} halvings, monotone: {}",
        ws.len(),
        main.trace[0],
        main.trace.last().expect("trace"),
        main.halvings,
        main.pass
    );
    println!(
        "negative control (step {step:e}, no backtracking) monotone: {}",
        control.pass
    );
    let mut csv = String::from("iteration,loss,control_loss\n");
    for i in 0..main.trace.len().max(control.trace.len()) {
        let cell = |t: &[f64]| t.get(i).map(|v| format!("{v:.10e}")).unwrap_or_default();
        let _ = writeln!(csv, "{i},{},{}", cell(&main.trace), cell(&control.trace));
    }
    ctx.write("metrics.csv", &csv)?;
    ctx.report(
        "verify-descent",
        json!({ "n_windows": ws.len(), "descent": main, "negative_control": control }),
    )
}

fn importance(ctx: &Ctx, data: &DataArgs) -> Res {
    let ds = ctx.data(data)?;
    let fit = ctx.cfg.fit();
    let flags = ctx.cfg.flags;
    let report = feature_importance(
        |ws, seed| {
            let mut m = NkmModel::new(&fit.model, flags, seed)?;
            train(&mut m, ws, &[], &fit, seed)?;
            Ok(m)
        },
        &ds,
        &ctx.cfg.importance,
        ctx.cfg.seed,
    )?;
    println!(
        "{} runs, baseline r = {:.4}",
        report.runs, report.baseline_r
    );
    let mut ranked: Vec<_> = report.features.iter().collect();
    ranked.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    for f in ranked.iter().take(ctx.cfg.importance.top) {
        println!(
            "{:<24} {:.6}  top-{} in {:.0}% of runs",
            f.feature,
            f.mean,
            ctx.cfg.importance.top,
            100.0 * f.top_frequency
        );
    }
    ctx.write("metrics.csv", &report.to_csv())?;
    ctx.report("importance", json!(report))
}

fn latents(ctx: &Ctx, data: &DataArgs, dir: Option<&Path>) -> Res {
    let ds = ctx.data(data)?;
    let f = model_or_train(ctx, &ds, dir)?;
    let all: Vec<usize> = (0..ds.n_subjects()).collect();
    let windows = f
        .pre
        .transform_windows(&complete_windows(&ds, &all, f.model.config().window))?;
    let table = export_latents(&f.model, &f.train, &windows, ctx.cfg.latents.rollout_steps)?;
    ctx.write("latents.csv", &table.to_csv()?)?;
    println!(
        "{} latent rows, PC variances {:.4} and {:.4}",
        table.rows.len(),
        table.pca.explained[0],
        table.pca.explained[1]
    );
    ctx.report(
        "export-latents",
        json!({ "n_rows": table.rows.len(), "n_windows": windows.len(), "pca": table.pca }),
    )
}
