use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use kfusion::fusion::{
    fit_plan, fixed_jump_epochs, fixed_jumps_ensemble, fuse, horizontal_ensemble, FitOptions, FusedProbs, FusionPlan,
    ReferenceChoice,
};
use kfusion::lab::{LabConfig, LabOutcome};
use kfusion::log::import_csv as import_log_csv;
use kfusion::manifest::{write_run, LoadedRun, Manifest};
use kfusion::metrics::{default_loss_threshold, forget_report, forget_report_at, noise_loss_counts};
use kfusion::report::{line_chart, Series};
use kfusion::trainer::{
    accuracy, average_weights, distill, run, synthesize, teacher_from_probs, DistillConfig, ExperimentConfig,
};
use kfusion::{ModelWeights, PredictionLog, SplitTag};

use crate::error::CliError;
use crate::{
    BaselineKind, CondenseArgs, CondenseFlags, CondenseMode, FitFlags, FuseCommand, ImportArgs, LabArgs, MetricsArgs,
    PipelineArgs, ReferenceArg, ReportArgs, SplitArg, TrainArgs,
};

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut file = create_file(path)?;
    body(&mut file).and_then(|_| file.flush()).map_err(|e| CliError::io(path, e))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::parse(&read_text(path)?, is_json(path))
        .map_err(|e| CliError::from(e).context(path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_log(path: &Path) -> Result<PredictionLog, CliError> {
    PredictionLog::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_plan(path: &Path) -> Result<FusionPlan, CliError> {
    FusionPlan::from_json(&read_text(path)?).map_err(|e| CliError::from(e).context(path.display()))
}

fn epoch_accuracy(log: &PredictionLog, epoch: usize) -> f64 {
    let probs = FusedProbs { examples: log.examples(), classes: log.classes(), probs: log.epoch_f64(epoch) };
    probs.accuracy(log.labels())
}

fn train_into(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, CliError> {
    let artifacts = run(cfg)?;
    let manifest = write_run(&artifacts, dir)?;
    let best = artifacts.best_validation_epoch();
    println!(
        "{}: seed {}, {} epochs, best validation epoch {best} ({:.4}), manifest {}",
        manifest.run_id,
        cfg.seed,
        artifacts.train_log.epochs(),
        epoch_accuracy(&artifacts.validation_log, best),
        Manifest::path_in(dir).display()
    );
    Ok(manifest)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    if args.seed.len() <= 1 {
        let cfg = load_config(&args.config, args.seed.first().copied())?;
        return train_into(&cfg, &args.out).map(|_| ());
    }
    let base = load_config(&args.config, None)?;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.clamp(1, args.seed.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = args.seed.get(i) else { break };
                let cfg = ExperimentConfig { seed, ..base.clone() };
                let outcome = train_into(&cfg, &args.out.join(format!("seed-{seed}")));
                results.lock().expect("no worker panicked").push((i, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("no worker panicked");
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().try_for_each(|(_, r)| r.map(|_| ()))
}

pub fn metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let log = load_log(&args.log)?;
    let report = match args.reference {
        Some(r) => forget_report_at(&log, r)?,
        None => forget_report(&log),
    };
    create_dir(&args.out)?;
    write_with(&args.out.join("curves.csv"), |f| report.write_curves_csv(f))?;
    write_with(&args.out.join("forget_times.csv"), |f| report.write_forget_times_csv(f))?;
    let peak = report.argmax_forget_epoch;
    println!(
        "{} epochs, reference epoch {} accuracy {:.4}; largest forget fraction {:.4} at epoch {peak}",
        log.epochs(),
        report.reference_epoch,
        report.acc_curve[report.reference_epoch],
        report.f_curve[peak]
    );
    if log.noise_mask().is_some() {
        let threshold = args.threshold.unwrap_or_else(|| default_loss_threshold(log.classes()));
        let counts = noise_loss_counts(&log, threshold)?;
        write_with(&args.out.join("noise_loss.csv"), |f| counts.write_csv(f))?;
        println!("large-loss counts above {threshold:.4} written for clean and noisy examples");
    } else if args.threshold.is_some() {
        return Err(CliError::validation("--threshold needs a log with a noise mask"));
    }
    Ok(())
}

fn fit_options(flags: &FitFlags) -> FitOptions {
    let reference = match (flags.reference_epoch, flags.reference) {
        (Some(e), _) => ReferenceChoice::Epoch(e),
        (None, ReferenceArg::Last) => ReferenceChoice::Last,
        (None, ReferenceArg::Best) => ReferenceChoice::BestAccuracy,
    };
    FitOptions { window: flags.window, eps_step: flags.eps_step, reference, ..Default::default() }
}

fn print_comparison(plan: &FusionPlan, log: &PredictionLog) -> Result<FusedProbs, CliError> {
    let fused = fuse(plan, log)?;
    let reference = epoch_accuracy(log, plan.reference_epoch);
    let accuracy = fused.accuracy(log.labels());
    println!("reference accuracy {reference:.4} (epoch {})", plan.reference_epoch);
    println!("fused accuracy {accuracy:.4}");
    println!("difference {:+.4}", accuracy - reference);
    Ok(fused)
}

fn fit_and_save(log: &PredictionLog, flags: &FitFlags, out: &Path) -> Result<FusionPlan, CliError> {
    let plan = fit_plan(log, &fit_options(flags))?;
    write_with(out, |f| f.write_all(plan.to_json().as_bytes()))?;
    let pairs: Vec<String> = plan.pairs.iter().map(|p| format!("{}@{:.2}", p.epoch, p.epsilon)).collect();
    println!("plan {}: window {}, pairs [{}]", out.display(), plan.window, pairs.join(", "));
    Ok(plan)
}

pub fn fuse_cmd(cmd: &FuseCommand) -> Result<(), CliError> {
    match cmd {
        FuseCommand::Fit { log, out, flags } => {
            let log = load_log(log)?;
            let plan = fit_and_save(&log, flags, out)?;
            print_comparison(&plan, &log).map(|_| ())
        }
        FuseCommand::Apply { plan, log, out } => {
            let plan = load_plan(plan)?;
            let log = load_log(log)?;
            let fused = print_comparison(&plan, &log)?;
            if let Some(out) = out {
                write_with(out, |f| {
                    writeln!(f, "example,class,prob")?;
                    for i in 0..fused.examples {
                        for (c, p) in fused.row(i).iter().enumerate() {
                            writeln!(f, "{i},{c},{p}")?;
                        }
                    }
                    Ok(())
                })?;
            }
            Ok(())
        }
        FuseCommand::Baseline { log, kind, k } => {
            let log = load_log(log)?;
            let (name, epochs, probs) = match kind {
                BaselineKind::Horizontal => {
                    let probs = horizontal_ensemble(&log, *k)?;
                    ("horizontal", (log.epochs() - k..log.epochs()).collect::<Vec<_>>(), probs)
                }
                BaselineKind::Jumps => {
                    ("fixed jumps", fixed_jump_epochs(log.epochs(), *k)?, fixed_jumps_ensemble(&log, *k)?)
                }
            };
            println!("{name} ensemble of {k} epochs {epochs:?}: accuracy {:.4}", probs.accuracy(log.labels()));
            Ok(())
        }
    }
}

fn condense_run(
    loaded: &LoadedRun,
    plan: &FusionPlan,
    mode: CondenseMode,
    flags: &CondenseFlags,
    seed: Option<u64>,
    out: &Path,
) -> Result<ModelWeights, CliError> {
    let splits = synthesize(&loaded.config)?;
    let student = match mode {
        CondenseMode::Average => average_weights(&loaded.snapshots, plan)?,
        CondenseMode::Distill => {
            let teacher = teacher_from_probs(&fuse(plan, &loaded.train_log)?);
            let cfg = DistillConfig {
                temperature: flags.temperature,
                alpha: flags.alpha,
                seed: seed.unwrap_or(loaded.config.seed),
                ..DistillConfig::like(&loaded.config)
            };
            distill(&teacher, &splits.train, &cfg)?
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    student.save(out).map_err(|e| CliError::from(e).context(out.display()))?;
    let reference = loaded.snapshots.get(plan.reference_epoch).ok_or_else(|| {
        CliError::validation(format!("plan reference epoch {} has no snapshot", plan.reference_epoch))
    })?;
    let early = &loaded.snapshots[kfusion::fusion::best_accuracy_epoch(&loaded.validation_log)];
    println!(
        "{} student {}: test accuracy {:.4}; reference epoch {} {:.4}; early-stopped {:.4}; fused ensemble {:.4}",
        match mode {
            CondenseMode::Average => "averaged",
            CondenseMode::Distill => "distilled",
        },
        out.display(),
        accuracy(&student, &splits.test)?,
        plan.reference_epoch,
        accuracy(reference, &splits.test)?,
        accuracy(early, &splits.test)?,
        fuse(plan, &loaded.test_log)?.accuracy(loaded.test_log.labels())
    );
    Ok(student)
}

pub fn condense(args: &CondenseArgs) -> Result<(), CliError> {
    let loaded = Manifest::load(&args.manifest)?;
    let plan = match &args.plan {
        Some(path) => load_plan(path)?,
        None => {
            loaded.plans.first().cloned().ok_or_else(|| CliError::validation("manifest lists no plan; pass --plan"))?
        }
    };
    condense_run(&loaded, &plan, args.mode, &args.flags, args.seed, &args.out).map(|_| ())
}

pub fn lab(args: &LabArgs) -> Result<(), CliError> {
    let mut cfg = LabConfig::parse(&read_text(&args.config)?, is_json(&args.config))
        .map_err(|e| CliError::from(e).context(args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let LabOutcome { run, predictions } = cfg.run()?;
    create_dir(&args.out)?;
    write_with(&args.out.join("trajectory.csv"), |f| run.write_trajectory_csv(f))?;
    write_with(&args.out.join("forget.csv"), |f| kfusion::lab::write_forget_csv(&predictions, f))?;
    let forgotten = predictions.iter().filter(|p| p.forgotten).count();
    let finite = predictions.iter().filter(|p| p.forgotten && p.forget_time.is_some()).count();
    println!(
        "depth {}, {} steps: max deviation from closed form {:.4}%; {forgotten} points forgotten, {finite} with a finite forget time",
        run.depth,
        run.steps,
        100.0 * run.max_relative_deviation()
    );
    Ok(())
}

fn report_into(loaded: &LoadedRun) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    let mut emit = |rel: String, body: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| {
        write_with(&loaded.dir.join(&rel), body)?;
        written.push(rel);
        Ok::<_, CliError>(())
    };
    for (name, log) in
        [("train", &loaded.train_log), ("validation", &loaded.validation_log), ("test", &loaded.test_log)]
    {
        let report = forget_report(log);
        emit(format!("reports/{name}_curves.csv"), &|f| report.write_curves_csv(f))?;
        emit(format!("reports/{name}_forget_times.csv"), &|f| report.write_forget_times_csv(f))?;
        let svg = line_chart(
            &format!("{name}: accuracy and forget/learn fractions"),
            "epoch",
            &[
                Series { name: "acc", color: "#1f77b4", values: &report.acc_curve },
                Series { name: "F", color: "#d62728", values: &report.f_curve },
                Series { name: "L", color: "#2ca02c", values: &report.l_curve },
            ],
        );
        emit(format!("reports/{name}_curves.svg"), &|f| f.write_all(svg.as_bytes()))?;
        if log.noise_mask().is_some() {
            let counts = noise_loss_counts(log, default_loss_threshold(log.classes()))?;
            emit(format!("reports/{name}_noise_loss.csv"), &|f| counts.write_csv(f))?;
            let clean: Vec<f64> = counts.clean.iter().map(|&c| c as f64).collect();
            let noisy: Vec<f64> = counts.noisy.iter().map(|&c| c as f64).collect();
            let svg = line_chart(
                &format!("{name}: examples with large loss"),
                "epoch",
                &[
                    Series { name: "clean", color: "#1f77b4", values: &clean },
                    Series { name: "noisy", color: "#d62728", values: &noisy },
                ],
            );
            emit(format!("reports/{name}_noise_loss.svg"), &|f| f.write_all(svg.as_bytes()))?;
        }
    }
    Ok(written)
}

fn add_unique(list: &mut Vec<String>, items: impl IntoIterator<Item = String>) {
    for item in items {
        if !list.contains(&item) {
            list.push(item);
        }
    }
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let loaded = Manifest::load(&args.manifest)?;
    let written = report_into(&loaded)?;
    let mut manifest = loaded.manifest.clone();
    add_unique(&mut manifest.reports, written.iter().cloned());
    manifest.save(&loaded.dir)?;
    for rel in &written {
        println!("{}", loaded.dir.join(rel).display());
    }
    Ok(())
}

pub fn pipeline(args: &PipelineArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    let mut manifest = train_into(&cfg, &args.out)?;
    let loaded = Manifest::load(&Manifest::path_in(&args.out))?;

    let plan_rel = "plans/kf.json".to_string();
    println!("validation:");
    let plan = fit_and_save(&loaded.validation_log, &args.fit, &args.out.join(&plan_rel))?;
    print_comparison(&plan, &loaded.validation_log)?;
    println!("test:");
    print_comparison(&plan, &loaded.test_log)?;
    add_unique(&mut manifest.plans, [plan_rel]);
    manifest.save(&args.out)?;

    let stem = match args.condense {
        CondenseMode::Average => "condensed/average",
        CondenseMode::Distill => "condensed/distill",
    };
    condense_run(&loaded, &plan, args.condense, &args.condense_flags, None, &args.out.join(stem))?;

    let loaded = Manifest::load(&Manifest::path_in(&args.out))?;
    let written = report_into(&loaded)?;
    add_unique(&mut manifest.reports, written);
    manifest.save(&args.out)?;
    println!("manifest {}", Manifest::path_in(&args.out).display());
    Ok(())
}

pub fn import_csv(args: &ImportArgs) -> Result<(), CliError> {
    let open = |p: &PathBuf| File::open(p).map_err(|e| CliError::io(p, e));
    let split = match args.split {
        SplitArg::Train => SplitTag::Train,
        SplitArg::Validation => SplitTag::Validation,
        SplitArg::Test => SplitTag::Test,
    };
    let log = import_log_csv(open(&args.probs)?, open(&args.labels)?, split)?;
    create_file(&args.out)?;
    let bytes = log.save(&args.out).map_err(|e| CliError::from(e).context(args.out.display()))?;
    println!(
        "{}: {} epochs, {} examples, {} classes, {bytes} bytes",
        args.out.display(),
        log.epochs(),
        log.examples(),
        log.classes()
    );
    Ok(())
}
