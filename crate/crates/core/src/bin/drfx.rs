//! Command-line front end: synthesize fleets, build datasets, train the
//! teacher, run distillation comparisons, evaluate, and export analysis CSVs.
//!
//! Exit codes: 0 success, 2 config error, 3 missing dependency, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use drfx_core::distill::{
    distill_fixed, evaluate, train_supervised, Classifier, DistillConfig, KdMode,
};
use drfx_core::featurizer::{
    build_dataset, ingest_iq, split_frames, DatasetSplit, IngestLayout, LabelRule, ManifestEntry,
    SampleEncoding,
};
use drfx_core::harness::{
    collect_features, compare_modes, median_forward_latency, mode_name, mode_report, pca_project,
    write_confusion_csv, write_features_csv, ExperimentConfig, ModeReport, RunReport,
};
use drfx_core::models::{config_hash, load_checkpoint, save_checkpoint, Student, Teacher};
use drfx_core::ppoctrl::dynamic_distill;
use drfx_core::sigmodel::{
    read_frame_archive, sample_fleet, synthesize_frame, write_frame_archive, DeviceFingerprint,
    IqFrame,
};

#[derive(Parser)]
#[command(name = "drfx", about = "RF-fingerprint distillation testbed")]
struct Cli {
    /// Experiment config JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistillMode {
    Nkd,
    Fixed,
    Dynamic,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a device fleet and synthesize its frame archive.
    Synth,
    /// Split an existing frame archive 6:2:2 and write the dataset manifest.
    Featurize {
        /// Frame archive; defaults to OUT/frames.iqar.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Train the teacher on synthesized data and checkpoint it.
    TrainTeacher,
    /// Train a student in the chosen mode against the teacher checkpoint.
    Distill {
        #[arg(long, value_enum)]
        mode: DistillMode,
        /// Fixed-mode temperature.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run every mode (no KD, each fixed temperature, dynamic) and rank them.
    Compare,
    /// Evaluate a checkpoint on one split and write its confusion matrix.
    Eval {
        #[arg(long, value_enum)]
        model: EvalModel,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Project a student checkpoint's test features to 2-D and export CSV.
    ExportFeatures {
        /// Student checkpoint; defaults to OUT/student_dynamic.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Convert an external raw I/Q capture into the frame archive format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        encoding: IngestEncoding,
        #[arg(long)]
        frame_len: usize,
        /// Single label for every frame in the file.
        #[arg(long, conflicts_with = "label_manifest")]
        label: Option<u32>,
        /// JSON sidecar mapping file names to labels.
        #[arg(long)]
        label_manifest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModel {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum IngestEncoding {
    F32,
    I16,
}

enum CliError {
    /// Bad or inconsistent configuration (exit 2).
    Config(String),
    /// A required artifact from an earlier command is absent (exit 3).
    Missing(String),
    /// Training diverged or produced non-finite values (exit 4).
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Missing(m) | CliError::Numeric(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn cfg_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn io_ctx<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Config(format!("{what}: {e}"))
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    seed: u64,
    config_hash: u64,
    artifacts: Vec<String>,
}

fn write_manifest(out: &Path, m: &Manifest) -> CliResult<()> {
    let path = out.join(format!("manifest_{}.json", m.command));
    let text = serde_json::to_string_pretty(m).map_err(cfg_err)?;
    std::fs::write(&path, text).map_err(io_ctx("write manifest"))?;
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::read_json(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(cfg_err)?;
    Ok(cfg)
}

/// The per-frame seed scheme shared with the dataset builder, so an archive
/// synthesized here featurizes identically to an in-process build.
fn synth_frames(cfg: &ExperimentConfig, fleet: &[DeviceFingerprint]) -> CliResult<Vec<IqFrame>> {
    let mut frames = Vec::with_capacity(fleet.len() * cfg.per_device);
    for fp in fleet {
        for k in 0..cfg.per_device {
            let frame_seed = cfg
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((fp.device_id as u64) << 20)
                .wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
            frames.push(
                synthesize_frame(fp, &cfg.channel, &cfg.waveform, &mut rng, frame_seed)
                    .map_err(cfg_err)?,
            );
        }
    }
    Ok(frames)
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let mut fleet_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1EE7);
    let fleet =
        sample_fleet(&mut fleet_rng, cfg.num_devices, &cfg.fleet_ranges).map_err(cfg_err)?;
    let fleet_path = out.join("fleet.json");
    let text = serde_json::to_string_pretty(&fleet).map_err(cfg_err)?;
    std::fs::write(&fleet_path, text).map_err(io_ctx("write fleet"))?;

    let frames = synth_frames(cfg, &fleet)?;
    let archive_path = out.join("frames.iqar");
    write_frame_archive(&archive_path, &frames).map_err(cfg_err)?;
    Ok(vec![
        fleet_path.display().to_string(),
        archive_path.display().to_string(),
    ])
}

fn cmd_featurize(
    cfg: &ExperimentConfig,
    out: &Path,
    archive: Option<PathBuf>,
) -> CliResult<Vec<String>> {
    let archive = archive.unwrap_or_else(|| out.join("frames.iqar"));
    if !archive.exists() {
        return Err(CliError::Missing(format!(
            "frame archive {} not found; run `drfx synth` first",
            archive.display()
        )));
    }
    let frames = read_frame_archive(&archive).map_err(cfg_err)?;
    let split =
        split_frames(&frames, &cfg.stft, &cfg.augment, cfg.seed).map_err(cfg_err)?;
    let file = archive.display().to_string();
    let mut entries = Vec::new();
    for (name, specs) in
        [("train", &split.train), ("val", &split.val), ("test", &split.test)]
    {
        for (offset, spec) in specs.iter().enumerate() {
            entries.push(ManifestEntry {
                split: name.to_string(),
                file: file.clone(),
                offset,
                label: spec.label,
            });
        }
    }
    let path = out.join("dataset.json");
    let text = serde_json::to_string_pretty(&entries).map_err(cfg_err)?;
    std::fs::write(&path, text).map_err(io_ctx("write dataset manifest"))?;
    Ok(vec![path.display().to_string()])
}

/// Synthesize + featurize in-process; every training command starts here so
/// a run is reproducible from config + seed alone.
fn build_data(cfg: &ExperimentConfig) -> CliResult<DatasetSplit> {
    let mut fleet_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1EE7);
    let fleet =
        sample_fleet(&mut fleet_rng, cfg.num_devices, &cfg.fleet_ranges).map_err(cfg_err)?;
    build_dataset(
        &fleet,
        &cfg.channel,
        &cfg.waveform,
        &cfg.stft,
        &cfg.augment,
        cfg.per_device,
        cfg.seed,
    )
    .map_err(cfg_err)
}

fn teacher_ckpt_path(out: &Path) -> PathBuf {
    out.join("teacher.ckpt")
}

fn load_teacher(cfg: &ExperimentConfig, out: &Path) -> CliResult<Teacher> {
    let path = teacher_ckpt_path(out);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "teacher checkpoint {} not found; run `drfx train-teacher` first",
            path.display()
        )));
    }
    let mut teacher = Teacher::new(cfg.teacher.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .map_err(cfg_err)?;
    load_checkpoint(&path, teacher.params_mut(), config_hash(&cfg.teacher))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(teacher)
}

fn check_finite_trace(trace: &drfx_core::distill::DistillTrace) -> CliResult<()> {
    if trace.aborted {
        return Err(CliError::Numeric(
            "training aborted on non-finite loss; weights rolled back".into(),
        ));
    }
    Ok(())
}

fn cmd_train_teacher(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let data = build_data(cfg)?;
    let mut teacher = Teacher::new(cfg.teacher.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .map_err(cfg_err)?;
    let tcfg = DistillConfig { kd_mode: KdMode::None, beta: 0.0, ..cfg.distill.clone() };
    let trace = train_supervised(&mut teacher, &data.train, &data.val, &tcfg).map_err(cfg_err)?;
    check_finite_trace(&trace)?;

    let ckpt = teacher_ckpt_path(out);
    save_checkpoint(&ckpt, teacher.params(), "teacher", config_hash(&cfg.teacher))
        .map_err(cfg_err)?;
    let trace_path = out.join("teacher_trace.csv");
    trace.write_csv(&trace_path).map_err(cfg_err)?;

    let (test_acc, confusion) = evaluate(&teacher, &data.test);
    let conf_path = out.join("teacher_confusion.csv");
    write_confusion_csv(&conf_path, &confusion).map_err(cfg_err)?;
    let report = RunReport {
        config_hash: config_hash(cfg),
        teacher_test_acc: test_acc,
        teacher_param_count: teacher.params().param_count(),
        modes: vec![],
    };
    let report_path = out.join("teacher_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(cfg_err)?)
        .map_err(io_ctx("write report"))?;
    Ok(vec![
        ckpt.display().to_string(),
        trace_path.display().to_string(),
        conf_path.display().to_string(),
        report_path.display().to_string(),
    ])
}

fn cmd_distill(
    cfg: &ExperimentConfig,
    out: &Path,
    mode: DistillMode,
    tau: Option<f64>,
) -> CliResult<Vec<String>> {
    let data = build_data(cfg)?;
    let mut student = Student::new(cfg.student.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .map_err(cfg_err)?;
    let mut artifacts = Vec::new();

    let (name, trace, controller) = match mode {
        DistillMode::Nkd => {
            let dcfg = DistillConfig { kd_mode: KdMode::None, ..cfg.distill.clone() };
            let trace =
                train_supervised(&mut student, &data.train, &data.val, &dcfg).map_err(cfg_err)?;
            ("nkd".to_string(), trace, None)
        }
        DistillMode::Fixed => {
            let tau = tau.ok_or_else(|| {
                CliError::Config("--tau is required with --mode fixed".into())
            })?;
            let teacher = load_teacher(cfg, out)?;
            let dcfg = DistillConfig { kd_mode: KdMode::Fixed, tau, ..cfg.distill.clone() };
            dcfg.validate().map_err(cfg_err)?;
            let trace = distill_fixed(&mut student, &teacher, &data.train, &data.val, &dcfg)
                .map_err(cfg_err)?;
            (format!("fixed_tau{tau}"), trace, None)
        }
        DistillMode::Dynamic => {
            let teacher = load_teacher(cfg, out)?;
            let dcfg = DistillConfig { kd_mode: KdMode::Dynamic, ..cfg.distill.clone() };
            let outcome =
                dynamic_distill(&mut student, &teacher, &data.train, &data.val, &dcfg, &cfg.controller)
                    .map_err(cfg_err)?;
            ("dynamic".to_string(), outcome.trace, Some(outcome.controller))
        }
    };
    check_finite_trace(&trace)?;

    let ckpt = out.join(format!("student_{name}.ckpt"));
    save_checkpoint(&ckpt, student.params(), "student", config_hash(&cfg.student))
        .map_err(cfg_err)?;
    artifacts.push(ckpt.display().to_string());
    let trace_path = out.join(format!("student_{name}_trace.csv"));
    trace.write_csv(&trace_path).map_err(cfg_err)?;
    artifacts.push(trace_path.display().to_string());
    if let Some(ctrl) = controller {
        let ctrl_path = out.join("controller_trace.csv");
        ctrl.write_csv(&ctrl_path).map_err(cfg_err)?;
        artifacts.push(ctrl_path.display().to_string());
    }

    let (test_acc, confusion) = evaluate(&student, &data.test);
    let conf_path = out.join(format!("student_{name}_confusion.csv"));
    write_confusion_csv(&conf_path, &confusion).map_err(cfg_err)?;
    artifacts.push(conf_path.display().to_string());
    let (val_acc, _) = evaluate(&student, &data.val);
    let report = ModeReport {
        mode: name.clone(),
        tau,
        val_acc,
        test_acc,
        param_count: student.params().param_count(),
        // file name only: reports must be byte-identical across output dirs
        trace_file: trace_path.file_name().map(|n| n.to_string_lossy().into_owned()),
    };
    let report_path = out.join(format!("student_{name}_report.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(cfg_err)?)
        .map_err(io_ctx("write report"))?;
    artifacts.push(report_path.display().to_string());
    Ok(artifacts)
}

fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let data = build_data(cfg)?;
    let teacher = load_teacher(cfg, out)?;
    let outcomes = compare_modes(
        &teacher,
        &cfg.student,
        &data.train,
        &data.val,
        &cfg.distill,
        &cfg.controller,
        &cfg.fixed_taus,
        cfg.seed,
    )
    .map_err(cfg_err)?;

    let mut artifacts = Vec::new();
    let mut modes = Vec::new();
    for o in &outcomes {
        check_finite_trace(&o.trace)?;
        let name = mode_name(o.mode, o.tau);
        let trace_path = out.join(format!("student_{name}_trace.csv"));
        o.trace.write_csv(&trace_path).map_err(cfg_err)?;
        artifacts.push(trace_path.display().to_string());
        if let Some(ctrl) = &o.controller {
            let ctrl_path = out.join("controller_trace.csv");
            ctrl.write_csv(&ctrl_path).map_err(cfg_err)?;
            artifacts.push(ctrl_path.display().to_string());
        }
        let ckpt = out.join(format!("student_{name}.ckpt"));
        save_checkpoint(&ckpt, o.student.params(), "student", config_hash(&cfg.student))
            .map_err(cfg_err)?;
        artifacts.push(ckpt.display().to_string());
        modes.push(mode_report(
            &o.student,
            o.mode,
            o.tau,
            &data.val,
            &data.test,
            trace_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        ));
    }

    let (teacher_test_acc, _) = evaluate(&teacher, &data.test);
    let mut ranked = modes.clone();
    ranked.sort_by(|a, b| b.test_acc.partial_cmp(&a.test_acc).unwrap());
    println!("mode            test_acc  val_acc  params");
    for m in &ranked {
        println!(
            "{:<15} {:>8.4}  {:>7.4}  {:>6}",
            m.mode, m.test_acc, m.val_acc, m.param_count
        );
    }

    let report = RunReport {
        config_hash: config_hash(cfg),
        teacher_test_acc,
        teacher_param_count: teacher.params().param_count(),
        modes,
    };
    let report_path = out.join("compare_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(cfg_err)?)
        .map_err(io_ctx("write report"))?;
    artifacts.push(report_path.display().to_string());

    // Timing is kept out of the deterministic report on purpose.
    let spec = &data.test[0];
    let timing = serde_json::json!({
        "teacher_latency_ms": median_forward_latency(&teacher, spec, 1000),
        "student_latency_ms": median_forward_latency(&outcomes[0].student, spec, 1000),
        "runs": 1000,
    });
    let timing_path = out.join("timing.json");
    std::fs::write(&timing_path, serde_json::to_string_pretty(&timing).map_err(cfg_err)?)
        .map_err(io_ctx("write timing"))?;
    artifacts.push(timing_path.display().to_string());
    Ok(artifacts)
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    model: EvalModel,
    split: &str,
) -> CliResult<Vec<String>> {
    let data = build_data(cfg)?;
    let samples = match split {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => {
            return Err(CliError::Config(format!(
                "split: expected train|val|test, got {other}"
            )))
        }
    };
    let (name, acc, confusion) = match model {
        EvalModel::Teacher => {
            let teacher = load_teacher(cfg, out)?;
            let (acc, confusion) = evaluate(&teacher, samples);
            ("teacher", acc, confusion)
        }
        EvalModel::Student => {
            let path = out.join("student_dynamic.ckpt");
            if !path.exists() {
                return Err(CliError::Missing(format!(
                    "student checkpoint {} not found; run `drfx distill` or `drfx compare` first",
                    path.display()
                )));
            }
            let mut student =
                Student::new(cfg.student.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
                    .map_err(cfg_err)?;
            load_checkpoint(&path, student.params_mut(), config_hash(&cfg.student))
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let (acc, confusion) = evaluate(&student, samples);
            ("student", acc, confusion)
        }
    };
    println!("{name} {split} accuracy: {acc:.4}");
    let conf_path = out.join(format!("eval_{name}_{split}_confusion.csv"));
    write_confusion_csv(&conf_path, &confusion).map_err(cfg_err)?;
    Ok(vec![conf_path.display().to_string()])
}

fn cmd_export_features(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
) -> CliResult<Vec<String>> {
    let path = checkpoint.unwrap_or_else(|| out.join("student_dynamic.ckpt"));
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "student checkpoint {} not found; run `drfx distill` or `drfx compare` first",
            path.display()
        )));
    }
    let data = build_data(cfg)?;
    let mut student = Student::new(cfg.student.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .map_err(cfg_err)?;
    load_checkpoint(&path, student.params_mut(), config_hash(&cfg.student))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;

    let (features, labels) = collect_features(&student, &data.test);
    let (coords, explained) = pca_project(&features, 2)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let csv_path = out.join("features_pca.csv");
    write_features_csv(&csv_path, &labels, &coords).map_err(cfg_err)?;
    println!(
        "explained variance: pc1 {:.4}, pc2 {:.4}",
        explained[0], explained[1]
    );
    Ok(vec![csv_path.display().to_string()])
}

#[allow(clippy::too_many_arguments)]
fn cmd_ingest(
    out: &Path,
    input: &Path,
    encoding: IngestEncoding,
    frame_len: usize,
    label: Option<u32>,
    label_manifest: Option<PathBuf>,
) -> CliResult<Vec<String>> {
    if !input.exists() {
        return Err(CliError::Missing(format!(
            "capture file {} not found",
            input.display()
        )));
    }
    let rule = match (label, label_manifest) {
        (Some(l), None) => LabelRule::PerFile(l),
        (None, Some(m)) => LabelRule::Manifest(m.display().to_string()),
        _ => {
            return Err(CliError::Config(
                "exactly one of --label or --label-manifest is required".into(),
            ))
        }
    };
    let layout = IngestLayout {
        encoding: match encoding {
            IngestEncoding::F32 => SampleEncoding::InterleavedF32,
            IngestEncoding::I16 => SampleEncoding::InterleavedI16,
        },
        frame_len,
        label: rule,
    };
    let frames = ingest_iq(input, &layout).map_err(cfg_err)?;
    let archive_path = out.join("frames.iqar");
    write_frame_archive(&archive_path, &frames).map_err(cfg_err)?;
    println!("ingested {} frames", frames.len());
    Ok(vec![archive_path.display().to_string()])
}

fn run(cli: Cli) -> CliResult<()> {
    std::fs::create_dir_all(&cli.out).map_err(io_ctx("create output dir"))?;
    // Ingest is config-independent; everything else validates the config up
    // front so field errors surface before any work.
    let (command, cfg, artifacts) = match &cli.cmd {
        Cmd::Ingest { input, encoding, frame_len, label, label_manifest } => {
            let artifacts = cmd_ingest(
                &cli.out,
                input,
                *encoding,
                *frame_len,
                *label,
                label_manifest.clone(),
            )?;
            ("ingest", None, artifacts)
        }
        other => {
            let cfg = load_config(&cli)?;
            let (command, artifacts) = match other {
                Cmd::Synth => ("synth", cmd_synth(&cfg, &cli.out)?),
                Cmd::Featurize { archive } => {
                    ("featurize", cmd_featurize(&cfg, &cli.out, archive.clone())?)
                }
                Cmd::TrainTeacher => ("train-teacher", cmd_train_teacher(&cfg, &cli.out)?),
                Cmd::Distill { mode, tau } => {
                    ("distill", cmd_distill(&cfg, &cli.out, *mode, *tau)?)
                }
                Cmd::Compare => ("compare", cmd_compare(&cfg, &cli.out)?),
                Cmd::Eval { model, split } => {
                    ("eval", cmd_eval(&cfg, &cli.out, *model, split)?)
                }
                Cmd::ExportFeatures { checkpoint } => (
                    "export-features",
                    cmd_export_features(&cfg, &cli.out, checkpoint.clone())?,
                ),
                Cmd::Ingest { .. } => unreachable!(),
            };
            (command, Some(cfg), artifacts)
        }
    };
    let manifest = Manifest {
        command: command.to_string(),
        seed: cfg.as_ref().map_or(0, |c| c.seed),
        config_hash: cfg.as_ref().map_or(0, config_hash),
        artifacts,
    };
    write_manifest(&cli.out, &manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
