//! Command-line surface: tractogram comparison and aggregation, phantom
//! generation, model training, tracking, and the gradient-check oracle.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use streamtrace::metric;
use streamtrace::model::{self, ArchConfig, Role, StudentNet, TeacherNet};
use streamtrace::phantom::{self, PhantomSpec};
use streamtrace::report::{self, PairStats, Report, ReportConfig};
use streamtrace::tracking::{self, Predictor, TrackingConfig};
use streamtrace::tracts;
use streamtrace::training::{self, StudentSubject, TeacherSubject, TrainConfig};
use streamtrace::volumes::{self, Mask};
use streamtrace::Error;

#[derive(Parser)]
#[command(
    name = "streamtrace",
    about = "Streamline tractography toolkit: epsilon-ball comparison metric, \
             recurrent teacher-student tracking, synthetic phantoms",
    version
)]
struct Cli {
    /// Cap worker threads (default: all cores). Results are independent of
    /// the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare tractogram A against B with the epsilon-ball seeding metric
    Compare(CompareArgs),
    /// Merge per-pair comparison reports into cohort statistics
    Aggregate(AggregateArgs),
    /// Generate a tractogram by seeding and propagating streamlines
    Track(TrackArgs),
    /// Train the teacher network on (features, tracts) subjects
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student network from a trained teacher
    TrainStudent(TrainStudentArgs),
    /// Build a synthetic phantom (volumes + ground-truth tracts)
    Phantom(PhantomArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CompareArgs {
    /// Query tractogram (.tck)
    a: PathBuf,
    /// Reference tractogram (.tck)
    b: PathBuf,
    /// Seed-ball radius in mm
    #[arg(long, default_value_t = metric::DEFAULT_RADIUS_MM)]
    radius_mm: f64,
    /// Resampling point count per streamline
    #[arg(long, default_value_t = metric::DEFAULT_POINTS)]
    points: usize,
    /// Sample this many streamlines from each input before comparing
    #[arg(long)]
    sample: Option<usize>,
    /// RNG seed for sampling
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report output path (JSON)
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also write the outlier query streamlines as a .tck
    #[arg(long)]
    export_outliers: Option<PathBuf>,
    /// Also write per-streamline distance scalars for color rendering
    #[arg(long)]
    export_colors: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Per-pair report JSON files
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Cohort output path (JSON)
    #[arg(long, default_value = "cohort.json")]
    out: PathBuf,
    /// Optional cohort CSV output
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    /// Weights container for a recurrent predictor (expects a .json
    /// architecture sidecar next to it)
    #[arg(long, conflicts_with = "field")]
    weights: Option<PathBuf>,
    /// Vector-field NIfTI for field-following tracking
    #[arg(long)]
    field: Option<PathBuf>,
    /// Input volume for the model (teacher features or student context)
    #[arg(long, requires = "weights")]
    volume: Option<PathBuf>,
    /// Tracking mask NIfTI
    #[arg(long)]
    mask: PathBuf,
    /// Number of streamlines to keep
    #[arg(long)]
    count: Option<usize>,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Tracking config JSON (flags override its fields)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output tractogram (.tck); seeds sidecar and generation log are
    /// written next to it
    #[arg(long, default_value = "tracked.tck")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// Data directory: train/<subject>/{features.nii,truth.tck} and
    /// val/<subject>/{features.nii,truth.tck}
    data: PathBuf,
    /// Training config JSON: {"arch": {...}, "train": {...}}
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output weights path (arch sidecar and loss CSV written next to it)
    #[arg(long, default_value = "teacher.weights")]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Resume from an earlier weights file
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainStudentArgs {
    /// Data directory: train/<subject>/{context.nii,features.nii,truth.tck}
    /// and val/... in the same layout
    data: PathBuf,
    /// Trained teacher weights (with .json arch sidecar)
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "student.weights")]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec JSON (kind, dims, geometry, noise, seed)
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (field.nii, mask.nii, features.nii, context.nii,
    /// truth.tck)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Architecture config JSON (default: tiny check configuration)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Test hook: corrupt the computed error to exercise the failure path
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are successes; everything else is usage
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    let result = match cli.command {
        Command::Compare(a) => cmd_compare(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Track(a) => cmd_track(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::TrainStudent(a) => cmd_train_student(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 usage, 2 data/format, 3 numeric.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::SampleTooLarge { .. } => 1,
        Error::NonFinite(_)
        | Error::NonFiniteStreamline { .. }
        | Error::NonFiniteLoss { .. }
        | Error::UndefinedStats(_)
        | Error::DegenerateTracking(_)
        | Error::BatchTooSmall(_)
        | Error::EmptyMask => 3,
        _ => 2,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.into(),
        reason: format!("JSON: {e}"),
    })
}

fn echo<T: serde::Serialize>(label: &str, cfg: &T) {
    println!(
        "{label} config: {}",
        serde_json::to_string(cfg).unwrap_or_else(|_| "<unprintable>".into())
    );
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, Error> {
    let mut a = tracts::read_tck(&args.a)?;
    let mut b = tracts::read_tck(&args.b)?;
    if let Some(n) = args.sample {
        a = tracts::sample(&a, n, args.seed)?;
        b = tracts::sample(&b, n, args.seed.wrapping_add(1))?;
    }
    let config = ReportConfig {
        radius_mm: args.radius_mm,
        points: args.points,
        rng_seed: args.sample.map(|_| args.seed),
        sample: args.sample,
        input_a: Some(args.a.display().to_string()),
        input_b: Some(args.b.display().to_string()),
        input_a_hash: Some(report::file_fingerprint(&args.a)?),
        input_b_hash: Some(report::file_fingerprint(&args.b)?),
    };
    echo("compare", &config);
    let results = metric::compare(&a, &b, args.radius_mm, args.points, None)?;
    let stats = report::summarize(&results, report::DEFAULT_BIN_WIDTH_MM)?;
    report::write_report(&Report { stats, config }, &args.out)?;
    println!("report written to {}", args.out.display());
    if let Some(path) = args.export_outliers {
        let (outliers, _) = report::export_outliers(&a, &results)?;
        tracts::write_tck(&outliers, &path)?;
        println!("outliers written to {}", path.display());
    }
    if let Some(path) = args.export_colors {
        let colors = report::color_scalars(&a, &results)?;
        std::fs::write(&path, colors).map_err(|e| Error::io(&path, e))?;
        println!("color scalars written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_aggregate(args: AggregateArgs) -> Result<ExitCode, Error> {
    let mut pairs: Vec<(String, PairStats)> = Vec::new();
    for path in &args.reports {
        let r = report::read_report(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        pairs.push((name, r.stats));
    }
    let cohort = report::aggregate(&pairs)?;
    let n_pairs = pairs.len();
    echo("aggregate", &cohort);
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "pairs": pairs.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "cohort": cohort,
    }))
    .expect("serializable");
    std::fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))?;
    println!("cohort written to {}", args.out.display());
    if let Some(csv) = args.csv {
        let text = report::cohort_csv(&[(format!("{n_pairs}"), cohort)]);
        std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
        println!("cohort CSV written to {}", csv.display());
    }
    Ok(ExitCode::SUCCESS)
}

enum LoadedPredictor {
    Field(volumes::Volume),
    Teacher(TeacherNet, volumes::Volume),
    Student(StudentNet, volumes::Volume),
}

fn cmd_track(args: TrackArgs) -> Result<ExitCode, Error> {
    let mut cfg: TrackingConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrackingConfig::default(),
    };
    if let Some(n) = args.count {
        cfg.target_count = n;
    }
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    echo("track", &cfg);

    let mask = Mask::new(volumes::read_nifti(&args.mask)?)?;
    let loaded = match (&args.weights, &args.field) {
        (Some(w), None) => {
            let volume_path = args.volume.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--weights requires --volume (model input NIfTI)".into())
            })?;
            let volume = volumes::read_nifti(volume_path)?;
            let arch: ArchConfig = model::read_config_sidecar(w)?;
            let weights = model::load_weights(w)?;
            match weights.role {
                Role::Teacher => {
                    LoadedPredictor::Teacher(TeacherNet::from_weights(&weights, &arch)?, volume)
                }
                Role::Student => {
                    LoadedPredictor::Student(StudentNet::from_weights(&weights, &arch)?, volume)
                }
            }
        }
        (None, Some(f)) => LoadedPredictor::Field(volumes::read_nifti(f)?),
        _ => {
            return Err(Error::InvalidConfig(
                "exactly one of --weights or --field is required".into(),
            ))
        }
    };
    let pred = match &loaded {
        LoadedPredictor::Field(v) => Predictor::Field(v),
        LoadedPredictor::Teacher(net, v) => Predictor::Teacher {
            net,
            features: v,
        },
        LoadedPredictor::Student(net, v) => Predictor::Student {
            net,
            context: v,
        },
    };

    let (tracts_out, log) = tracking::generate_tractogram(&pred, &cfg, &mask)?;
    tracts::write_tck(&tracts_out, &args.out)?;
    let seeds: Vec<usize> = tracts_out
        .streamlines
        .iter()
        .map(|s| s.seed_index())
        .collect();
    tracts::write_seeds(&seeds, args.out.with_extension("seeds"))?;
    let log_path = args.out.with_extension("log.json");
    let log_json = serde_json::to_string_pretty(&log).expect("serializable");
    std::fs::write(&log_path, log_json).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "tracked {} streamlines ({} batches) -> {}",
        tracts_out.len(),
        log.batches.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize, serde::Deserialize, Default)]
struct TrainFileConfig {
    #[serde(default)]
    arch: Option<ArchConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn load_train_config(
    path: Option<&PathBuf>,
    ov: &TrainOverrides,
    default_arch: ArchConfig,
) -> Result<(ArchConfig, TrainConfig), Error> {
    let file: TrainFileConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainFileConfig::default(),
    };
    let arch = file.arch.unwrap_or(default_arch);
    let mut train = file.train.unwrap_or_default();
    if let Some(v) = ov.epochs {
        train.max_epochs = v;
    }
    if let Some(v) = ov.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = ov.lr {
        train.lr = v;
    }
    if let Some(v) = ov.seed {
        train.rng_seed = v;
    }
    if let Some(v) = ov.lambda {
        train.lambda_contrastive = v;
    }
    Ok((arch, train))
}

fn subject_dirs(root: &Path, split: &str) -> Result<Vec<PathBuf>, Error> {
    let dir = root.join(split);
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no subject directories under {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn load_teacher_subjects(root: &Path, split: &str) -> Result<Vec<TeacherSubject>, Error> {
    subject_dirs(root, split)?
        .into_iter()
        .map(|d| {
            Ok(TeacherSubject {
                features: volumes::read_nifti(d.join("features.nii"))?,
                tracts: tracts::read_tck(d.join("truth.tck"))?,
            })
        })
        .collect()
}

fn load_student_subjects(root: &Path, split: &str) -> Result<Vec<StudentSubject>, Error> {
    subject_dirs(root, split)?
        .into_iter()
        .map(|d| {
            Ok(StudentSubject {
                context: volumes::read_nifti(d.join("context.nii"))?,
                features: volumes::read_nifti(d.join("features.nii"))?,
                tracts: tracts::read_tck(d.join("truth.tck"))?,
            })
        })
        .collect()
}

fn reject_resume(resume: &Option<PathBuf>) -> Result<(), Error> {
    if resume.is_some() {
        return Err(Error::InvalidConfig(
            "--resume is not supported: the optimizer state (Adam moments) is \
             not persisted in the weights container, so training cannot \
             continue where it stopped; rerun from scratch"
                .into(),
        ));
    }
    Ok(())
}

fn cmd_train_teacher(args: TrainTeacherArgs) -> Result<ExitCode, Error> {
    reject_resume(&args.resume)?;
    let train_subjects = load_teacher_subjects(&args.data, "train")?;
    let val_subjects = load_teacher_subjects(&args.data, "val")?;
    let c_in = train_subjects[0].features.channels;
    let (arch, cfg) = load_train_config(
        args.config.as_ref(),
        &args.overrides,
        ArchConfig::desk_scale(c_in, c_in),
    )?;
    echo("train-teacher arch", &arch);
    echo("train-teacher", &cfg);
    let result = training::train_teacher(&train_subjects, &val_subjects, &arch, &cfg)?;
    model::save_weights(&result.net.to_weights(), &args.out)?;
    model::write_config_sidecar(&arch, &args.out)?;
    training::write_loss_curve(args.out.with_extension("curve.csv"), &result.curve)?;
    println!(
        "best epoch {} (validation loss {:.6}); weights -> {}",
        result.best_epoch,
        result.best_val_loss,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_student(args: TrainStudentArgs) -> Result<ExitCode, Error> {
    reject_resume(&args.resume)?;
    let train_subjects = load_student_subjects(&args.data, "train")?;
    let val_subjects = load_student_subjects(&args.data, "val")?;
    let arch: ArchConfig = model::read_config_sidecar(&args.teacher)?;
    let teacher = TeacherNet::from_weights(&model::load_weights(&args.teacher)?, &arch)?;
    let (_, cfg) = load_train_config(args.config.as_ref(), &args.overrides, arch.clone())?;
    echo("train-student arch", &arch);
    echo("train-student", &cfg);
    let result = training::train_student(&train_subjects, &val_subjects, &teacher, &cfg)?;
    model::save_weights(&result.net.to_weights(), &args.out)?;
    model::write_config_sidecar(&arch, &args.out)?;
    training::write_loss_curve(args.out.with_extension("curve.csv"), &result.curve)?;
    println!(
        "best epoch {} (validation loss {:.6}); weights -> {}",
        result.best_epoch,
        result.best_val_loss,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_phantom(args: PhantomArgs) -> Result<ExitCode, Error> {
    let spec: PhantomSpec = read_json(&args.spec)?;
    echo("phantom", &spec);
    let ph = phantom::build(&spec)?;
    let field = phantom::field_volume(&spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    volumes::write_nifti(&field, args.out.join("field.nii"))?;
    volumes::write_nifti(ph.wm_mask.volume(), args.out.join("mask.nii"))?;
    volumes::write_nifti(&ph.feature_volume, args.out.join("features.nii"))?;
    volumes::write_nifti(&ph.context_volume, args.out.join("context.nii"))?;
    tracts::write_tck(&ph.ground_truth, args.out.join("truth.tck"))?;
    let echo_path = args.out.join("phantom-config.json");
    std::fs::write(
        &echo_path,
        serde_json::to_string_pretty(&spec).expect("serializable"),
    )
    .map_err(|e| Error::io(&echo_path, e))?;
    println!(
        "phantom ({} ground-truth streamlines) written to {}",
        ph.ground_truth.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let arch: ArchConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ArchConfig {
            c_in: 4,
            context_channels: 3,
            embed_dim: 8,
            hidden_dim: 8,
            mlp_blocks: 4,
            gru_layers: 2,
        },
    };
    echo("gradcheck", &arch);
    let mut worst = 0.0f64;
    for (role, label) in [(Role::Teacher, "teacher"), (Role::Student, "student")] {
        let mut err = training::grad_check(&arch, role, args.seed)?;
        if args.corrupt {
            err += 1.0;
        }
        println!("{label}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    if worst >= 1e-3 {
        eprintln!("error: gradient check failed (max relative error {worst:.3e} >= 1e-3)");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}
