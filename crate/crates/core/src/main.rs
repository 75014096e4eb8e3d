use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tabdistill::data::{self, Dataset, Schema};
use tabdistill::orchestrator::{
    evaluate_student, load_record, run_ablation, run_seeds, BaselineStrategy, BinningMode, Method, RunConfig,
    RunInputs,
};
use tabdistill::report;
use tabdistill::student::StudentNet;
use tabdistill::teachers::{train_teacher, TeacherFamily, TeacherOracle};
use tabdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "tabdistill", version, about = "Data-free distillation of tabular classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Single seed; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for teachers and run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on teacher queries. Distillation switches to the budget-matched
    /// schedule.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Directory with `<name>.csv` and `schemas/<name>.toml`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Target {
    dataset: String,
    #[arg(long, default_value = "nn")]
    family: TeacherFamily,
    /// Teacher model file; defaults to `<out>/teachers/<dataset>-<family>.json`.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    EntropyGuided,
}

#[derive(Subcommand)]
enum Command {
    /// Download a dataset CSV named by its schema.
    Fetch { dataset: String },
    /// Encode, standardize and split a dataset.
    Prepare { dataset: String },
    /// Train and save a teacher on the training split.
    TrainTeacher(Target),
    /// Three-phase distillation over every configured seed.
    Distill {
        #[command(flatten)]
        target: Target,
        /// Uniform bins instead of learned ones.
        #[arg(long = "static")]
        fixed: bool,
    },
    /// Query-budgeted baseline over every configured seed.
    Baseline {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, default_value = "random")]
        strategy: Strategy,
    },
    /// Dynamic against static binning on identical seeds.
    Ablation(Target),
    /// Recompute test metrics of a finished run directory.
    Evaluate { run: PathBuf },
    /// Aggregate run directories into table, curve and correlation CSVs.
    Report { root: Option<PathBuf> },
    /// Coverage/agreement correlation of every run below a directory.
    Correlate { root: Option<PathBuf> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_data() {
        2
    } else if e.is_numeric() || matches!(e, Error::UndefinedMetric(_)) {
        3
    } else {
        1
    }
}

fn base_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &g.data_dir {
        cfg.data_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepared_dir(data_dir: &Path, name: &str) -> PathBuf {
    data_dir.join("prepared").join(name)
}

/// The prepared dataset when present, otherwise prepared on the fly with
/// split seed 0.
fn load_dataset(cfg: &RunConfig, name: &str) -> Result<Dataset> {
    let dir = prepared_dir(&cfg.data_dir, name);
    if dir.join("meta.json").is_file() {
        return Dataset::load(&dir);
    }
    let (csv, schema) = data::dataset_paths(&cfg.data_dir, name);
    data::prepare(&csv, &Schema::load(&schema)?, 0)
}

fn teacher_path(cfg: &RunConfig, t: &Target) -> PathBuf {
    t.teacher.clone().or_else(|| cfg.teacher.clone()).unwrap_or_else(|| {
        cfg.out
            .join("teachers")
            .join(format!("{}-{}.json", t.dataset, t.family.tag()))
    })
}

fn run_dir(cfg: &RunConfig, t: &Target, method: &str) -> PathBuf {
    cfg.out.join(&t.dataset).join(t.family.tag()).join(method)
}

fn print_summary(records: &[tabdistill::orchestrator::RunRecord]) {
    for (d, t, m, metric, mean, std, n) in tabdistill::orchestrator::summary_rows(records) {
        println!("{d},{t},{m},{metric},{mean:.4},{std:.4},{n}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = base_config(g)?;
    match &cli.command {
        Command::Fetch { dataset } => fetch(&cfg, dataset),
        Command::Prepare { dataset } => {
            let (csv, schema) = data::dataset_paths(&cfg.data_dir, dataset);
            let ds = data::prepare(&csv, &Schema::load(&schema)?, g.seed.unwrap_or(0))?;
            let dir = prepared_dir(&cfg.data_dir, dataset);
            ds.save(&dir)?;
            println!(
                "{}: {} rows, {} features -> {}",
                dataset,
                ds.len(),
                ds.n_features(),
                dir.display()
            );
            Ok(())
        }
        Command::TrainTeacher(t) => {
            let ds = load_dataset(&cfg, &t.dataset)?;
            let (oracle, rep) = train_teacher(&ds, t.family, g.seed.unwrap_or(0))?;
            let path = teacher_path(&cfg, t);
            oracle.save(&path)?;
            println!("{}", serde_json::to_string(&rep)?);
            info!("teacher written to {}", path.display());
            Ok(())
        }
        Command::Distill { target, fixed } => {
            if *fixed {
                cfg.binning = BinningMode::Static;
            }
            let (ds, teacher, cfg) = setup(cfg, target, g.budget, true)?;
            let method = if *fixed { "distill_static" } else { "distill" };
            let dir = run_dir(&cfg, target, &with_budget(method, g.budget));
            let recs = run_seeds(inputs(&teacher, &ds), &cfg, Method::Distill, Some(&dir))?;
            print_summary(&recs);
            Ok(())
        }
        Command::Baseline { target, strategy } => {
            let (ds, teacher, cfg) = setup(cfg, target, g.budget, false)?;
            let s = match strategy {
                Strategy::Random => BaselineStrategy::Random,
                Strategy::EntropyGuided => BaselineStrategy::EntropyGuided,
            };
            let dir = run_dir(&cfg, target, s.tag());
            let recs = run_seeds(inputs(&teacher, &ds), &cfg, Method::Baseline(s), Some(&dir))?;
            print_summary(&recs);
            Ok(())
        }
        Command::Ablation(target) => {
            let (ds, teacher, cfg) = setup(cfg, target, g.budget, true)?;
            let dir = run_dir(&cfg, target, &with_budget("ablation", g.budget));
            let (d, s) = run_ablation(inputs(&teacher, &ds), &cfg, Some(&dir))?;
            print_summary(&d);
            print_summary(&s);
            Ok(())
        }
        Command::Evaluate { run } => evaluate(run),
        Command::Report { root } => {
            let root = root.clone().unwrap_or(cfg.out.clone());
            let out = root.join("report");
            let rows = report::write_report(&root, &out)?;
            print!("{}", report::table_csv(&rows));
            info!("report written to {}", out.display());
            Ok(())
        }
        Command::Correlate { root } => {
            let root = root.clone().unwrap_or(cfg.out.clone());
            print!("{}", report::correlation_csv(&report::correlations(&root)?));
            Ok(())
        }
    }
}

fn with_budget(method: &str, budget: Option<u64>) -> String {
    budget.map_or_else(|| method.to_string(), |b| format!("{method}-budget{b}"))
}

fn inputs<'a>(teacher: &'a TeacherOracle, ds: &'a Dataset) -> RunInputs<'a> {
    RunInputs {
        teacher: teacher.model(),
        dataset: ds,
    }
}

/// Dataset, teacher and the effective config of a run command.
fn setup(
    mut cfg: RunConfig,
    t: &Target,
    budget: Option<u64>,
    distill: bool,
) -> Result<(Dataset, TeacherOracle, RunConfig)> {
    cfg.dataset = t.dataset.clone();
    let path = teacher_path(&cfg, t);
    let teacher = TeacherOracle::load(&path)?;
    if teacher.family() != t.family {
        return Err(Error::InvalidArgument(format!(
            "{} holds a {} teacher, not {}",
            path.display(),
            teacher.family(),
            t.family
        )));
    }
    cfg.teacher = Some(path);
    if let Some(b) = budget {
        cfg = if distill { cfg.budget_matched(b)? } else { RunConfig { budget: Some(b), ..cfg } };
    }
    cfg.validate()?;
    let ds = load_dataset(&cfg, &t.dataset)?;
    Ok((ds, teacher, cfg))
}

fn evaluate(run: &Path) -> Result<()> {
    let rec = load_record(&run.join("record.json"))?;
    let cfg = &rec.config;
    let teacher_file = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Data("run config names no teacher file".into()))?;
    let teacher = TeacherOracle::load(teacher_file)?;
    let ds = load_dataset(cfg, &rec.dataset)?;
    let student = StudentNet::load(&run.join("student.json"))?;
    let m = evaluate_student(inputs(&teacher, &ds), &student)?;
    println!("{}", tabdistill::orchestrator::FINAL_HEADER);
    println!(
        "{},{},{},{},{:.6},{:.6},{},{:.6},{:.6},{},{}",
        rec.dataset,
        rec.family,
        rec.method,
        rec.seed,
        m.accuracy,
        m.f1,
        m.auc.map_or_else(|| "NA".into(), |v| format!("{v:.6}")),
        m.agreement,
        rec.coverage,
        rec.queries,
        rec.partial
    );
    Ok(())
}

#[cfg(feature = "fetch")]
fn fetch(cfg: &RunConfig, name: &str) -> Result<()> {
    let (csv, schema) = data::dataset_paths(&cfg.data_dir, name);
    let n = data::fetch(&Schema::load(&schema)?, &csv)?;
    println!("{name}: {n} bytes -> {}", csv.display());
    Ok(())
}

#[cfg(not(feature = "fetch"))]
fn fetch(_: &RunConfig, _: &str) -> Result<()> {
    Err(Error::InvalidArgument("built without the `fetch` feature".into()))
}
