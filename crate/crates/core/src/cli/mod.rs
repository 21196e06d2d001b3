//! The `mor` command line: subcommands, configuration and persistence.
//!
//! Exit codes: 0 success, 1 failure, 2 usage error.

pub mod checkpoint;
pub mod config;
pub mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::accounting::{count_table, llama7b_geometry, render_table, MethodSpec};
use crate::bench::{Student, TrainReport};
use crate::error::{MorError, Result};
use crate::matcore::{Matrix, Rng};
use crate::par::Exec;
use crate::rankops::truncation_curve;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use config::{parse_config, parse_config_str, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// File names written by `mor train` under the output directory.
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const ROUTER_FILE: &str = "router_mass.csv";
pub const CHECKPOINT_FILE: &str = "final.mor";

#[derive(Debug, Parser)]
#[command(name = "mor", version, about = "Mixture-of-Ranks adapter toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the built-in oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run suites one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Trainable-parameter table for a model geometry.
    CountParams {
        #[arg(long, value_enum, default_value_t = Preset::Llama7b)]
        preset: Preset,
        /// Single method; omit for the standard comparison table.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, default_value_t = 8)]
        r: u64,
        #[arg(long, default_value_t = 8)]
        n_experts: u64,
        #[arg(long)]
        json: bool,
    },
    /// Eckart-Young truncation curve as CSV.
    SvdCurve {
        /// CSV matrix, one row per line; a random Gaussian matrix if omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        rows: usize,
        #[arg(long, default_value_t = 24)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student on the synthetic multi-task teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task mean router weights of a trained checkpoint.
    RouterReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        n_per_task: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `router_report.json` and `router_report.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Llama7b,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Lora,
    Dora,
    Moelora,
    Mor,
}

/// Parses `argv` (including the program name) and runs the subcommand,
/// writing normal output to `out` and diagnostics to `err`.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_command(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Verify { seed, sequential } => {
            let exec = if sequential { Exec::Sequential } else { Exec::default() };
            let results = verify::run_suites(exec, seed);
            for r in &results {
                writeln!(out, "{:<22} {}  {}", r.name, if r.pass { "PASS" } else { "FAIL" }, r.detail)?;
            }
            let all = results.iter().all(|r| r.pass);
            writeln!(out, "{}", if all { "all suites passed" } else { "some suites FAILED" })?;
            Ok(if all { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::CountParams {
            preset: Preset::Llama7b,
            method,
            r,
            n_experts,
            json,
        } => {
            let specs = match method {
                Some(MethodArg::Lora) => vec![MethodSpec::lora(r)],
                Some(MethodArg::Dora) => vec![MethodSpec::dora(r)],
                Some(MethodArg::Moelora) => vec![MethodSpec::moelora(n_experts, r)],
                Some(MethodArg::Mor) => vec![MethodSpec::mor(n_experts, r)],
                None => vec![
                    MethodSpec::lora(8),
                    MethodSpec::lora(16),
                    MethodSpec::dora(8),
                    MethodSpec::moelora(2, 8),
                    MethodSpec::mor(8, 8),
                ],
            };
            let rows = count_table(&specs, &llama7b_geometry())?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
            } else {
                write!(out, "{}", render_table(&rows))?;
            }
            Ok(EXIT_OK)
        }
        Command::SvdCurve {
            input,
            rows,
            cols,
            seed,
            out: path,
        } => {
            let m = match input {
                Some(p) => read_matrix_csv(&p)?,
                None => Rng::new(seed).gaussian_matrix(rows, cols, 0.0, 1.0)?,
            };
            let csv = truncation_curve(&m)?.to_csv();
            match path {
                Some(p) => fs::write(p, csv)?,
                None => write!(out, "{csv}")?,
            }
            Ok(EXIT_OK)
        }
        Command::Train { config, out: dir } => {
            let cfg = parse_config(&config)?;
            let dir = dir.unwrap_or_else(|| cfg.out_dir.clone());
            let (report, student) = train_from_config(&cfg)?;
            write_run(&dir, &report, &student)?;
            writeln!(
                out,
                "trained {} parameters for {} steps; mean task error {:.4e}",
                report.trainable_params,
                cfg.steps,
                report.mean_task_error()
            )?;
            for (k, e) in report.task_errors.iter().enumerate() {
                writeln!(out, "task {k}: {e:.4e}")?;
            }
            writeln!(out, "wrote {}", dir.display())?;
            Ok(EXIT_OK)
        }
        Command::RouterReport {
            checkpoint,
            config,
            n_per_task,
            seed,
            out: dir,
        } => {
            let cfg = parse_config(&config)?;
            let student = read_checkpoint(&checkpoint)?;
            let teacher = cfg.teacher()?;
            if student.base() != &teacher.base {
                return Err(MorError::InvalidArgument(
                    "checkpoint base weight does not match the config's teacher".into(),
                ));
            }
            let mass = student.router_report(&teacher, n_per_task, &mut Rng::new(seed))?;
            let json = serde_json::to_string_pretty(&RouterMass::from(&mass))?;
            writeln!(out, "{json}")?;
            if let Some(dir) = dir {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("router_report.json"), format!("{json}\n"))?;
                fs::write(dir.join("router_report.csv"), matrix_csv(&mass))?;
            }
            Ok(EXIT_OK)
        }
    }
}

#[derive(Serialize)]
struct RouterMass {
    tasks: usize,
    experts: usize,
    mass: Vec<Vec<f64>>,
}

impl From<&Matrix> for RouterMass {
    fn from(m: &Matrix) -> Self {
        RouterMass {
            tasks: m.rows(),
            experts: m.cols(),
            mass: (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
        }
    }
}

/// Builds the teacher and student described by `cfg` and trains.
pub fn train_from_config(cfg: &RunConfig) -> Result<(TrainReport, Student)> {
    cfg.validate()?;
    let teacher = cfg.teacher()?;
    let mut student = Student::init(
        cfg.method,
        &teacher,
        cfg.r,
        cfg.student_experts(),
        cfg.alpha,
        cfg.router_kind(),
        cfg.seed,
    )?;
    let report = student.train(&teacher, &cfg.train_config())?;
    Ok((report, student))
}

/// Writes the report JSON, loss CSV, router-mass CSV and final checkpoint.
pub fn write_run(dir: &Path, report: &TrainReport, student: &Student) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), format!("{}\n", serde_json::to_string_pretty(report)?))?;
    fs::write(dir.join(LOSS_FILE), report.loss_csv())?;
    if let Some(mass) = &report.router_mass {
        fs::write(dir.join(ROUTER_FILE), matrix_csv(&Matrix::from_rows(mass)?))?;
    }
    write_checkpoint(student, &dir.join(CHECKPOINT_FILE))
}

fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::from("task");
    for j in 0..m.cols() {
        s.push_str(&format!(",expert_{j}"));
    }
    s.push('\n');
    for i in 0..m.rows() {
        s.push_str(&i.to_string());
        for v in m.row(i) {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}

/// Reads a headerless numeric CSV into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MorError::InvalidArgument(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MorError::InvalidArgument(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    MorError::InvalidArgument(format!("{}: line {}: `{f}` is not a number", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MorError::Empty("read_matrix_csv"));
    }
    Matrix::from_rows(&rows)
}
