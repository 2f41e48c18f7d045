use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stagewise::experiment::{load_config, run_experiment, write_artifacts, ConfigError, ExperimentError, PolicySelection};
use stagewise::gantt::render_gantt;
use stagewise::report::{compare_rows, format_csv, format_table, parse_report};
use stagewise::sim::parse_trace_csv;
use stagewise::tree::StageTree;

/// Writes to stdout, ignoring errors such as a closed pipe.
macro_rules! say {
    (raw $e:expr) => {{
        use std::io::Write as _;
        let _ = std::io::stdout().write_all(AsRef::<str>::as_ref(&$e).as_bytes());
    }};
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_SIMULATION: u8 = 3;

#[derive(Parser)]
#[command(name = "stagewise", version, about = "Stage-based execution of hyperparameter searches, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Trial,
    Stage,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an experiment config and write report, traces and charts.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        policy: PolicyArg,
    },
    /// Tabulate one or more report.json files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write compare.csv into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render a trace CSV as an SVG Gantt chart.
    Gantt {
        trace: PathBuf,
        /// Directory for the SVG; defaults to the trace's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print stage-tree statistics for a config without simulating.
    Tree {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the canonical tree as tree.json into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_VALIDATION, e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
            other => Failure::new(EXIT_SIMULATION, other),
        }
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_SIMULATION, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::new(EXIT_SIMULATION, format!("{}: {e}", path.display())))
}

fn run(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>, policy: PolicyArg) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let select = match policy {
        PolicyArg::Trial => PolicySelection::Trial,
        PolicyArg::Stage => PolicySelection::Stage,
        PolicyArg::Both => PolicySelection::Both,
    };
    let out = run_experiment(&cfg, select)?;
    let dir = out_dir
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    let written = write_artifacts(&out, &dir)?;
    say!(raw format_table(&compare_rows(std::slice::from_ref(&out.report))));
    for p in written {
        say!("wrote {}", p.display());
    }
    let mut failures = 0;
    for run in out.report.runs() {
        let failed: Vec<String> = run.failed_trials().map(ToString::to_string).collect();
        if !failed.is_empty() {
            eprintln!("{}: {} failed trials: {}", run.policy, failed.len(), failed.join(", "));
            failures += failed.len();
        }
    }
    // The report is written either way; failed trials are listed in it.
    if failures > 0 {
        return Err(Failure::new(EXIT_SIMULATION, format!("{failures} trial runs failed")));
    }
    Ok(())
}

fn compare(paths: &[PathBuf], out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut reports = Vec::new();
    let mut bad = 0;
    for p in paths {
        let parsed = fs::read_to_string(p)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_report(&text).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => reports.push(r),
            Err(e) => {
                eprintln!("{}: {e}", p.display());
                bad += 1;
            }
        }
    }
    let rows = compare_rows(&reports);
    say!(raw format_table(&rows));
    if let Some(dir) = out_dir {
        let path = dir.join("compare.csv");
        write_file(&path, &format_csv(&rows))?;
        say!("wrote {}", path.display());
    }
    if bad > 0 {
        return Err(Failure::new(EXIT_VALIDATION, format!("{bad} of {} reports could not be read", paths.len())));
    }
    Ok(())
}

fn gantt(trace: &Path, out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let text = fs::read_to_string(trace).map_err(|e| Failure::new(EXIT_VALIDATION, format!("{}: {e}", trace.display())))?;
    let records = parse_trace_csv(&text).map_err(|e| Failure::new(EXIT_VALIDATION, format!("{}: {e}", trace.display())))?;
    let svg = render_gantt(&records).map_err(|e| Failure::new(EXIT_VALIDATION, format!("{}: {e}", trace.display())))?;
    let dir = out_dir.unwrap_or_else(|| trace.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = trace.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
    let path = dir.join(format!("{stem}.svg"));
    write_file(&path, &svg)?;
    say!("wrote {}", path.display());
    Ok(())
}

fn tree(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let study = cfg.build_study()?;
    let tree = StageTree::from_trials(&study.trials).map_err(|e| Failure::new(EXIT_VALIDATION, e))?;
    let stats = tree.tree_stats().map_err(|e| Failure::new(EXIT_VALIDATION, e))?;
    say!("trials         {}", study.trials.len());
    say!("stages         {}", stats.stage_count);
    say!("roots          {}", tree.roots().len());
    say!("stage_epochs   {}", stats.stage_epochs);
    say!("trial_epochs   {}", stats.trial_epochs);
    say!("savings_ratio  {:.4}", stats.savings_ratio());
    if let Some(dir) = out_dir {
        let path = dir.join("tree.json");
        write_file(&path, &(tree.to_canonical_json() + "\n"))?;
        say!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            policy,
        } => run(&config, seed, out_dir, policy),
        Command::Compare { reports, out_dir } => compare(&reports, out_dir),
        Command::Gantt { trace, out_dir } => gantt(&trace, out_dir),
        Command::Tree { config, seed, out_dir } => tree(&config, seed, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
