use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ensim_core::estimate::estimate_ensemble_accuracy;
use ensim_core::metrics::MetricsReport;
use ensim_core::scenario::{Overrides, Scenario};
use ensim_core::selector::SelectionPolicy;
use ensim_core::sim::{compare_policies, prepare, run_prepared};
use ensim_core::validate::{run_checks, ValidateOptions};
use ensim_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "ensim", version, about = "Simulate cost-aware ensemble serving on transient instances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write summary.json, latency.csv, timeseries.csv and cost.csv.
    Run(RunArgs),
    /// Run several policies on the same trace and seed.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated policies to compare.
        #[arg(long, value_delimiter = ',', default_value = "single-best,full-static,drop-one,dynamic")]
        policies: Vec<SelectionPolicy>,
    },
    /// Run the built-in self-checks.
    Validate {
        /// Smaller samples and shorter simulations.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_estimator: f64,
    },
    /// Write the scenario's generated query stream as CSV.
    EmitTrace {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Majority-vote accuracy of independent models, e.g. `estimate 0.7x10 0.9`.
    Estimate {
        #[arg(required = true, value_name = "ACCURACY[xCOUNT]")]
        accuracies: Vec<String>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file, or a bundled name such as `strict_wiki`.
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Trace duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    policy: Option<SelectionPolicy>,
    #[arg(long)]
    failure_prob: Option<f64>,
    #[arg(long)]
    bid_fraction: Option<f64>,
    /// Selector sampling interval in seconds.
    #[arg(long)]
    sampling_interval: Option<f64>,
}

impl ScenarioArgs {
    fn load(&self) -> ensim_core::Result<Scenario> {
        let mut s = Scenario::resolve(&self.scenario)?;
        s.apply(&Overrides {
            seed: self.seed,
            duration_s: self.duration,
            policy: self.policy,
            failure_prob: self.failure_prob,
            bid_fraction: self.bid_fraction,
            sampling_interval_s: self.sampling_interval,
        })?;
        Ok(s)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, env = "ENSIM_OUT_DIR", default_value = "ensim-out")]
    out_dir: PathBuf,
    /// Print the summary as JSON instead of a one-line digest.
    #[arg(long)]
    json: bool,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

/// Emit into a sibling temp dir, then rename, so errors leave no partial outputs.
fn emit_atomically(out_dir: &Path, write: impl FnOnce(&Path) -> ensim_core::Result<()>) -> ensim_core::Result<()> {
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| io_error(&parent, e))?;
    let name = out_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    let result = write(&staging).and_then(|()| {
        if out_dir.exists() {
            std::fs::remove_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
        }
        std::fs::rename(&staging, out_dir).map_err(|e| io_error(out_dir, e))
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staging);
    }
    result
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_report(report: &MetricsReport, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(&report.summary).expect("summary serializes"));
    } else {
        println!("{}", report.one_line());
    }
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let scenario = match args.scenario.load() {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let report = match prepare(&scenario).and_then(|p| run_prepared(&p, None, &mut ())) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if let Err(e) = emit_atomically(&args.out_dir, |dir| report.emit(dir)) {
        return fail(&e);
    }
    print_report(&report, args.json);
    ExitCode::SUCCESS
}

fn cmd_compare(args: &RunArgs, policies: &[SelectionPolicy]) -> ExitCode {
    let scenario = match args.scenario.load() {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let comparison = match compare_policies(&scenario, policies) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Err(e) = emit_atomically(&args.out_dir, |dir| comparison.emit(dir)) {
        return fail(&e);
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&comparison.summaries()).expect("summaries serialize"));
    } else {
        for report in comparison.runs.values() {
            println!("{}", report.one_line());
        }
    }
    ExitCode::SUCCESS
}

fn cmd_validate(quick: bool, json: bool, perturb: f64) -> ExitCode {
    let results = run_checks(&ValidateOptions {
        quick,
        estimator_perturbation: perturb,
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&results).expect("results serialize"));
    } else {
        for r in &results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    }
}

fn cmd_emit_trace(args: &ScenarioArgs, output: Option<&Path>) -> ExitCode {
    let trace = match args.load().and_then(|s| prepare(&s)) {
        Ok(p) => p.trace,
        Err(e) => return fail(&e),
    };
    let result = match output {
        Some(path) => {
            let mut buf = Vec::new();
            trace
                .write_csv(&mut buf)
                .and_then(|()| std::fs::write(path, buf).map_err(|e| io_error(path, e)))
        }
        None => trace.write_csv(std::io::stdout().lock()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

/// `0.7`, `0.7x10` or `0.7×10`.
fn parse_accuracy(arg: &str) -> Result<Vec<f64>, String> {
    let (value, count) = match arg.split_once(['x', '×', '*']) {
        Some((v, n)) => {
            let n: usize = n.trim().parse().map_err(|_| format!("bad repeat count in `{arg}`"))?;
            (v, n)
        }
        None => (arg, 1),
    };
    let a: f64 = value.trim().parse().map_err(|_| format!("not a number: `{arg}`"))?;
    Ok(vec![a; count])
}

fn cmd_estimate(args: &[String]) -> ExitCode {
    let mut accuracies = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        // allow `0.7 x10` as two words
        let joined;
        let arg = match it.peek() {
            Some(next) if next.starts_with(['x', '×']) => {
                joined = format!("{arg}{}", it.next().unwrap());
                &joined
            }
            _ => arg,
        };
        match parse_accuracy(arg) {
            Ok(v) => accuracies.extend(v),
            Err(msg) => {
                eprintln!("error: {msg}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    match estimate_ensemble_accuracy(&accuracies) {
        Ok(p) => {
            println!("{p:.6}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare { run, policies } => cmd_compare(run, policies),
        Command::Validate {
            quick,
            json,
            perturb_estimator,
        } => cmd_validate(*quick, *json, *perturb_estimator),
        Command::EmitTrace { scenario, output } => cmd_emit_trace(scenario, output.as_deref()),
        Command::Estimate { accuracies } => cmd_estimate(accuracies),
    }
}
