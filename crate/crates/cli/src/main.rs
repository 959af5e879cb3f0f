//! `gdc`: dataset synthesis, training, ablation, evaluation, completion,
//! cost analysis, kernel visualization and the built-in self-test.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdc_core::ErrorCategory;

const EXIT_HELP: &str = "Exit codes: 0 success, 2 usage or malformed input, 3 file or format error, \
4 numeric failure (NaN or infinity), 5 self-test failure. On failure a single line \
`error[<category>]: <message>` is written to stderr.";

#[derive(Parser, Debug)]
#[command(name = "gdc", version, about = "Guided depth completion toolkit", after_help = EXIT_HELP)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset directory.
    Synth(commands::SynthArgs),
    /// Train one network and write a run directory.
    Train(commands::TrainArgs),
    /// Train several fusion schemes under identical seeds, data and budget.
    Ablate(commands::AblateArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(commands::EvalArgs),
    /// Complete one sparse depth map.
    Complete(commands::CompleteArgs),
    /// Kernel memory and MAC accounting, naive vs factorized.
    Cost(commands::CostArgs),
    /// Color-code guided kernels of one fusion stage.
    VizKernels(commands::VizArgs),
    /// Run the embedded invariant suite.
    Selftest(commands::SelftestArgs),
}

/// Exit status of a failed command.
#[derive(Debug)]
pub enum Failure {
    Core(gdc_core::Error),
    SelfTest(String),
}

impl From<gdc_core::Error> for Failure {
    fn from(e: gdc_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code_and_category(&self) -> (u8, &'static str) {
        match self {
            Failure::Core(e) => match e.category() {
                ErrorCategory::Usage => (2, "usage"),
                ErrorCategory::Io => (3, "io"),
                ErrorCategory::Numeric => (4, "numeric"),
            },
            Failure::SelfTest(_) => (5, "selftest"),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::SelfTest(s) => f.write_str(s),
        }
    }
}

fn header(command: &str, seed: Option<u64>, args: &impl std::fmt::Debug) -> String {
    let hash = gdc_core::rng::fnv1a(format!("{command} {args:?}").as_bytes());
    let seed = seed.map_or("none".to_string(), |s| s.to_string());
    format!(
        "# gdc {} command={command} seed={seed} config_hash={hash:016x}",
        env!("CARGO_PKG_VERSION")
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let result = match &cli.command {
        Command::Synth(a) => run("synth", Some(a.seed), a, commands::synth),
        Command::Train(a) => run("train", Some(a.train.seed), a, commands::train),
        Command::Ablate(a) => run("ablate", Some(a.train.seed), a, commands::ablate),
        Command::Eval(a) => run("eval", None, a, commands::eval),
        Command::Complete(a) => run("complete", None, a, commands::complete),
        Command::Cost(a) => run("cost", Some(a.seed), a, commands::cost),
        Command::VizKernels(a) => run("viz-kernels", None, a, commands::viz_kernels),
        Command::Selftest(a) => run("selftest", Some(a.seed), a, commands::selftest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, category) = f.code_and_category();
            let msg = f.to_string().replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run<A: Args + std::fmt::Debug>(
    name: &str,
    seed: Option<u64>,
    args: &A,
    f: fn(&A, &str) -> Result<(), Failure>,
) -> Result<(), Failure> {
    let h = header(name, seed, args);
    println!("{h}");
    f(args, &h)
}
