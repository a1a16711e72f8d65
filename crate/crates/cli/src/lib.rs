//! Command-line front end: `plan`, `run`, `bench build`, `bench eval` and `eval`.
//!
//! Exit codes: 0 success, 1 usage, I/O or configuration errors, 2 malformed
//! LLM output, 3 schema errors in input files.

pub mod args;
pub mod commands;
pub mod config;
pub mod stack;

use std::io::Write;

use args::{BenchCommand, Cli, Command, LogFormat};
use clap::Parser;
use dreamstory_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_LLM_FORMAT: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::LlmFormat { .. } | Error::SceneCountMismatch { .. }) => EXIT_LLM_FORMAT,
        Some(Error::Schema { .. }) => EXIT_SCHEMA,
        _ => EXIT_FAILURE,
    }
}

fn init_logging(format: LogFormat) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if format == LogFormat::Json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    // a second call in the same process keeps the first logger
    let _ = builder.try_init();
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    init_logging(cli.log);
    match dispatch(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            log::debug!("exit code {code}");
            code
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Plan(a) => commands::plan(a, &file),
        Command::Run(a) => commands::run(a, &file, cli.config.as_deref(), argv),
        Command::Bench(BenchCommand::Build(a)) => commands::bench_build(a, &file),
        Command::Bench(BenchCommand::Eval(a)) => commands::bench_eval(a, &file),
        Command::Eval(a) => commands::eval(a, &file),
    }
}
