mod args;
mod commands;

use std::ffi::OsString;
use std::fs;
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::Parser;
use kcef::data_io::Provenance;

use args::{Cli, Command};
use commands::{CliError, CliResult};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<OsString> = std::env::args_os().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": { "kind": format!("{:?}", e.kind).to_lowercase(), "message": e.message }
            });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(argv: Vec<OsString>) -> CliResult {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => {
                    print!("{e}");
                    Ok(())
                }
                _ => Err(CliError::usage(e.to_string().trim_end())),
            };
        }
    };
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure {threads} threads: {e}")))?;
    }
    if let Command::Replay(args) = &cli.command {
        let text = fs::read_to_string(&args.provenance)?;
        let recorded: Provenance = serde_json::from_str(&text)?;
        if recorded.args.first().map(String::as_str) == Some("replay") {
            return Err(CliError::usage("a replay cannot be replayed"));
        }
        let mut replay_argv: Vec<OsString> = vec![argv[0].clone()];
        replay_argv.extend(recorded.args.iter().map(OsString::from));
        replay_argv.push("--timestamp".into());
        replay_argv.push(recorded.timestamp.clone().into());
        return run(replay_argv);
    }
    let provenance = Provenance {
        tool: "kcef".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        args: recorded_args(&argv),
        seed: seed_of(&cli.command),
        timestamp: cli
            .timestamp
            .clone()
            .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
    };
    match &cli.command {
        Command::GenGrid(a) => commands::gen_grid(a, &provenance),
        Command::Fit(a) => commands::fit(a, &provenance),
        Command::Eval(a) => commands::eval(a, &provenance),
        Command::Sample(a) => commands::sample(a, &provenance),
        Command::Score(a) => commands::score(a, &provenance),
        Command::Diverge(a) => commands::diverge(a, &provenance),
        Command::Replay(_) => unreachable!("handled above"),
    }
}

/// Command-line arguments without the program name and any `--timestamp`.
fn recorded_args(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    while let Some(arg) = it.next() {
        if arg == "--timestamp" {
            it.next();
        } else if !arg.starts_with("--timestamp=") {
            out.push(arg);
        }
    }
    out
}

fn seed_of(command: &Command) -> Option<u64> {
    match command {
        Command::GenGrid(a) => Some(a.seed),
        Command::Fit(a) => Some(a.seed),
        Command::Eval(a) => Some(a.seed),
        Command::Sample(a) => Some(a.seed),
        Command::Diverge(a) => Some(a.seed),
        Command::Score(_) | Command::Replay(_) => None,
    }
}
