mod args;
mod commands;
mod meta;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit status for usage errors, matching clap's own.
const USAGE: u8 = 2;

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Label(a) => commands::label(a),
        Command::Embed(a) => commands::embed(a),
        Command::Featurize(a) => commands::featurize_cmd(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Baselines(a) => commands::baselines(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Report(a) => commands::report(a),
    }
}

/// One JSON object on one line: `{"error": kind, "message": text}`.
fn error_line(err: &anyhow::Error) -> (String, u8) {
    let core = err.chain().find_map(|e| e.downcast_ref::<sguq_core::Error>());
    let io = err.chain().find_map(|e| e.downcast_ref::<std::io::Error>());
    let kind = match (core, io) {
        (Some(e), _) => e.kind(),
        (None, Some(_)) => "io",
        _ => "error",
    };
    let message = format!("{err:#}").replace('\n', " ");
    let line = serde_json::json!({ "error": kind, "message": message }).to_string();
    let code = if kind == "argument" { USAGE } else { 1 };
    (line, code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (line, code) = error_line(&err);
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
