use std::process::ExitCode;

use clap::Parser;
use noiseprompt_cli::{log_line, run, Cli};

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and on a bare invocation
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log_line(&serde_json::json!({"event": "error", "message": format!("{e:#}")}));
            ExitCode::FAILURE
        }
    }
}
