use std::process::ExitCode;

use clap::Parser;
use powertalk::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("POWERTALK_LOG")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!(
                "{}",
                serde_json::json!({"error": {"category": category.as_str(), "message": e.to_string()}})
            );
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
