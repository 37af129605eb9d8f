use std::process::ExitCode;

use clap::Parser;
use corrsig_cli::{run, Args, Outcome};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(Outcome::Stage(log)) => {
            println!("{}", serde_json::to_string_pretty(&log).expect("run log serialises"));
            ExitCode::SUCCESS
        }
        Ok(Outcome::Report(r)) => {
            print!("{}", r.markdown());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
