use std::process::ExitCode;

use clap::Parser;
use cloudfcn_cli::{Cli, EXIT_INVALID, EXIT_OK};

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => ExitCode::from(cloudfcn_cli::run(cli)),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}
