use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hyperspawn_cli::{dispatch, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let inv = dispatch(cli)?;
    let mut err = std::io::stderr().lock();
    for m in &inv.output.messages {
        let _ = writeln!(err, "{m}");
    }
    if let Some(body) = inv.emit()? {
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(body.as_bytes());
    }
    if inv.output.failures.is_empty() {
        Ok(0)
    } else {
        let _ = writeln!(err, "failed: {}", inv.output.failures.join(", "));
        Ok(1)
    }
}
