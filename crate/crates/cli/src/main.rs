use std::collections::HashMap;
use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let env: HashMap<String, String> = std::env::vars().collect();
    let outcome = mixlaw_cli::run(&argv, &env);
    if outcome.exit_code == 0 {
        println!("{}", outcome.summary.trim_end());
    } else {
        eprintln!("{}", outcome.summary.trim_end());
    }
    ExitCode::from(outcome.exit_code as u8)
}
