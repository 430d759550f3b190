use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = equivar_cli::run(&argv, &mut out);
    let _ = out.flush();
    ExitCode::from(code)
}
