use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    ExitCode::from(specunet_cli::main_with(std::env::args(), &mut stdout))
}
