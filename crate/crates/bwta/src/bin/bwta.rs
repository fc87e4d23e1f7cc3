use std::process::ExitCode;

fn main() -> ExitCode {
    bwta::cli::main_entry()
}
