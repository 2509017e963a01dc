use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(seqmatch::cli::run() as u8)
}
