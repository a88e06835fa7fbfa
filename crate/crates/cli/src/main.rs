use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = wbstudio::commands::Cli::parse();
    match wbstudio::commands::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.code as u8)
        }
    }
}
