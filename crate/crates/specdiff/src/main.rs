fn main() -> std::process::ExitCode {
    specdiff::cli::run()
}
