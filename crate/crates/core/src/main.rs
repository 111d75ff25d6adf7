fn main() -> std::process::ExitCode {
    promptdet::cli::run()
}
