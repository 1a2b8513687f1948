fn main() -> std::process::ExitCode {
    dropact_core::cli::main()
}
