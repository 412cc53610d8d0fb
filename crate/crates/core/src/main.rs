fn main() -> std::process::ExitCode {
    cmir::cli::main()
}
