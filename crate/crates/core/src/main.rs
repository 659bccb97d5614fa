fn main() -> std::process::ExitCode {
    vodkit::cli::main()
}
