fn main() -> std::process::ExitCode {
    fadekit::cli::main()
}
