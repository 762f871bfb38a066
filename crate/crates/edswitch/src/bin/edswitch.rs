fn main() -> std::process::ExitCode {
    edswitch::cli::main()
}
