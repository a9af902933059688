fn main() -> std::process::ExitCode {
    weakpair::cli::main()
}
