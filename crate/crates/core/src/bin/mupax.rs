fn main() -> std::process::ExitCode {
    mupax::cli::main()
}
