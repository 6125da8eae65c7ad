fn main() -> std::process::ExitCode {
    ordinal_lvm::cli::main()
}
