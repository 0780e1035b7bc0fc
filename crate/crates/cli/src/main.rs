fn main() {
    std::process::exit(elogcov_cli::main_with_args(std::env::args_os()));
}
