fn main() {
    std::process::exit(pgcn_cli::main_with_args(std::env::args_os()));
}
