fn main() {
    std::process::exit(debias_cli::main_with_args(std::env::args_os()));
}
