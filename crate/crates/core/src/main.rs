fn main() {
    std::process::exit(zooadapt::cli::main_with_args(std::env::args_os()));
}
