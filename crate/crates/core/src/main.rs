fn main() {
    std::process::exit(elcic::cli_runner::main_with_args(std::env::args_os()));
}
