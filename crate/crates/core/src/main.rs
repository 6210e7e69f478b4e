fn main() {
    std::process::exit(rmt_equiv::cli::main_with_args(std::env::args_os()));
}
