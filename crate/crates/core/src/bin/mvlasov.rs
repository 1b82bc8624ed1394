fn main() {
    std::process::exit(mvlasov::cli::main_with_args(std::env::args_os()));
}
