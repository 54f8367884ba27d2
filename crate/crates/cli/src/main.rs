fn main() {
    std::process::exit(vlaquant_cli::run_main(std::env::args_os()));
}
