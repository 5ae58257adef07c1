fn main() {
    std::process::exit(mzsr::cli::run_cli(std::env::args_os()));
}
