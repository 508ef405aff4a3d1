fn main() {
    std::process::exit(edgegrid::cli::run_cli(std::env::args_os()));
}
