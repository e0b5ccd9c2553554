fn main() {
    std::process::exit(graphac_cli::run(std::env::args_os()));
}
