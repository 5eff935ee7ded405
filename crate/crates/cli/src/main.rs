fn main() {
    std::process::exit(agc_cli::run(std::env::args_os()));
}
