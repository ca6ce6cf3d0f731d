fn main() {
    std::process::exit(qpnls::cli::run(std::env::args_os()));
}
