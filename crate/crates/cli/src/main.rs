fn main() {
    std::process::exit(msac_cli::run(std::env::args_os()));
}
