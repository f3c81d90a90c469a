fn main() {
    std::process::exit(capsnet_cli::run(std::env::args_os()));
}
