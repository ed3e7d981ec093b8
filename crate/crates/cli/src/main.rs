fn main() {
    std::process::exit(docspot_cli::run(std::env::args_os()));
}
