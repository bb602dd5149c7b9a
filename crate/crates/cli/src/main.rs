fn main() {
    std::process::exit(adtext_cli::run(std::env::args_os()));
}
