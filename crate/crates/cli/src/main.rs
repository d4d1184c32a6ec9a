fn main() {
    std::process::exit(pepr_cli::run(std::env::args_os()));
}
