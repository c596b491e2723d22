fn main() {
    std::process::exit(prectr_cli::run(std::env::args_os()));
}
