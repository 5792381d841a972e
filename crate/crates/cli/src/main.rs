fn main() {
    std::process::exit(nodule_cli::run(std::env::args_os()));
}
