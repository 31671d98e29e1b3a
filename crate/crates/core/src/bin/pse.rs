fn main() {
    std::process::exit(pse::cli::run(std::env::args_os()));
}
