fn main() {
    std::process::exit(nmtd::cli::run(std::env::args_os()));
}
