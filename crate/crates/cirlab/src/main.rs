fn main() {
    std::process::exit(cirlab::cli::run(std::env::args_os()));
}
