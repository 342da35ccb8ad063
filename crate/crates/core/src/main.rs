fn main() {
    std::process::exit(q16::cli::run(std::env::args_os()));
}
