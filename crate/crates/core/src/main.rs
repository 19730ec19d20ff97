fn main() {
    std::process::exit(fedsim::cli::run(std::env::args_os()));
}
