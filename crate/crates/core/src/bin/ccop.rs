fn main() {
    std::process::exit(ccop::cli::run(std::env::args_os()));
}
