fn main() {
    std::process::exit(twistray::cli::run(std::env::args_os()));
}
