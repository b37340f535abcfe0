fn main() {
    std::process::exit(otbridge::cli::run(std::env::args_os()));
}
