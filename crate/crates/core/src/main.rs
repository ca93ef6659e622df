fn main() {
    std::process::exit(told::cli::run(std::env::args_os()));
}
