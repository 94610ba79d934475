fn main() {
    std::process::exit(priorlca::cli::run(std::env::args_os()));
}
