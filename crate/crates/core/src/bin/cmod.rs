fn main() {
    std::process::exit(cmod::cli::run(std::env::args_os()));
}
