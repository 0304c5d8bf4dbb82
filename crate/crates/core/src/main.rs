fn main() {
    std::process::exit(nashmeta::cli::run(std::env::args_os()));
}
