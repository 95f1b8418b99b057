fn main() {
    std::process::exit(glind::cli::run(std::env::args_os()));
}
