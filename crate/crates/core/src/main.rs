fn main() {
    std::process::exit(peftt::cli::run(std::env::args_os()));
}
