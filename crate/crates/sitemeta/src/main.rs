fn main() {
    std::process::exit(sitemeta::cli::run(std::env::args_os()));
}
