fn main() {
    std::process::exit(mobre::cli::run(std::env::args_os()));
}
