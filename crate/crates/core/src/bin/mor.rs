fn main() {
    std::process::exit(mor::cli::run(std::env::args_os()));
}
