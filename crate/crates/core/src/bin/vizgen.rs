fn main() {
    std::process::exit(vizgen::cli::run(std::env::args_os()));
}
