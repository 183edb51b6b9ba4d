fn main() {
    std::process::exit(neurovis::cli::run(std::env::args_os()));
}
