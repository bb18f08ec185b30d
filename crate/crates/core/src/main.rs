fn main() {
    std::process::exit(editdiff::cli::run(std::env::args_os()));
}
