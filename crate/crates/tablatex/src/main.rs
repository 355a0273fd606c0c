fn main() {
    std::process::exit(tablatex::cli::run(std::env::args_os()));
}
