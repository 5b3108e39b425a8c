fn main() {
    std::process::exit(imitparse::cli::run(std::env::args_os()));
}
