fn main() {
    std::process::exit(critquant::cli::run(std::env::args_os()));
}
