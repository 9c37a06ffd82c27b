fn main() {
    std::process::exit(tdid::cli::run(std::env::args_os()));
}
