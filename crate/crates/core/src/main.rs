fn main() {
    std::process::exit(promptseg::cli::run(std::env::args_os()));
}
