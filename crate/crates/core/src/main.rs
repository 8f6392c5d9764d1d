fn main() {
    std::process::exit(promptorder_core::cli::run(std::env::args_os()));
}
