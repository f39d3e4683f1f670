fn main() {
    std::process::exit(facename_core::cli::run(std::env::args_os()));
}
