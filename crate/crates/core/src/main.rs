fn main() {
    std::process::exit(ifl_core::cli::run(std::env::args_os()));
}
