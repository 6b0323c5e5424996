fn main() {
    std::process::exit(mhc_core::cli::run(std::env::args_os()));
}
