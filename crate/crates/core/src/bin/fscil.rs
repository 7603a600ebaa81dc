fn main() {
    std::process::exit(fscil_core::cli::cli_main(std::env::args_os()));
}
