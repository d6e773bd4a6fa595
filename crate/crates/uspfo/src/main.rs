fn main() {
    std::process::exit(uspfo::cli::cli_main(std::env::args_os()));
}
