fn main() {
    std::process::exit(gdfuzz_cli::cli_main(std::env::args_os()));
}
