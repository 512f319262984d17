fn main() {
    std::process::exit(tta_core::harness::cli_main(std::env::args_os()));
}
