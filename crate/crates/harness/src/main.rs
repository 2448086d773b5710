fn main() {
    std::process::exit(hscr_harness::cli::run(std::env::args_os()));
}
