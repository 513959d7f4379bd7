fn main() {
    std::process::exit(amtfl::cli::run_cli(std::env::args_os()));
}
