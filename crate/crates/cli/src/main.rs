fn main() {
    std::process::exit(fnetae_cli::run_cli(std::env::args_os()));
}
