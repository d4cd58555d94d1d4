fn main() {
    std::process::exit(sercloud::cli::run_command(std::env::args_os()));
}
