fn main() {
    std::process::exit(capflow::cli::run_command(std::env::args_os()));
}
