fn main() {
    std::process::exit(fgnce::cli::run_command(std::env::args_os()));
}
