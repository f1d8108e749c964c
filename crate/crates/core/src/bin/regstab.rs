fn main() {
    std::process::exit(regstab::cli::run_command(std::env::args_os()));
}
