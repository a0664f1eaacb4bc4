fn main() {
    std::process::exit(mole::cli::run_command(std::env::args_os()));
}
