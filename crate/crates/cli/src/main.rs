fn main() {
    std::process::exit(gridopt_cli::run(std::env::args_os()));
}
