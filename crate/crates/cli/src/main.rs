fn main() {
    std::process::exit(iplan_cli::run(std::env::args_os()));
}
