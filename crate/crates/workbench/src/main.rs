fn main() {
    std::process::exit(iforge::cli_run(std::env::args_os()));
}
