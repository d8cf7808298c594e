fn main() {
    std::process::exit(slowdyn_cli::run(std::env::args_os()));
}
