fn main() {
    std::process::exit(hylab_cli::run(std::env::args_os()));
}
