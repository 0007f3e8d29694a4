fn main() {
    std::process::exit(dustpipe::cli::run(std::env::args_os()));
}
