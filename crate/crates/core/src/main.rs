fn main() {
    std::process::exit(curvemix::cli::run(std::env::args_os()));
}
