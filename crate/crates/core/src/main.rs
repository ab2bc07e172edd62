fn main() {
    std::process::exit(gradtrace::cli::run(std::env::args_os()));
}
