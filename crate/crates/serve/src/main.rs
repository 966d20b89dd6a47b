fn main() {
    std::process::exit(gliopipe_serve::cli::run(std::env::args_os()));
}
