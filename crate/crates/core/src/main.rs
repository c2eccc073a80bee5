fn main() {
    std::process::exit(icipw::cli::run(std::env::args_os()));
}
