fn main() {
    std::process::exit(pairedinv::cli::run(std::env::args_os()));
}
