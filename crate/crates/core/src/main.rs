fn main() {
    std::process::exit(clmammo::cli::run(std::env::args_os()));
}
