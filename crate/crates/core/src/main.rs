fn main() {
    std::process::exit(ssfr::cli::run(std::env::args_os()));
}
