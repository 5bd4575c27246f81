fn main() {
    std::process::exit(hitpro::cli::run(std::env::args_os()));
}
